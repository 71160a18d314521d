"""
Run ledger for distillation sweeps.
Stores finished student runs in SQLite, keyed by configuration, mode and
seed, so an interrupted sweep can resume without retraining.
"""

import hashlib
import json
import logging
import sqlite3
from dataclasses import asdict
from datetime import datetime
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


def get_connection(path: str):
    """Get a database connection."""
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row  # Return rows as dictionaries
    return conn


def init_database(path: str):
    """Initialize ledger tables if they don't exist."""
    conn = get_connection(path)
    cursor = conn.cursor()

    cursor.execute('''
        CREATE TABLE IF NOT EXISTS configs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            config_key TEXT UNIQUE NOT NULL,
            config_json TEXT NOT NULL,
            created_at DATETIME DEFAULT CURRENT_TIMESTAMP,
            last_run DATETIME
        )
    ''')

    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            config_key TEXT NOT NULL,
            mode TEXT NOT NULL,
            seed INTEGER NOT NULL,
            final_acc REAL,
            rows_json TEXT NOT NULL,
            timestamp DATETIME NOT NULL,
            last_updated DATETIME NOT NULL,
            UNIQUE (config_key, mode, seed),
            FOREIGN KEY (config_key) REFERENCES configs(config_key)
        )
    ''')

    cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_key ON runs(config_key)')

    conn.commit()
    conn.close()
    logger.info(f"Ledger initialized at {path}")


def teacher_fingerprint(params: Optional[Dict]) -> str:
    """sha256 over the teacher's parameter names, shapes and bytes; '' without a teacher."""
    if not params:
        return ''
    digest = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        digest.update(name.encode('utf-8'))
        digest.update(str(value.shape).encode('utf-8'))
        digest.update(value.tobytes())
    return digest.hexdigest()


def _config_json(train_cfg, data_cfg, teacher=None) -> str:
    payload = asdict(train_cfg)
    payload.pop('mode', None)
    payload.pop('seed', None)
    return json.dumps({'train': payload, 'data': asdict(data_cfg), 'teacher': teacher_fingerprint(teacher)},
                      sort_keys=True, default=str)


def config_key(train_cfg, data_cfg, teacher=None) -> str:
    """
    Stable hash of a training and data configuration plus the frozen
    teacher's parameters, ignoring mode and seed.
    """
    return hashlib.sha256(_config_json(train_cfg, data_cfg, teacher).encode('utf-8')).hexdigest()[:16]


def register_config(path: str, train_cfg, data_cfg, teacher=None) -> str:
    """Record a configuration if it is new and return its key."""
    key = config_key(train_cfg, data_cfg, teacher)

    conn = get_connection(path)
    cursor = conn.cursor()

    cursor.execute('INSERT OR IGNORE INTO configs (config_key, config_json) VALUES (?, ?)',
                   (key, _config_json(train_cfg, data_cfg, teacher)))

    conn.commit()
    conn.close()
    return key


def upsert_run(path: str, key: str, mode: str, seed: int, rows: List[Dict]) -> bool:
    """
    Insert or replace the rows of one run. Returns True if the run is new.
    """
    conn = get_connection(path)
    cursor = conn.cursor()
    now = datetime.now()

    cursor.execute('UPDATE configs SET last_run = ? WHERE config_key = ?', (now, key))

    cursor.execute('SELECT id FROM runs WHERE config_key = ? AND mode = ? AND seed = ?', (key, mode, seed))
    existing = cursor.fetchone()
    final_acc = rows[-1]['test_acc'] if rows else None
    rows_json = json.dumps(rows)

    if existing:
        cursor.execute('''
            UPDATE runs SET final_acc = ?, rows_json = ?, last_updated = ?
            WHERE id = ?
        ''', (final_acc, rows_json, now, existing['id']))
        is_new = False
    else:
        cursor.execute('''
            INSERT INTO runs (config_key, mode, seed, final_acc, rows_json, timestamp, last_updated)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        ''', (key, mode, seed, final_acc, rows_json, now, now))
        is_new = True

    conn.commit()
    conn.close()
    logger.info(f"{'Recorded' if is_new else 'Updated'} run {mode}/seed {seed} under config {key}")
    return is_new


def get_run(path: str, key: str, mode: str, seed: int) -> Optional[List[Dict]]:
    """Get the stored epoch rows of one run, or None."""
    conn = get_connection(path)
    cursor = conn.cursor()

    cursor.execute('SELECT rows_json FROM runs WHERE config_key = ? AND mode = ? AND seed = ?', (key, mode, seed))
    row = cursor.fetchone()
    conn.close()

    if row:
        return json.loads(row['rows_json'])
    return None


def get_runs(path: str, key: str) -> List[Dict]:
    """All runs recorded for a configuration, ordered by mode and seed."""
    conn = get_connection(path)
    cursor = conn.cursor()

    cursor.execute('''
        SELECT mode, seed, final_acc, timestamp FROM runs
        WHERE config_key = ?
        ORDER BY mode, seed
    ''', (key,))

    rows = cursor.fetchall()
    conn.close()

    return [dict(row) for row in rows]


def get_stats(path: str) -> Dict:
    """Get ledger statistics."""
    conn = get_connection(path)
    cursor = conn.cursor()

    cursor.execute('SELECT COUNT(*) as total FROM runs')
    total = cursor.fetchone()['total']

    cursor.execute('SELECT COUNT(*) as configs FROM configs')
    configs = cursor.fetchone()['configs']

    conn.close()

    return {
        'total_runs': total,
        'total_configs': configs,
    }
