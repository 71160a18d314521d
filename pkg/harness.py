"""
Desk-scale distillation harness: synthetic Gaussian blobs, tiny ReLU
MLPs with manual forward/backward, SGD with momentum, and training loops
for CE-only, KD and RCKA students with probe-batch logit CKA tracking.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

import db
import losses
import similarity
from errors import ConfigError, DegenerateInputError, DimensionError, NonFiniteInputError, TrainingDivergedError
from losses import LossReport, LossWeights
from similarity import CkaConfig

logger = logging.getLogger(__name__)

CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'distill.yaml')

MODES = ('ce', 'kd', 'rcka')
REPORT_COLUMNS = ['epoch', 'mode', 'seed', 'ce', 'fcka', 'intra', 'inter', 'kd', 'total', 'test_acc', 'probe_cka']
PARAM_NAMES = ('w1', 'b1', 'w2', 'b2')


@dataclass(frozen=True)
class BlobConfig:
    n_classes: int = 4
    n_per_class: int = 200
    dim: int = 16
    clusters_per_class: int = 4
    center_scale: float = 1.0
    spread: float = 0.5
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.n_classes < 2 or self.dim < 2:
            raise ConfigError(f"need n_classes >= 2 and dim >= 2, got {self.n_classes}, {self.dim}")
        if self.clusters_per_class < 1:
            raise ConfigError(f"clusters_per_class must be >= 1, got {self.clusters_per_class}")
        if not self.spread > 0:
            raise ConfigError(f"spread must be positive, got {self.spread}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        n_test = round(self.n_per_class * self.test_fraction)
        if n_test < 1 or n_test >= self.n_per_class:
            raise ConfigError(f"n_per_class={self.n_per_class} leaves an empty train or test split")


@dataclass
class BlobDataset:
    config: BlobConfig
    centers: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


@dataclass(frozen=True)
class NetArch:
    n_in: int
    n_hidden: int
    n_out: int

    def __post_init__(self):
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ConfigError(f"layer sizes must be >= 1, got {self}")


@dataclass
class TinyNet:
    """input -> ReLU hidden -> logits. Weights are stored (fan_in, fan_out)."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def arch(self) -> NetArch:
        return NetArch(self.w1.shape[0], self.w1.shape[1], self.w2.shape[1])

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> 'TinyNet':
        return TinyNet(*(p.copy() for p in self.params().values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())


@dataclass(frozen=True)
class TrainConfig:
    mode: str = 'rcka'
    weights: LossWeights = LossWeights()
    cka_cfg: CkaConfig = CkaConfig()
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    decay_every: int = 10
    decay_rate: float = 0.5
    student_hidden: int = 8
    probe_size: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        # lr = 0 is allowed so a run can be checked to leave parameters unchanged
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.decay_every < 1 or self.probe_size < 2:
            raise ConfigError("epochs, decay_every must be >= 1 and probe_size >= 2")


TEACHER_HIDDEN = 64


@dataclass
class TrainReport:
    mode: str
    seed: int
    rows: List[Dict] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]['test_acc'] if self.rows else float('nan')

    @property
    def probe_curve(self) -> List[float]:
        return [row['probe_cka'] for row in self.rows]


def make_blobs(cfg: BlobConfig = BlobConfig()) -> BlobDataset:
    """
    Gaussian clusters around seeded random centers, split per class.

    Each class owns clusters_per_class centers (centers has shape
    (n_classes, clusters_per_class, dim)) and its points are dealt to them
    round-robin. With more than one cluster per class the classes are not
    linearly separable in general.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(0.0, cfg.center_scale, size=(cfg.n_classes, cfg.clusters_per_class, cfg.dim))
    n_test = round(cfg.n_per_class * cfg.test_fraction)
    owner = np.arange(cfg.n_per_class) % cfg.clusters_per_class

    train_x, train_y, test_x, test_y = [], [], [], []
    for k in range(cfg.n_classes):
        points = centers[k, owner] + cfg.spread * rng.standard_normal((cfg.n_per_class, cfg.dim))
        order = rng.permutation(cfg.n_per_class)
        test_x.append(points[order[:n_test]])
        train_x.append(points[order[n_test:]])
        test_y.append(np.full(n_test, k, dtype=np.int64))
        train_y.append(np.full(cfg.n_per_class - n_test, k, dtype=np.int64))

    x_train = np.concatenate(train_x)
    y_train = np.concatenate(train_y)
    shuffle = rng.permutation(len(y_train))
    x_test = np.concatenate(test_x)
    y_test = np.concatenate(test_y)
    test_shuffle = rng.permutation(len(y_test))
    return BlobDataset(cfg, centers, x_train[shuffle], y_train[shuffle], x_test[test_shuffle], y_test[test_shuffle])


def init_net(arch: NetArch, rng: np.random.Generator) -> TinyNet:
    w1 = rng.normal(0.0, np.sqrt(2.0 / arch.n_in), size=(arch.n_in, arch.n_hidden))
    w2 = rng.normal(0.0, np.sqrt(1.0 / arch.n_hidden), size=(arch.n_hidden, arch.n_out))
    return TinyNet(w1, np.zeros(arch.n_hidden), w2, np.zeros(arch.n_out))


def _check_batch(net: TinyNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.w1.shape[0]:
        raise DimensionError(f"batch shape {x.shape} does not match input size {net.w1.shape[0]}")
    return x


def forward(net: TinyNet, x) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (hidden, logits). hidden is exposed as a (B, H, 1, 1) feature
    map so FCKA's flatten is the identity on (B, H).
    """
    x = _check_batch(net, x)
    hidden = np.maximum(x @ net.w1 + net.b1, 0.0)
    logits = hidden @ net.w2 + net.b2
    return hidden.reshape(hidden.shape[0], hidden.shape[1], 1, 1), logits


def backward(net: TinyNet, x, grad_logits, grad_hidden=None) -> Dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on logits and (post-ReLU) hidden activations."""
    x = _check_batch(net, x)
    pre = x @ net.w1 + net.b1
    hidden = np.maximum(pre, 0.0)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != (x.shape[0], net.w2.shape[1]):
        raise DimensionError(f"logit grad shape {grad_logits.shape} does not match {(x.shape[0], net.w2.shape[1])}")

    grad_h = grad_logits @ net.w2.T
    if grad_hidden is not None:
        grad_hidden = np.asarray(grad_hidden, dtype=np.float64)
        if grad_hidden.size != hidden.size:
            raise DimensionError(f"hidden grad shape {grad_hidden.shape} does not match {hidden.shape}")
        grad_h = grad_h + grad_hidden.reshape(hidden.shape)
    grad_pre = grad_h * (pre > 0)
    return {
        'w1': x.T @ grad_pre,
        'b1': grad_pre.sum(axis=0),
        'w2': hidden.T @ grad_logits,
        'b2': grad_logits.sum(axis=0),
    }


def evaluate_accuracy(net: TinyNet, x, y) -> float:
    _, logits = forward(net, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


class SgdMomentum:
    """v <- μ·v + (g + λ·w); w <- w - lr·v."""

    def __init__(self, net: TinyNet, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p in net.params().items()}

    def step(self, net: TinyNet, grads: Dict[str, np.ndarray], lr: float):
        for name in PARAM_NAMES:
            param = getattr(net, name)
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name] + self.weight_decay * param
            param -= lr * v


def epoch_learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Fixed step decay; epoch is 0-based."""
    return cfg.learning_rate * cfg.decay_rate ** (epoch // cfg.decay_every)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    # incomplete trailing batches are dropped so every Gram has batch_size rows
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def train_teacher(data: BlobDataset, arch: NetArch, cfg: TrainConfig, min_accuracy: float = 0.95) -> TinyNet:
    """Train with cross-entropy only; raises if test accuracy ends below min_accuracy."""
    rng = np.random.default_rng(cfg.seed)
    net = init_net(arch, rng)
    opt = SgdMomentum(net, cfg.momentum, cfg.weight_decay)

    for epoch in range(cfg.epochs):
        lr = epoch_learning_rate(cfg, epoch)
        total = 0.0
        count = 0
        for idx in _batches(len(data.y_train), cfg.batch_size, rng):
            xb = data.x_train[idx]
            _, logits = forward(net, xb)
            try:
                ce = losses.cross_entropy_loss(logits, data.y_train[idx])
            except NonFiniteInputError as e:
                raise TrainingDivergedError(f"teacher diverged at epoch {epoch + 1}: {e}",
                                            epoch=epoch + 1, seed=cfg.seed) from e
            opt.step(net, backward(net, xb, ce.grad), lr)
            total += ce.value
            count += 1
        mean_loss = total / max(count, 1)
        if not np.isfinite(mean_loss) or not net.is_finite():
            raise TrainingDivergedError(f"teacher diverged at epoch {epoch + 1}", epoch=epoch + 1, seed=cfg.seed)
        logger.info(f"Teacher epoch {epoch + 1}/{cfg.epochs}: ce={mean_loss:.4f}")

    accuracy = evaluate_accuracy(net, data.x_test, data.y_test)
    logger.info(f"Teacher test accuracy: {accuracy:.4f}")
    if accuracy < min_accuracy:
        raise TrainingDivergedError(
            f"teacher test accuracy {accuracy:.4f} below {min_accuracy}; defaults are mis-tuned",
            epoch=cfg.epochs, seed=cfg.seed)
    return net


_ZERO = LossReport(value=0.0, grad=None)


def _student_step_losses(student: TinyNet, teacher: TinyNet, xb, yb, cfg: TrainConfig):
    """Composed loss for one batch. Returns (components, grad_logits, grad_hidden)."""
    hidden_s, z_s = forward(student, xb)
    hidden_t, z_t = forward(teacher, xb)
    w = cfg.weights

    ce = losses.cross_entropy_loss(z_s, yb)
    grad_logits = ce.grad
    grad_hidden = None
    components = {'ce': ce.value, 'fcka': 0.0, 'intra': 0.0, 'inter': 0.0, 'kd': 0.0, 'total': ce.value}

    if cfg.mode == 'kd' and w.alpha > 0:
        kd = losses.kd_kl_loss(z_s, z_t, w.tau)
        grad_logits = grad_logits + w.alpha * kd.grad
        components['kd'] = kd.value
        components['total'] = ce.value + w.alpha * kd.value

    elif cfg.mode == 'rcka':
        fcka = intra = inter = _ZERO
        if w.alpha > 0:
            try:
                fcka = losses.fcka_loss(hidden_s, hidden_t, cfg.cka_cfg)
            except DegenerateInputError as e:
                logger.warning(f"Skipping FCKA for this batch: {e}")
        if w.beta > 0:
            intra = losses.intra_lcka_loss(z_s, z_t, cfg.cka_cfg)
            inter = losses.inter_lcka_loss(z_s, z_t, cfg.cka_cfg)
        total = losses.rcka_total(ce.value, fcka, intra, inter, w)
        if total.grad is not None:
            grad_logits = grad_logits + total.grad
        grad_hidden = total.extra_grads.get('features')
        components.update(total.components)

    return components, grad_logits, grad_hidden


def train_student(teacher: TinyNet, data: BlobDataset, cfg: TrainConfig) -> TrainReport:
    """Train a student against a frozen teacher; logit CKA on the probe batch is tracked per epoch."""
    if cfg.student_hidden >= teacher.w1.shape[1]:
        raise ConfigError(f"student hidden {cfg.student_hidden} must be smaller than teacher hidden {teacher.w1.shape[1]}")
    rng = np.random.default_rng(cfg.seed)
    arch = NetArch(teacher.w1.shape[0], cfg.student_hidden, teacher.w2.shape[1])
    student = init_net(arch, rng)
    opt = SgdMomentum(student, cfg.momentum, cfg.weight_decay)

    probe_x = data.x_test[:cfg.probe_size]
    _, probe_t = forward(teacher, probe_x)
    report = TrainReport(mode=cfg.mode, seed=cfg.seed)

    for epoch in range(cfg.epochs):
        lr = epoch_learning_rate(cfg, epoch)
        sums = {}
        count = 0
        for idx in _batches(len(data.y_train), cfg.batch_size, rng):
            xb = data.x_train[idx]
            try:
                components, grad_logits, grad_hidden = _student_step_losses(
                    student, teacher, xb, data.y_train[idx], cfg)
            except NonFiniteInputError as e:
                raise TrainingDivergedError(f"student ({cfg.mode}, seed {cfg.seed}) diverged at epoch {epoch + 1}: {e}",
                                            epoch=epoch + 1, seed=cfg.seed) from e
            opt.step(student, backward(student, xb, grad_logits, grad_hidden), lr)
            for key, value in components.items():
                sums[key] = sums.get(key, 0.0) + value
            count += 1

        means = {key: value / max(count, 1) for key, value in sums.items()}
        if not np.isfinite(means.get('total', 0.0)) or not student.is_finite():
            raise TrainingDivergedError(f"student ({cfg.mode}, seed {cfg.seed}) diverged at epoch {epoch + 1}",
                                        epoch=epoch + 1, seed=cfg.seed)

        _, probe_s = forward(student, probe_x)
        row = {'epoch': epoch + 1, 'mode': cfg.mode, 'seed': cfg.seed}
        row.update({key: means.get(key, 0.0) for key in ('ce', 'fcka', 'intra', 'inter', 'kd', 'total')})
        row['test_acc'] = evaluate_accuracy(student, data.x_test, data.y_test)
        row['probe_cka'] = similarity.cka(probe_t, probe_s, cfg.cka_cfg)
        report.rows.append(row)
        logger.info(f"Student {cfg.mode} seed {cfg.seed} epoch {epoch + 1}/{cfg.epochs}: "
                    f"total={row['total']:.4f} acc={row['test_acc']:.4f} probe_cka={row['probe_cka']:.4f}")

    return report


def report_to_frame(report: TrainReport) -> pd.DataFrame:
    return pd.DataFrame(report.rows, columns=REPORT_COLUMNS)


@dataclass
class SweepResult:
    reports: List[TrainReport]
    summary: pd.DataFrame
    failures: List[Tuple[str, int, str]]

    def runs_frame(self) -> pd.DataFrame:
        frames = [report_to_frame(r) for r in self.reports]
        if not frames:
            return pd.DataFrame(columns=REPORT_COLUMNS)
        return pd.concat(frames, ignore_index=True)


def _summarize(modes: List[str], seeds: List[int], by_run: Dict[Tuple[str, int], TrainReport],
               failures: List[Tuple[str, int, str]]) -> pd.DataFrame:
    rows = []
    for mode in modes:
        accs = [by_run[(mode, s)].final_accuracy for s in seeds if (mode, s) in by_run]
        rows.append({
            'mode': mode,
            'runs': len(accs),
            'failed': sum(1 for m, _, _ in failures if m == mode),
            'median_acc': float(np.median(accs)) if accs else float('nan'),
            'min_acc': float(np.min(accs)) if accs else float('nan'),
            'max_acc': float(np.max(accs)) if accs else float('nan'),
        })
    return pd.DataFrame(rows)


def run_seed_sweep(teacher: TinyNet, data: BlobDataset, cfg: TrainConfig, seeds: List[int],
                   modes: Optional[List[str]] = None, workers: int = 1,
                   ledger: Optional[str] = None) -> SweepResult:
    """
    Train one student per (mode, seed). A failing run is logged and listed
    in the result without aborting the others. With a ledger path, runs
    already recorded for the same configuration are reused.
    """
    modes = list(modes) if modes else [cfg.mode]
    if len(seeds) < 3:
        logger.warning(f"Sweep over {len(seeds)} seed(s); medians need at least 3 to be meaningful")

    jobs = []
    for mode in dict.fromkeys(modes):
        for seed in seeds:
            jobs.append((mode, seed))

    by_run: Dict[Tuple[str, int], TrainReport] = {}
    failures: List[Tuple[str, int, str]] = []
    key = None
    if ledger:
        db.init_database(ledger)
        key = db.register_config(ledger, cfg, data.config, teacher.params())
        for mode, seed in list(jobs):
            stored = db.get_run(ledger, key, mode, seed)
            if stored is not None:
                by_run[(mode, seed)] = TrainReport(mode=mode, seed=seed, rows=stored)
                logger.info(f"Reusing ledger run {mode}/seed {seed}")
        jobs = [job for job in jobs if job not in by_run]

    def run(job):
        mode, seed = job
        return train_student(teacher, data, replace(cfg, mode=mode, seed=seed))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_job = {executor.submit(run, job): job for job in jobs}
        for future in as_completed(future_to_job):
            mode, seed = future_to_job[future]
            try:
                report = future.result()
            except Exception as e:
                logger.error(f"Run {mode}/seed {seed} failed: {e}")
                failures.append((mode, seed, str(e)))
                continue
            by_run[(mode, seed)] = report
            logger.info(f"✓ {mode}/seed {seed}: final acc {report.final_accuracy:.4f}")
            if ledger:
                db.upsert_run(ledger, key, mode, seed, report.rows)

    failures.sort()
    reports = [by_run[(m, s)] for m in dict.fromkeys(modes) for s in seeds if (m, s) in by_run]
    return SweepResult(reports=reports, summary=_summarize(modes, seeds, by_run, failures), failures=failures)


def report_path(out_dir: str, mode: str, seed: int) -> str:
    return os.path.join(out_dir, f"{mode}_seed{seed}.csv")


def write_sweep(result: SweepResult, out_dir: str) -> List[str]:
    """
    Write one TrainReport CSV per run plus summary.csv; returns the report
    paths followed by the summary path.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for report in result.reports:
        path = report_path(out_dir, report.mode, report.seed)
        report_to_frame(report).to_csv(path, index=False, float_format='%.17g')
        paths.append(path)
    summary_path = os.path.join(out_dir, 'summary.csv')
    result.summary.to_csv(summary_path, index=False, float_format='%.17g')
    paths.append(summary_path)
    logger.info(f"Wrote {len(result.reports)} run CSV(s) and {summary_path}")
    return paths


def load_distill_config(path: str = CONFIG_PATH) -> Dict:
    """
    Read distill.yaml into {'data': BlobConfig, 'teacher': TrainConfig,
    'teacher_hidden': int, 'student': TrainConfig, 'seeds': list, 'modes': list}.
    """
    with open(path, 'r') as f:
        raw = yaml.safe_load(f) or {}

    try:
        data_cfg = BlobConfig(**raw.get('data', {}))

        teacher_raw = dict(raw.get('teacher', {}))
        teacher_hidden = int(teacher_raw.pop('hidden', TEACHER_HIDDEN))
        min_accuracy = float(teacher_raw.pop('min_accuracy', 0.95))
        teacher_cfg = TrainConfig(mode='ce', **teacher_raw)

        student_raw = dict(raw.get('student', {}))
        weights = LossWeights(**student_raw.pop('weights', {}))
        cka_cfg = CkaConfig(center=bool(student_raw.pop('center', True)))
        student_cfg = TrainConfig(weights=weights, cka_cfg=cka_cfg, **student_raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e

    sweep = raw.get('sweep', {})
    return {
        'data': data_cfg,
        'teacher': teacher_cfg,
        'teacher_hidden': teacher_hidden,
        'min_accuracy': min_accuracy,
        'student': student_cfg,
        'seeds': list(sweep.get('seeds', [1, 2, 3, 4, 5, 6, 7])),
        'modes': list(sweep.get('modes', ['ce', 'rcka'])),
    }
