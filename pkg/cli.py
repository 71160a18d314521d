#!/usr/bin/env python3
"""
Command-line front door for the CKA distillation toolkit.

    python cli.py verify [--trials 500] [--seed 0]
    python cli.py similarity A.fdmp B.fdmp [--flatten] [--patch 2,2]
    python cli.py heatmap DIR_A DIR_B out.csv
    python cli.py loss {fcka,pcka,mmd,pmmd,intra,inter,kd,mimic} STUDENT.fdmp TEACHER.fdmp
    python cli.py distill [--config distill.yaml] [--mode ce,rcka] [--seeds 1-7]

Exit codes: 0 success, 1 property/validation/data failure, 2 usage error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List

import numpy as np

import feature_io
import harness
import losses
import similarity
import verify
from errors import CkaToolkitError, DimensionError
from losses import AverageDim, LossReport, LossWeights, PatchConfig
from similarity import CkaConfig

logger = logging.getLogger(__name__)

DEFAULTS = LossWeights()


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def parse_patch(text: str) -> PatchConfig:
    try:
        p_h, p_w = (int(v) for v in text.split(','))
        return PatchConfig(p_h, p_w)
    except (ValueError, CkaToolkitError):
        raise argparse.ArgumentTypeError(f"patch size must look like 'PH,PW' with positive ints, got {text!r}")


def parse_seeds(text: str) -> List[int]:
    """'1,2,3' or '1-7' (inclusive)."""
    try:
        if '-' in text:
            start, end = (int(v) for v in text.split('-'))
            return list(range(start, end + 1))
        return [int(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must look like '1,2,3' or '1-7', got {text!r}")


def parse_modes(text: str) -> List[str]:
    modes = [m.strip() for m in text.split(',') if m.strip()]
    bad = [m for m in modes if m not in harness.MODES]
    if not modes or bad:
        raise argparse.ArgumentTypeError(f"modes must be from {harness.MODES}, got {text!r}")
    return modes


def emit(values: dict, fmt: str):
    """Print name/value pairs as CSV or aligned text."""
    if fmt == 'csv':
        print('metric,value')
        for name, value in values.items():
            print(f"{name},{value:.17g}" if isinstance(value, float) else f"{name},{value}")
    else:
        width = max(len(n) for n in values)
        for name, value in values.items():
            print(f"{name:<{width}}  {value:.12f}" if isinstance(value, float) else f"{name:<{width}}  {value}")


def _as_matrix_input(arr: np.ndarray, flatten: bool, path: str) -> np.ndarray:
    if arr.ndim == 2:
        return arr
    if arr.ndim == 4 and flatten:
        return arr.reshape(arr.shape[0], -1)
    raise DimensionError(f"{path}: expected a 2-D dump (or 4-D with --flatten), got shape {arr.shape}")


def cmd_verify(args) -> int:
    results = verify.run_verification(trials=args.trials, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = 'ok' if r.passed else 'FAIL'
        print(f"{r.name:<{width}}  max_dev={r.max_deviation:.3e}  tol={r.tolerance:.0e}  {status}")
    failure = verify.first_failure(results)
    if failure:
        print(f"FAILED: {failure.name} ({failure.description})")
        return 1
    print(f"All {len(results)} properties hold over {args.trials} trials (seed {args.seed})")
    return 0


def cmd_similarity(args) -> int:
    cfg = CkaConfig(center=not args.no_center)
    raw_a = feature_io.read_dump(args.dump_a, args.allow_nonfinite)
    raw_b = feature_io.read_dump(args.dump_b, args.allow_nonfinite)
    if args.patch and (raw_a.ndim != 4 or raw_b.ndim != 4):
        raise DimensionError("--patch needs two 4-D (b, c, h, w) dumps")
    x = _as_matrix_input(raw_a, args.flatten or bool(args.patch), args.dump_a)
    y = _as_matrix_input(raw_b, args.flatten or bool(args.patch), args.dump_b)

    decomposition = similarity.mmd_decomposition(x, y, cfg)
    values = {
        'cka': similarity.cka(x, y, cfg),
        'pairwise_term': decomposition.pairwise_term,
        'mmd_form': decomposition.mmd_form,
        'jensen_bound': decomposition.jensen_bound,
    }
    if args.patch:
        report = losses.pcka_loss(raw_b, raw_a, args.patch, args.gamma, cfg)
        values['pcka'] = report.value
        if report.skipped:
            values['pcka_skipped_channels'] = ' '.join(str(k) for k in report.skipped)
    emit(values, args.format)
    return 0


def cmd_heatmap(args) -> int:
    cfg = CkaConfig(center=not args.no_center)
    layers = {}
    errors = []
    for directory in (args.dir_a, args.dir_b):
        try:
            paths = feature_io.list_dumps(directory)
        except OSError as e:
            errors.append(f"{directory}: {e}")
            continue
        if not paths:
            errors.append(f"{directory}: no .fdmp files")
        loaded = []
        for path in paths:
            try:
                arr = feature_io.read_dump(path, args.allow_nonfinite)
                if arr.ndim < 2:
                    raise DimensionError(f"expected a (b, ...) dump with at least 2 dims, got shape {arr.shape}")
                loaded.append((os.path.splitext(os.path.basename(path))[0],
                               arr.reshape(arr.shape[0], -1) if arr.ndim > 2 else arr))
            except (CkaToolkitError, OSError) as e:
                errors.append(f"{path}: {e}")
        layers[directory] = loaded

    if errors:
        for message in errors:
            print(f"error: {message}", file=sys.stderr)
        print(f"{len(errors)} file error(s); no output written", file=sys.stderr)
        return 1

    a = layers[args.dir_a]
    b = layers[args.dir_b]
    matrix = similarity.layer_cka_matrix([m for _, m in a], [m for _, m in b], cfg, workers=args.workers)
    feature_io.export_csv(matrix, args.out, [n for n, _ in a], [n for n, _ in b])
    print(f"Wrote {matrix.shape[0]}x{matrix.shape[1]} CKA heatmap to {args.out}")
    return 0


def cmd_loss(args) -> int:
    cfg = CkaConfig(center=not args.no_center)
    student = feature_io.read_dump(args.student, args.allow_nonfinite)
    teacher = feature_io.read_dump(args.teacher, args.allow_nonfinite)
    kind = args.kind
    if kind == 'fcka':
        report = losses.fcka_loss(student, teacher, cfg)
    elif kind == 'pcka':
        report = losses.pcka_loss(student, teacher, args.patch or PatchConfig(), args.gamma, cfg,
                                  average=AverageDim(args.average))
    elif kind == 'mmd':
        value, grad = losses.mmd_loss(student, teacher)
        report = LossReport(value=value, grad=grad, components={'mmd': value})
    elif kind == 'pmmd':
        report = losses.patch_mmd_loss(student, teacher, args.patch or PatchConfig(), args.gamma,
                                       average=AverageDim(args.average))
    elif kind == 'intra':
        report = losses.intra_lcka_loss(student, teacher, cfg)
    elif kind == 'inter':
        report = losses.inter_lcka_loss(student, teacher, cfg)
    elif kind == 'kd':
        report = losses.kd_kl_loss(student, teacher, args.tau)
    else:
        if not args.proj:
            raise DimensionError("mimic loss needs --proj with a (teacher channels, student channels) dump")
        report = losses.mimic_mse_loss(student, teacher, feature_io.read_dump(args.proj, args.allow_nonfinite))

    values = {'value': report.value, 'grad_norm': float(np.linalg.norm(report.grad))}
    values.update({f"component_{k}": v for k, v in report.components.items()})
    if report.skipped:
        values['skipped'] = ' '.join(str(k) for k in report.skipped)
    emit(values, args.format)
    return 0


def cmd_distill(args) -> int:
    config = harness.load_distill_config(args.config)
    student_cfg = config['student']
    weights = replace(
        student_cfg.weights,
        **{k: getattr(args, k) for k in ('alpha', 'beta', 'gamma', 'tau') if getattr(args, k) is not None})
    overrides = {'weights': weights}
    if args.no_center:
        overrides['cka_cfg'] = CkaConfig(center=False)
    if args.epochs is not None:
        overrides['epochs'] = args.epochs
    student_cfg = replace(student_cfg, **overrides)
    modes = args.mode or config['modes']
    seeds = args.seeds or config['seeds']

    data = harness.make_blobs(config['data'])
    arch = harness.NetArch(data.config.dim, config['teacher_hidden'], data.config.n_classes)
    teacher = harness.train_teacher(data, arch, config['teacher'], config['min_accuracy'])

    result = harness.run_seed_sweep(teacher, data, student_cfg, seeds, modes,
                                    workers=args.workers, ledger=args.ledger)
    paths = harness.write_sweep(result, args.out_dir)
    print(f"Wrote {len(paths)} CSV file(s) to {args.out_dir}")
    for row in result.summary.itertuples():
        print(f"{row.mode:<5} median_acc={row.median_acc:.4f} min={row.min_acc:.4f} "
              f"max={row.max_acc:.4f} runs={row.runs} failed={row.failed}")
    for mode, seed, message in result.failures:
        print(f"run {mode}/seed {seed} failed: {message}", file=sys.stderr)
    return 1 if result.failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='CKA similarity and CKA-based distillation toolkit')
    parser.add_argument('--log-level', default='WARNING', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('verify', help='Run the randomized property suite')
    p.add_argument('--trials', type=positive_int, default=500)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('similarity', help='CKA, MMD decomposition and optional PCKA between two dumps')
    p.add_argument('dump_a')
    p.add_argument('dump_b')
    p.add_argument('--flatten', action='store_true', help='Flatten 4-D dumps to (b, c*h*w)')
    p.add_argument('--patch', type=parse_patch, default=None, help='PH,PW patch size for PCKA on 4-D dumps')
    p.add_argument('--gamma', type=float, default=DEFAULTS.gamma)
    p.add_argument('--allow-nonfinite', action='store_true', help='Accept dumps holding NaN or Inf')
    p.add_argument('--no-center', action='store_true')
    p.add_argument('--format', choices=['csv', 'pretty'], default='pretty')
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser('heatmap', help='Layer-by-layer CKA matrix between two dump directories')
    p.add_argument('dir_a')
    p.add_argument('dir_b')
    p.add_argument('out')
    p.add_argument('--no-center', action='store_true')
    p.add_argument('--allow-nonfinite', action='store_true', help='Accept dumps holding NaN or Inf')
    p.add_argument('--workers', type=positive_int, default=1)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser('loss', help='Evaluate one distillation loss between a student and a teacher dump')
    p.add_argument('kind', choices=['fcka', 'pcka', 'mmd', 'pmmd', 'intra', 'inter', 'kd', 'mimic'])
    p.add_argument('student')
    p.add_argument('teacher')
    p.add_argument('--proj', default=None, help='Projection dump for the mimic loss')
    p.add_argument('--patch', type=parse_patch, default=None)
    p.add_argument('--average', choices=[a.value for a in AverageDim], default=AverageDim.CHANNEL.value)
    p.add_argument('--gamma', type=float, default=DEFAULTS.gamma)
    p.add_argument('--tau', type=float, default=DEFAULTS.tau)
    p.add_argument('--allow-nonfinite', action='store_true', help='Accept dumps holding NaN or Inf')
    p.add_argument('--no-center', action='store_true')
    p.add_argument('--format', choices=['csv', 'pretty'], default='pretty')
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser('distill', help='Train a teacher, then sweep students over seeds and modes')
    p.add_argument('--config', default=harness.CONFIG_PATH)
    p.add_argument('--mode', type=parse_modes, default=None, help="Comma-separated modes, e.g. 'ce,rcka'")
    p.add_argument('--seeds', type=parse_seeds, default=None, help="'1,2,3' or '1-7'")
    p.add_argument('--alpha', type=float, default=None)
    p.add_argument('--beta', type=float, default=None)
    p.add_argument('--gamma', type=float, default=None)
    p.add_argument('--tau', type=float, default=None)
    p.add_argument('--epochs', type=positive_int, default=None)
    p.add_argument('--no-center', action='store_true')
    p.add_argument('--workers', type=positive_int, default=1)
    p.add_argument('--ledger', default=None, help='SQLite ledger path; recorded runs are reused')
    p.add_argument('--out-dir', default='distill_out')
    p.set_defaults(func=cmd_distill)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.func(args)
    except (CkaToolkitError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
