#!/usr/bin/env python3
"""
Convert .npy arrays saved by a training framework into FDMP dumps.

    python scripts/npy_to_fdmp.py layer1.npy layer2.npy --out-dir dumps/ [--float32]
"""

import argparse
import logging
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import feature_io  # noqa: E402
from errors import CkaToolkitError  # noqa: E402

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def convert(src: str, out_dir: str, dtype: int) -> str:
    arr = np.load(src, allow_pickle=False)
    name = os.path.splitext(os.path.basename(src))[0] + '.fdmp'
    dest = os.path.join(out_dir, name)
    feature_io.write_dump(arr, dest, dtype=dtype)
    return dest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Convert .npy arrays to FDMP dumps')
    parser.add_argument('inputs', nargs='+', help='.npy files')
    parser.add_argument('--out-dir', default='.')
    parser.add_argument('--float32', action='store_true', help='Store payloads as float32')
    args = parser.parse_args(argv)

    os.makedirs(args.out_dir, exist_ok=True)
    dtype = feature_io.DTYPE_FLOAT32 if args.float32 else feature_io.DTYPE_FLOAT64
    failed = 0
    for src in args.inputs:
        try:
            logger.info(f"✓ {src} -> {convert(src, args.out_dir, dtype)}")
        except (CkaToolkitError, OSError, ValueError) as e:
            logger.error(f"✗ {src}: {e}")
            failed += 1
    logger.info(f"Converted {len(args.inputs) - failed}/{len(args.inputs)} file(s)")
    return 1 if failed else 0


if __name__ == '__main__':
    sys.exit(main())
