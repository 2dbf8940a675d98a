#!/usr/bin/env python3
"""Pretrain the toy backbone on the standard 64-pair toy dataset.

Produces the checkpoint the test suite and the CLI's `--backbone <path>`
option consume. Fully deterministic: the same arguments always reproduce
the same bytes.

    python3 scripts/pretrain_toy.py --out assets/toy_pretrained_64.pt
"""

import argparse
import tempfile
import time
from pathlib import Path

from ctxinpaint.data import load_manifest, make_toy_dataset
from ctxinpaint.pretrain import PretrainConfig, pretrain_backbone, save_pretrained


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="assets/toy_pretrained_64.pt")
    parser.add_argument("--n", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=PretrainConfig.steps)
    parser.add_argument("--data-dir", default=None,
                        help="where to render the toy dataset (default: temp dir)")
    args = parser.parse_args()

    data_dir = args.data_dir or tempfile.mkdtemp(prefix="toy-data-")
    manifest = make_toy_dataset(args.n, args.seed, data_dir)
    records = load_manifest(manifest)
    cfg = PretrainConfig(steps=args.steps, seed=args.seed)
    start = time.time()
    bundle = pretrain_backbone(records, cfg, verbose=True)
    save_pretrained(bundle, args.out)
    print(f"wrote {args.out} after {cfg.steps} steps "
          f"({(time.time() - start) / 60:.1f} min)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
