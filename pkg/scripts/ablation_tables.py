"""Generate the default dataset and run both built-in ablation presets through the CLI.

    python scripts/ablation_tables.py runs/ --set finetune.episodes=500

Writes DIR/data, DIR/mask_ablation (strategy x ratio rows) and
DIR/pretrain_fusion_grid (pretraining x fusion 2x2 grid).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from mumae import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    overrides = [a for kv in args.set for a in ("--set", kv)]
    data = args.out / "data"
    if not (data / "manifest.txt").exists():
        code = cli.main(["gen-data", "--out", str(data), *overrides])
        if code:
            return code
    for preset, name in (("mask-ablation", "mask_ablation"), ("pretrain-fusion", "pretrain_fusion_grid")):
        print(f"== {name}", flush=True)
        code = cli.main(["ablate", "--data", str(data), "--preset", preset, "--workers", str(args.workers),
                         "--out", str(args.out / name), *overrides])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
