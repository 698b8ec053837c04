"""Pretrained vs from-scratch vs concat-fusion one-shot accuracy over several seeds.

    python scripts/compare_arms.py --seeds 0 1 2 --set finetune.lr=0.02
"""

from __future__ import annotations

import argparse
import time

from mumae.config import RunConfig
from mumae.pipeline import eval_stage, finetune_stage, pretrain_stage, synthetic_split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    print(f"{'seed':>4}  {'pretrained':>10}  {'scratch':>8}  {'no-cross':>8}  {'pretrain loss':>17}  {'min':>5}")
    for seed in args.seeds:
        cfg = RunConfig().with_overrides(dict(kv.split("=", 1) for kv in args.set))
        cfg.seed = seed
        start = time.perf_counter()
        train, test, _ = synthetic_split(cfg)
        pre, curve = pretrain_stage(cfg, train)
        arms = {}
        for name, scratch, mode in (("pretrained", False, "cross"), ("scratch", True, "cross"),
                                    ("no-cross", False, "concat")):
            arm = cfg.copy()
            arm.finetune.from_scratch = scratch
            arm.fusion.mode = mode
            params, _ = finetune_stage(arm, train, None if scratch else pre)
            arms[name] = eval_stage(arm, test, params).mean
        minutes = (time.perf_counter() - start) / 60
        print(f"{seed:>4}  {arms['pretrained']:>10.3f}  {arms['scratch']:>8.3f}  {arms['no-cross']:>8.3f}  "
              f"{curve[0]:>7.4f} -> {curve[-1]:.4f}  {minutes:>5.1f}", flush=True)


if __name__ == "__main__":
    main()
