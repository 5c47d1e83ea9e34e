#!/usr/bin/env python3
"""Sweep the upload-noise variance and report the accuracy cost.

Gaussian noise is added to uploaded ID-row deltas and accumulated fusion
gradients before aggregation. variance=0 is the clean baseline.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedmr.config import NoiseConfig
from fedmr.federation import Trainer
from run_synth_demo import build


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=15)
    ap.add_argument("--variances", type=float, nargs="+",
                    default=[0.0, 0.01, 0.1, 0.5])
    args = ap.parse_args()

    t0 = time.perf_counter()
    baseline = None
    print("variance   HR@10    NDCG@10  drop")
    for var in args.variances:
        cfg, data = build(args.seed, args.rounds)
        if var > 0.0:
            cfg = cfg.replace(noise=NoiseConfig(enabled=True, variance=var,
                                                seed=args.seed))
        trainer = Trainer(cfg, data)
        trainer.run()
        m = trainer.test_metrics[10]
        if baseline is None:
            baseline = m["hr"]
        drop = baseline - m["hr"]
        print(f"{var:8.3f}   {m['hr']:.4f}   {m['ndcg']:.4f}   {drop:+.4f}")
    print(f"({time.perf_counter() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
