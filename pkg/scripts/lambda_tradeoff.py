#!/usr/bin/env python3
"""Reconstruction-weight sweep for the adversarial translator.

Runs joint-adversarial training at each lambda over the given seeds and
prints test-split POD and SUCR at the 74 threshold; the expected trend is
lower POD and higher SUCR as lambda grows.
"""

import argparse
import sys
from pathlib import Path

from stormmeta import experiments as ex


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/lambda_tradeoff")
    ap.add_argument("--archive", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[1e2, 1e4])
    ap.add_argument("--events", type=int, default=280)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--base-width", type=int, default=16)
    args = ap.parse_args(argv)

    work = Path(args.work)
    archive = Path(args.archive) if args.archive else ex.build_benchmark(
        work / "bench", n_events=args.events, resolution=args.resolution
    )
    results = ex.lambda_tradeoff(
        archive, work, seeds=args.seeds, lambdas=args.lambdas,
        epochs=args.epochs, base_width=args.base_width,
    )
    for lam, arms in results.items():
        pods, sucrs = [], []
        for arm in arms:
            if arm.error:
                print(f"lambda {lam:g} seed {arm.seed}: numeric guard tripped ({arm.error})")
                continue
            pod, sucr = arm.skill.get("POD74"), arm.skill.get("SUCR74")
            print(f"lambda {lam:g} seed {arm.seed}: POD74={pod} SUCR74={sucr}")
            if isinstance(pod, float):
                pods.append(pod)
            if isinstance(sucr, float):
                sucrs.append(sucr)
        if pods and sucrs:
            print(f"lambda {lam:g} mean: POD74={ex.mean(pods):.4f} SUCR74={ex.mean(sucrs):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
