#!/usr/bin/env python3
"""Warm-start value of contrastive pretraining.

For each seed: pretrain an encoder at the given augmentation level, then
finetune once from that encoder and once from scratch with an identical
decoder init.  Prints validation MAE trajectories and the epoch at which
the warm run first matches the scratch run's best MAE.
"""

import argparse
import sys
from pathlib import Path

from stormmeta import experiments as ex


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/pretrain_handoff")
    ap.add_argument("--archive", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--events", type=int, default=280)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--aug-level", type=int, default=3)
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    ap.add_argument("--finetune-epochs", type=int, default=3)
    ap.add_argument("--base-width", type=int, default=16)
    args = ap.parse_args(argv)

    work = Path(args.work)
    archive = Path(args.archive) if args.archive else ex.build_benchmark(
        work / "bench", n_events=args.events, resolution=args.resolution
    )
    results = ex.pretrain_handoff(
        archive, work, seeds=args.seeds, aug_level=args.aug_level,
        pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs,
        base_width=args.base_width,
    )
    for scratch, warm in zip(results["scratch"], results["warm"]):
        track = lambda a: " ".join(f"{r['val_mae']:.3f}" for r in a.history if "val_mae" in r)
        print(f"seed {scratch.seed} scratch val MAE: {track(scratch)}")
        print(f"seed {warm.seed} warm    val MAE: {track(warm)}")
        target = scratch.best_val_mae
        hit = warm.first_epoch_at_or_below(target)
        print(f"seed {scratch.seed}: scratch best {target:.4f}; warm reaches it at epoch {hit}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
