"""Train the mean-pool baseline and both branch variants on the recognition task.

Prints overall and reverse-pair accuracy plus wall time per model.

    python3 scripts/order_discrimination.py --seed 0
"""

import argparse
import logging
import time

from stan.config import RunConfig
from stan.harness import run_single

MODELS = {
    "baseline": dict(use_cross_frame=False, use_intra_frame=False, use_branch=False, use_multilevel=False),
    "self": {},
    "conv": dict(cross_frame_variant="conv3d"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=RunConfig().epochs)
    ap.add_argument("--models", nargs="+", default=list(MODELS), choices=list(MODELS))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    total = 0.0
    print(f"{'model':10s} {'top1':>7s} {'pair':>7s} {'secs':>7s}")
    for name in args.models:
        run = RunConfig(seed=args.seed, epochs=args.epochs).replace(**MODELS[name])
        start = time.perf_counter()
        _, report = run_single(run)
        secs = time.perf_counter() - start
        total += secs
        print(f"{name:10s} {report.top1:7.2f} {report.extra['pair_top1']:7.2f} {secs:7.1f}")
    print(f"total {total:.1f}s")


if __name__ == "__main__":
    main()
