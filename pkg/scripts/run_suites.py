"""Run experiment suites over several seeds and summarize the headline metric.

One CSV per (suite, task, seed) lands in --out; the printed table holds the
seed mean of top-1 (recognition) or text-to-video R@1 (retrieval).

    python3 scripts/run_suites.py --suite ablation --task recognition retrieval
    python3 scripts/run_suites.py --suite level_sweep --depth 12 --seeds 0 1 2
"""

import argparse
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from stan.config import RunConfig
from stan.harness import EXPERIMENT_METRIC, SUITES, emit_report, run_experiment_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", choices=SUITES, required=True)
    ap.add_argument("--task", nargs="+", default=["recognition"], choices=["recognition", "retrieval"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--depth", type=int, default=None, help="backbone depth; levels end at the last layer")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default="results")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for task in args.task:
        scores = defaultdict(list)
        for seed in args.seeds:
            base = RunConfig(task=task, seed=seed)
            if args.depth:
                base = base.replace(depth=args.depth, level_range_end=args.depth)
            if args.epochs:
                base = base.replace(epochs=args.epochs)
            rows = run_experiment_suite(base, args.suite, timing=False)
            emit_report(rows, out / f"{args.suite}_{task}_seed{seed}.csv")
            for row in rows:
                scores[row.variant].append(row.metrics[EXPERIMENT_METRIC[task]])
        print(f"{args.suite} / {task} / {EXPERIMENT_METRIC[task]} (seeds {args.seeds})")
        for variant, values in scores.items():
            per_seed = " ".join(f"{v:6.2f}" for v in values)
            print(f"  {variant:22s} mean {np.mean(values):6.2f}   [{per_seed}]")


if __name__ == "__main__":
    main()
