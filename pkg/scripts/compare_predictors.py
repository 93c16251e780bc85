"""Held-out MAPE of every predictor under TP, PP and DP on the desk presets.

    python scripts/compare_predictors.py --runs 50 --out results/compare.tsv
"""

import argparse
import logging
import time

from energytree.config import ParallelismConfig, load_config_file
from energytree.evaluation import make_splits, run_protocols
from energytree.simulator import SimParams, gen_dataset, make_grid

SPECS = ["piep", "piep_no_wait", "piep_no_comm", "piep_no_structure", "token_regression",
         "proxy"]
DEGREES = {"TensorParallel": (1, 2, 4), "PipelineParallel": (2, 4), "DataParallel": (2, 4)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--scheme", default="kfold:3")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out")
    args = ap.parse_args()
    # ablated runs clamp many negative comm leaves; one line per batch is noise here
    logging.basicConfig(level=logging.ERROR)

    archs, _, works = load_config_file(args.config)
    lines = ["strategy\tcomm_share\t" + "\t".join(SPECS)]
    for strategy, degrees in DEGREES.items():
        t0 = time.perf_counter()
        pars = [ParallelismConfig(strategy, d) for d in degrees]
        ds = gen_dataset(make_grid(archs, pars, works, skip_invalid=True), args.runs,
                         SimParams(seed=args.seed), workers=args.workers)
        reps = run_protocols(ds, make_splits(ds, args.scheme, args.seed), SPECS)
        row = [strategy, f"{ds.comm_share():.3f}"] + [f"{reps[s].mape:.2f}" for s in SPECS]
        lines.append("\t".join(row))
        print("\t".join(row), f"({time.perf_counter() - t0:.1f}s)", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
