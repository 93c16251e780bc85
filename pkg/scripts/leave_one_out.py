"""Leave-one-group-out tables: hold out one variant, batch size or family at a time."""

import argparse
import logging

from energytree.errors import DataError
from energytree.evaluation import GROUP_KEYS, make_splits, run_protocol
from energytree.simulator import load_dataset

SPECS = ["piep", "piep_no_comm", "token_regression", "proxy"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("dataset", help="dataset document from `energytree gen-profile`")
    ap.add_argument("--keys", default=",".join(GROUP_KEYS))
    args = ap.parse_args()

    logging.basicConfig(level=logging.ERROR)
    ds = load_dataset(args.dataset)
    print("key\theld_out\t" + "\t".join(SPECS))
    for key in args.keys.split(","):
        plan = make_splits(ds, f"holdout:{key}")
        cols = []
        for spec in SPECS:
            try:
                cols.append([f"{f['mape']:.2f}" for f in run_protocol(ds, plan, spec).per_fold])
            except DataError:
                # e.g. a batch-size holdout leaving too few token pairs to fit
                cols.append(["n/a"] * len(plan.folds))
        for i, fold in enumerate(plan.folds):
            cells = [c[i] for c in cols]
            print(f"{key}\t{fold.label.split('=', 1)[1]}\t" + "\t".join(cells))


if __name__ == "__main__":
    main()
