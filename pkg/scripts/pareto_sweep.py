"""Train on a TP dataset, then tabulate time and energy per token against TP degree."""

import argparse
import logging

from energytree.config import ParallelismConfig, load_config_file
from energytree.evaluation import pareto_table, pareto_tsv
from energytree.predictor import fit_predictor
from energytree.simulator import SimParams, gen_dataset, make_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--degrees", default="1,2,4")
    ap.add_argument("--runs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    # ablated runs clamp many negative comm leaves; one line per batch is noise here
    logging.basicConfig(level=logging.ERROR)

    degrees = [int(d) for d in args.degrees.split(",")]
    archs, _, works = load_config_file(args.config)
    sim = SimParams(seed=args.seed)
    pars = [ParallelismConfig("TensorParallel", d) for d in degrees]
    ds = gen_dataset(make_grid(archs, pars, works, skip_invalid=True), args.runs, sim,
                     workers=4)
    params = fit_predictor(ds)
    for work in works:
        print(f"# workload batch={work.batch_size} in={work.seq_in} out={work.seq_out}")
        print(pareto_tsv(pareto_table(params, archs, degrees, work, sim, seed=args.seed)),
              end="")


if __name__ == "__main__":
    main()
