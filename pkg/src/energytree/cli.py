"""``energytree`` command line.

Subcommands: tree, gen-profile, train, predict, evaluate, pareto, correlate.
Failures print one line ``error[<class>]: <message>`` to stderr and exit with
the class's code (usage 2, parse 3, validation 4, data 5, numeric 6).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from . import __version__
from .baselines import dumps_baseline, fit_proxy_records, fit_token_model
from .config import Strategy, load_config_file
from .errors import DataError, EnergyTreeError, ParseError, UsageError, ValidationError
from .evaluation import (canonical_spec, make_splits, pareto_table, pareto_tsv,
                         run_protocols, spearman)
from .predictor import (ABLATIONS, ComposerHyper, build_batches, dumps_params,
                        fit_predictor, load_params, predict_batch)
from .simulator import (SimParams, cell_seed_sequence, dumps_dataset, gen_dataset,
                        load_dataset, make_grid, simulate_run)
from .tree import build_tree, tree_to_json, tree_to_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def provenance(args, *paths) -> dict:
    """Tool version and content hashes of the inputs (keyed by file name)."""
    inputs = {}
    for p in paths:
        if p:
            inputs[os.path.basename(p)] = file_digest(p)
    return {"tool_version": __version__, "seed": getattr(args, "seed", None),
            "inputs": inputs}


def _write(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command} requires --{n.replace('_', '-')}")


def _sim_params(args) -> SimParams:
    params = SimParams()
    if args.sim_params:
        with open(args.sim_params, encoding="utf-8") as fh:
            try:
                d = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ParseError(f"{args.sim_params}: {exc}") from None
        if not isinstance(d, dict):
            raise ParseError(f"{args.sim_params}: expected a mapping")
        params = SimParams.from_dict({**params.to_dict(), **d})
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    bad = params.validate()
    if bad:
        raise ValidationError(bad)
    return params


def _ablations(args) -> tuple[str, ...]:
    flags = tuple(a for spec in (args.ablate or []) for a in spec.split(",") if a)
    for a in flags:
        if a not in ABLATIONS:
            raise UsageError(f"unknown ablation {a!r}; choose from {', '.join(ABLATIONS)}")
    return flags


def _hyper(args) -> ComposerHyper:
    return ComposerHyper(learning_rate=args.lr, epochs=args.epochs, tau=args.tau,
                         seed=args.seed or 0, objective=args.objective,
                         optimizer=args.optimizer, weight_decay=args.weight_decay)


# -- subcommands --------------------------------------------------------------------

def cmd_tree(args) -> None:
    _need(args, "config")
    archs, pars, _ = load_config_file(args.config)
    if args.format == "json":
        docs = [json.loads(tree_to_json(build_tree(a, p))) for a in archs for p in pars]
        _write(args.out, json.dumps({"provenance": provenance(args, args.config),
                                     "trees": docs}, indent=1) + "\n")
    else:
        head = f"# energytree {__version__} config sha256={file_digest(args.config)}\n"
        _write(args.out, head + "".join(tree_to_text(build_tree(a, p))
                                        for a in archs for p in pars))


def cmd_gen_profile(args) -> None:
    _need(args, "config", "out")
    archs, pars, works = load_config_file(args.config)
    params = _sim_params(args)
    grid = make_grid(archs, pars, works, skip_invalid=args.skip_invalid)
    ds = gen_dataset(grid, args.runs, params, workers=args.workers)
    _write(args.out, dumps_dataset(ds, {"provenance": provenance(args, args.config,
                                                                 args.sim_params)}))


def cmd_train(args) -> None:
    _need(args, "dataset", "out")
    ds = load_dataset(args.dataset)
    prov = provenance(args, args.dataset)
    spec = args.predictor
    if spec in ("piep", "comm_blind"):
        abl = _ablations(args) + (("no_comm",) if spec == "comm_blind" else ())
        params = fit_predictor(build_batches(ds.records), args.ridge, _hyper(args), abl)
        _write(args.out, dumps_params(params, prov))
    elif spec == "token":
        _write(args.out, dumps_baseline(fit_token_model(ds.records), prov))
    elif spec == "proxy":
        _write(args.out, dumps_baseline(fit_proxy_records(ds.records), prov))
    else:
        raise UsageError(f"unknown predictor {spec!r}")


def cmd_predict(args) -> None:
    """Per-node energies for the dataset's records, or for simulated runs of the configs."""
    _need(args, "model")
    if (args.dataset is None) == (args.config is None):
        raise UsageError("predict needs exactly one of --dataset or --config")
    params = load_params(args.model)
    abl = params.ablations | frozenset(_ablations(args))
    if args.dataset:
        records = load_dataset(args.dataset).records
    else:
        archs, pars, works = load_config_file(args.config)
        sim = _sim_params(args)
        records = []
        for cell in make_grid(archs, pars, works):
            rng = np.random.Generator(np.random.PCG64(cell_seed_sequence(sim.seed, cell)))
            records.append(simulate_run(*cell, sim, rng))
    rows = [None] * len(records)
    for batch in build_batches(records, with_truth=False):
        energy = predict_batch(batch, params, abl)
        for k, i in enumerate(batch.index):
            r = records[i]
            rows[i] = {"arch": r.arch.variant_name, "parallelism": r.par.to_dict(),
                       "workload": r.work.to_dict(), "run": r.run,
                       "root": float(energy[k, 0]),
                       "nodes": dict(zip(batch.node_ids, map(float, energy[k])))}
    doc = {"provenance": provenance(args, args.model, args.dataset, args.config),
           "ablations": sorted(abl), "predictions": rows}
    _write(args.out, json.dumps(doc, indent=1) + "\n")


def cmd_evaluate(args) -> None:
    _need(args, "dataset", "out")
    ds = load_dataset(args.dataset)
    plan = make_splits(ds, args.scheme, seed=args.seed or 0)
    specs = [canonical_spec(s) for s in args.predictor.split(",")]
    abl = _ablations(args)
    if abl:
        extra = {"no_wait": "piep_no_wait", "no_comm": "piep_no_comm",
                 "no_structure": "piep_no_structure"}
        specs += [extra[a] for a in abl if extra[a] not in specs]
    reports = run_protocols(ds, plan, specs, _hyper(args), args.ridge,
                            dataset_hash=file_digest(args.dataset))
    doc = {"provenance": provenance(args, args.dataset), "scheme": args.scheme,
           "reports": {k: r.to_dict() for k, r in reports.items()}}
    _write(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if args.table:
        head = f"# energytree {__version__} dataset sha256={file_digest(args.dataset)}\n"
        body = "".join(r.to_tsv() if i == 0 else r.to_tsv().split("\n", 1)[1]
                       for i, r in enumerate(reports.values()))
        _write(args.table, head + body)


def cmd_pareto(args) -> None:
    _need(args, "model", "config")
    params = load_params(args.model)
    archs, pars, works = load_config_file(args.config)
    if not works:
        raise DataError("pareto needs at least one workload in the config")
    strategy = Strategy(args.strategy)
    degrees = sorted({p.degree for p in pars if p.strategy is strategy})
    rows = pareto_table(params, archs, degrees, works[0], _sim_params(args), strategy,
                        runs=args.runs, seed=args.seed or 0)
    head = (f"# energytree {__version__} model sha256={file_digest(args.model)} "
            f"config sha256={file_digest(args.config)}\n")
    _write(args.out, head + pareto_tsv(rows))


def cmd_correlate(args) -> None:
    _need(args, "dataset")
    ds = load_dataset(args.dataset)
    names = args.features.split(",") if args.features else None
    rho, undefined = spearman(ds, names)
    doc = {"provenance": provenance(args, args.dataset), "target": "model_total_energy",
           "spearman": rho, "undefined": undefined}
    _write(args.out, json.dumps(doc, indent=1) + "\n")


COMMANDS = {"tree": cmd_tree, "gen-profile": cmd_gen_profile, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "pareto": cmd_pareto,
            "correlate": cmd_correlate}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="energytree", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"energytree {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--dataset")
        p.add_argument("--model")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--sim-params", dest="sim_params")
        p.add_argument("--ablate", action="append")
        if name == "tree":
            p.add_argument("--format", choices=("text", "json"), default="text")
        if name == "gen-profile":
            p.add_argument("--runs", type=int, default=50)
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--skip-invalid", action="store_true")
        if name in ("train", "evaluate"):
            p.add_argument("--predictor", default="piep")
            p.add_argument("--ridge", type=float, default=1e-3)
            p.add_argument("--lr", type=float, default=ComposerHyper.learning_rate)
            p.add_argument("--epochs", type=int, default=ComposerHyper.epochs)
            p.add_argument("--tau", type=float, default=ComposerHyper.tau)
            p.add_argument("--objective", choices=("all_nodes", "root"),
                           default="all_nodes")
            p.add_argument("--optimizer", choices=("lbfgs", "gd"), default="lbfgs")
            p.add_argument("--weight-decay", dest="weight_decay", type=float,
                           default=ComposerHyper.weight_decay)
        if name == "evaluate":
            p.add_argument("--scheme", default="kfold:3")
            p.add_argument("--table")
        if name == "pareto":
            p.add_argument("--strategy", default=Strategy.TENSOR.value,
                           choices=[s.value for s in Strategy])
            p.add_argument("--runs", type=int, default=5)
        if name == "correlate":
            p.add_argument("--features")
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose from {', '.join(COMMANDS)}")
        COMMANDS[args.command](args)
    except EnergyTreeError as exc:
        msg = " ".join(str(exc).split())
        print(f"error[{exc.error_class}]: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[data]: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return DataError.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
