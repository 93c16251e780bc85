"""Metrics and evaluation protocols: MAPE, splits, protocol runs, Pareto rows, Spearman."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import __version__
from .baselines import fit_proxy_records, fit_token_model, predict_proxy
from .config import ModelArch, ParallelismConfig, Strategy, WorkloadConfig, check
from .errors import DataError, UsageError
from .features import FEATURE_NAMES, feature_matrix
from .predictor import (ComposerHyper, PredictorParams, build_batches, fit_predictor,
                        params_hash, predict, predict_batch, subset_batches)
from .simulator import SimParams, cell_seed_sequence, simulate_run
from .tree import COMPUTE_KINDS, ModuleKind

PREDICTOR_SPECS = ("piep", "piep_no_wait", "piep_no_comm", "piep_no_structure",
                   "token_regression", "proxy", "oracle")
SPEC_ALIASES = {"comm_blind": "piep_no_comm", "token": "token_regression"}
GROUP_KEYS = ("variant", "batch_size", "family")
REPORT_SCHEMA_VERSION = 1


def mape(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise DataError("predictions and truths must be non-empty and equal length")
    if (t <= 0).any():
        raise DataError(f"truth at index {int(np.flatnonzero(t <= 0)[0])} is not > 0")
    return float(100.0 * np.mean(np.abs(p - t) / t))


def percentage_errors(predictions, truths) -> np.ndarray:
    t = np.asarray(truths, dtype=float)
    return 100.0 * np.abs(np.asarray(predictions, dtype=float) - t) / t


def standard_error(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))


# -- splits ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    label: str
    train: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    scheme: str
    seed: int
    folds: tuple[Fold, ...]

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "seed": self.seed,
                "folds": [{"label": f.label, "train": list(f.train), "test": list(f.test)}
                          for f in self.folds]}

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()[:16]


def group_value(record, key: str):
    if key == "variant":
        return record.arch.variant_name
    if key == "family":
        return record.arch.family_name
    if key == "batch_size":
        return record.work.batch_size
    raise UsageError(f"unknown group key {key!r}; expected one of {', '.join(GROUP_KEYS)}")


def parse_scheme(scheme: str) -> tuple[str, str | int]:
    """``kfold:K`` or ``holdout:KEY``."""
    kind, _, arg = scheme.partition(":")
    if kind == "kfold":
        try:
            k = int(arg)
        except ValueError:
            raise UsageError(f"bad fold count in scheme {scheme!r}") from None
        if k < 2:
            raise UsageError("kfold needs k >= 2")
        return kind, k
    if kind == "holdout":
        if arg not in GROUP_KEYS:
            raise UsageError(f"unknown group key {arg!r}; expected one of "
                             f"{', '.join(GROUP_KEYS)}")
        return kind, arg
    raise UsageError(f"unknown scheme {scheme!r}; use kfold:K or holdout:KEY")


def make_splits(dataset, scheme: str, seed: int = 0) -> SplitPlan:
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    n = len(records)
    if n == 0:
        raise DataError("dataset is empty")
    kind, arg = parse_scheme(scheme)
    folds = []
    if kind == "kfold":
        if arg > n:
            raise DataError(f"k={arg} exceeds dataset size {n}")
        perm = np.random.default_rng(seed).permutation(n)
        for i, part in enumerate(np.array_split(perm, arg)):
            test = np.sort(part)
            train = np.setdiff1d(np.arange(n), test)
            folds.append(Fold(f"fold{i}", tuple(train.tolist()), tuple(test.tolist())))
    else:
        values = [group_value(r, arg) for r in records]
        for v in sorted(set(values), key=lambda x: (str(type(x)), x)):
            test = [i for i, x in enumerate(values) if x == v]
            train = [i for i, x in enumerate(values) if x != v]
            folds.append(Fold(f"{arg}={v}", tuple(train), tuple(test)))
    return SplitPlan(scheme, seed, tuple(folds))


# -- protocol -----------------------------------------------------------------------------

def canonical_spec(spec: str) -> str:
    spec = SPEC_ALIASES.get(spec, spec)
    if spec not in PREDICTOR_SPECS:
        raise UsageError(f"unknown predictor spec {spec!r}")
    return spec


@dataclass
class EvalReport:
    spec: str
    scheme: str
    mape: float
    stderr: float
    n: int
    per_fold: list = field(default_factory=list)
    per_variant: dict = field(default_factory=dict)
    per_module: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "tool_version": __version__,
                "spec": self.spec, "scheme": self.scheme, "n": self.n,
                "mape": self.mape, "stderr": self.stderr, "per_fold": self.per_fold,
                "per_variant": self.per_variant, "per_module": self.per_module,
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("spec\tscheme\tlevel\tkey\tmape\tstderr\tn\n")
        buf.write(f"{self.spec}\t{self.scheme}\tmodel\tall\t{self.mape!r}\t"
                  f"{self.stderr!r}\t{self.n}\n")
        for f in self.per_fold:
            buf.write(f"{self.spec}\t{self.scheme}\tfold\t{f['label']}\t{f['mape']!r}\t"
                      f"{f['stderr']!r}\t{f['n']}\n")
        for k, v in sorted(self.per_variant.items()):
            buf.write(f"{self.spec}\t{self.scheme}\tvariant\t{k}\t{v['mape']!r}\t"
                      f"{v['stderr']!r}\t{v['n']}\n")
        for k, v in sorted(self.per_module.items()):
            buf.write(f"{self.spec}\t{self.scheme}\tmodule\t{k}\t{v['mape']!r}\t"
                      f"{v['stderr']!r}\t{v['n']}\n")
        return buf.getvalue()


_PIEP_ABLATION = {"piep": (), "piep_no_wait": ("no_wait",), "piep_no_comm": ("no_comm",),
                  "piep_no_structure": ("no_structure",)}


class _FoldPredictor:
    """Fits what a spec needs on one fold's training set, once per fold."""

    def __init__(self, records, batches, fold: Fold, hyper, ridge_lambda):
        self.records = records
        self.fold = fold
        self.train_b = subset_batches(batches, fold.train)
        self.test_b = subset_batches(batches, fold.test)
        self.hyper = hyper
        self.ridge_lambda = ridge_lambda
        self._piep: dict = {}
        self.hashes: dict = {}

    def piep(self, structure: bool) -> PredictorParams:
        if structure not in self._piep:
            abl = () if structure else ("no_structure",)
            p = fit_predictor(self.train_b, self.ridge_lambda, self.hyper, abl)
            self._piep[structure] = p
        return self._piep[structure]

    def run(self, spec: str):
        """Root predictions for the test records, plus per-node predictions for trees."""
        recs = self.records
        test = list(self.fold.test)
        train = [recs[i] for i in self.fold.train]
        if spec == "oracle":
            return np.array([recs[i].model_total_energy for i in test]), None, "oracle"
        if spec == "token_regression":
            m = fit_token_model(train)
            return np.array([m.predict_record(recs[i]) for i in test]), None, "token"
        if spec == "proxy":
            m = fit_proxy_records(train)
            return predict_proxy(m, [recs[i] for i in test]), None, "proxy"
        abl = _PIEP_ABLATION[spec]
        params = self.piep("no_structure" not in abl)
        pos = {i: k for k, i in enumerate(test)}
        root = np.empty(len(test))
        nodes = []
        for batch in self.test_b:
            energy = predict_batch(batch, params, ablations=frozenset(abl))
            root[[pos[int(i)] for i in batch.index]] = energy[:, 0]
            nodes.append((batch, energy))
        return root, nodes, params_hash(params)


def _module_errors(records, nodes, kinds) -> dict:
    """Per-kind errors: instances averaged within a record, then errors averaged
    within each variant, then across variants."""
    by_kind: dict = {k.value: {} for k in kinds}
    for batch, energy in nodes:
        variant = batch.tree.arch.variant_name
        for k in kinds:
            cols = [i for i, kk in enumerate(batch.kinds) if kk is k]
            if not cols:
                continue
            pred = energy[:, cols].mean(axis=1)
            true = batch.truths[:, cols].mean(axis=1)
            ok = true > 0
            by_kind[k.value].setdefault(variant, []).extend(
                percentage_errors(pred[ok], true[ok]).tolist())
    out = {}
    for k, per_var in by_kind.items():
        if not per_var:
            continue
        means = [float(np.mean(v)) for _, v in sorted(per_var.items())]
        allv = [e for _, v in sorted(per_var.items()) for e in v]
        out[k] = {"mape": float(np.mean(means)), "stderr": standard_error(allv),
                  "n": len(allv)}
    return out


_MODULE_KINDS = COMPUTE_KINDS + (ModuleKind.ALL_REDUCE, ModuleKind.P2P_TRANSFER,
                                 ModuleKind.BATCH_OUTPUT_ALL_GATHER,
                                 ModuleKind.TRANSFORMER_BLOCK, ModuleKind.STAGE)


def run_protocols(dataset, plan: SplitPlan, specs: Sequence[str],
                  hyper: ComposerHyper = ComposerHyper(), ridge_lambda: float = 1e-3,
                  dataset_hash: str | None = None) -> dict[str, EvalReport]:
    """Evaluate several predictor specs on identical splits, sharing fitted models."""
    specs = [canonical_spec(s) for s in specs]
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    batches = build_batches(records)
    fold_runs = [_FoldPredictor(records, batches, f, hyper, ridge_lambda) for f in plan.folds]
    reports = {}
    for spec in specs:
        errs_all, per_fold, hashes = [], [], []
        variant_errs: dict = {}
        module_nodes = []
        for fp in fold_runs:
            test = list(fp.fold.test)
            truth = np.array([records[i].model_total_energy for i in test])
            try:
                pred, nodes, h = fp.run(spec)
            except DataError as exc:
                raise DataError(f"{spec}, {fp.fold.label}: {exc}") from None
            if not np.isfinite(pred).all():
                bad = test[int(np.flatnonzero(~np.isfinite(pred))[0])]
                raise DataError(f"{spec}, {fp.fold.label}: non-finite prediction for "
                                f"record {bad}")
            e = percentage_errors(pred, truth)
            errs_all.extend(e.tolist())
            per_fold.append({"label": fp.fold.label, "mape": float(e.mean()),
                             "stderr": standard_error(e), "n": len(e)})
            for i, err in zip(test, e):
                variant_errs.setdefault(records[i].arch.variant_name, []).append(float(err))
            hashes.append(h)
            if nodes is not None:
                module_nodes.extend(nodes)
        per_variant = {v: {"mape": float(np.mean(x)), "stderr": standard_error(x),
                           "n": len(x)} for v, x in sorted(variant_errs.items())}
        per_module = _module_errors(records, module_nodes, _MODULE_KINDS) if module_nodes else {}
        meta = {"split_plan": plan.digest, "seed": plan.seed, "params_hashes": hashes,
                "dataset_hash": dataset_hash, "ridge_lambda": ridge_lambda,
                "composer": {"optimizer": hyper.optimizer, "learning_rate": hyper.learning_rate,
                             "epochs": hyper.epochs, "weight_decay": hyper.weight_decay,
                             "tau": hyper.tau, "objective": hyper.objective}}
        reports[spec] = EvalReport(spec, plan.scheme, float(np.mean(errs_all)),
                                   standard_error(errs_all), len(errs_all), per_fold,
                                   per_variant, per_module, meta)
    return reports


def run_protocol(dataset, plan: SplitPlan, spec: str, **kw) -> EvalReport:
    return run_protocols(dataset, plan, [spec], **kw)[canonical_spec(spec)]


# -- Pareto table ----------------------------------------------------------------------

@dataclass(frozen=True)
class ParetoRow:
    arch: str
    degree: int
    time_per_token: float
    energy_per_token: float


def pareto_table(params: PredictorParams | None, archs: Sequence[ModelArch],
                 degrees: Sequence[int], work: WorkloadConfig,
                 sim_params: SimParams = SimParams(), strategy=Strategy.TENSOR,
                 runs: int = 5, seed: int = 0) -> list[ParetoRow]:
    """Predicted energy and simulated time per generated token (batch_size * seq_out)."""
    if params is None:
        raise DataError("pareto table needs a trained predictor")
    tokens = work.batch_size * work.seq_out
    rows = []
    for arch in sorted(archs, key=lambda a: a.variant_name):
        for d in sorted(degrees):
            par = ParallelismConfig(strategy, d)
            check(arch, par, work)
            ss = cell_seed_sequence(seed, (arch, par, work))
            walls, energies = [], []
            for child in ss.spawn(runs):
                rec = simulate_run(arch, par, work, sim_params,
                                   np.random.Generator(np.random.PCG64(child)))
                walls.append(rec.wall_time)
                energies.append(predict(rec.tree, rec.features, params)["root"])
            rows.append(ParetoRow(arch.variant_name, d, float(np.mean(walls)) / tokens,
                                  float(np.mean(energies)) / tokens))
    return rows


def pareto_tsv(rows: Sequence[ParetoRow]) -> str:
    lines = ["arch\tdegree\ttime_per_token_s\tenergy_per_token_wh"]
    lines += [f"{r.arch}\t{r.degree}\t{r.time_per_token!r}\t{r.energy_per_token!r}"
              for r in rows]
    return "\n".join(lines) + "\n"


# -- Spearman ------------------------------------------------------------------------------

def spearman_rho(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN when either side is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise DataError("spearman needs two equal-length vectors of at least 3 values")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def record_feature_row(record) -> np.ndarray:
    """Run-level features as seen at the root node."""
    return feature_matrix(record.tree, record.features)[0]


def spearman(dataset, feature_names: Sequence[str] | None = None,
             target=None) -> tuple[dict[str, float], list[str]]:
    """Correlation of each feature with ``target`` (default: model total energy).

    Returns the map of defined correlations and the names left out because
    the feature is constant.
    """
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    names = list(FEATURE_NAMES if feature_names is None else feature_names)
    unknown = [n for n in names if n not in FEATURE_NAMES]
    if unknown:
        raise DataError(f"unknown feature {unknown[0]!r}")
    if len(records) < 3:
        raise DataError("spearman needs at least 3 records")
    X = np.stack([record_feature_row(r) for r in records])
    y = (np.array([r.model_total_energy for r in records]) if target is None
         else np.asarray(target, dtype=float))
    out, undefined = {}, []
    for n in names:
        rho = spearman_rho(X[:, FEATURE_NAMES.index(n)], y)
        if np.isnan(rho):
            undefined.append(n)
        else:
            out[n] = rho
    return out, undefined
