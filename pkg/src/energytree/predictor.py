"""Hierarchical energy predictor.

Leaves are predicted by one ridge regressor per module kind. An interior
node's energy is the sum of its children's energies, each child scaled by
``1 + tanh(weights @ z + bias) / tau`` where ``z`` is the child's standardized
feature vector. Scales therefore stay inside (1 - 1/tau, 1 + 1/tau).

Records sharing an (arch, parallelism, workload) cell share a tree and are
evaluated together as a ``TreeBatch``; that keeps training vectorized.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

from . import __version__
from .errors import DataError, NumericError, ParseError
from .features import (FEATURE_NAMES, FEATURE_SCHEMA_VERSION, N_FEATURES, STRUCTURE_IDX,
                       WAIT_IDX, AggregatedFeatures, Standardizer, feature_tensor)
from .tree import LEAF_KINDS, ModelTree, ModuleKind

log = logging.getLogger(__name__)

PARAMS_SCHEMA_VERSION = 1
ABLATIONS = ("no_wait", "no_comm", "no_structure")


@dataclass(frozen=True)
class LeafRegressor:
    module_kind: ModuleKind
    weights: np.ndarray
    bias: float
    standardizer: Standardizer

    def predict_z(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.weights + self.bias

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Weights and intercept on unstandardized features."""
        st = self.standardizer
        w = np.where(st.constant, 0.0, self.weights / st.scale)
        return w, float(self.bias - w @ st.mean)


@dataclass(frozen=True)
class ComposerParams:
    weights: np.ndarray
    bias: float
    tau: float = 2.0
    standardizer: Standardizer | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class PredictorParams:
    leaves: Mapping[ModuleKind, LeafRegressor]
    composer: ComposerParams
    ablations: frozenset = frozenset()
    feature_schema_version: int = FEATURE_SCHEMA_VERSION

    def with_ablations(self, *flags: str) -> "PredictorParams":
        bad = set(flags) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation {sorted(bad)[0]!r}")
        return replace(self, ablations=self.ablations | frozenset(flags))


# -- batches ------------------------------------------------------------------------

class TreeBatch:
    """Runs of one cell: shared tree structure, stacked features and truths."""

    def __init__(self, tree: ModelTree, aggs: Sequence[AggregatedFeatures],
                 truths: np.ndarray | None = None, index: Sequence[int] = ()):
        self.tree = tree
        nodes = tree.nodes()
        self.node_ids = [node.id for node in nodes]
        self.kinds = [node.kind for node in nodes]
        pos = {node.id: i for i, node in enumerate(nodes)}
        self.parent = np.full(len(nodes), -1)
        self.depth = np.zeros(len(nodes), dtype=int)
        for node in nodes:
            for child in node.children:
                self.parent[pos[child.id]] = pos[node.id]
                self.depth[pos[child.id]] = self.depth[pos[node.id]] + 1
        self.is_leaf = np.array([node.is_leaf for node in nodes])
        self.is_comm = np.array([node.is_comm for node in nodes])
        self.X = feature_tensor(tree, aggs)
        self.truths = truths
        self.index = np.asarray(index, dtype=int)
        # one-hot parent maps per depth, deepest first
        self.levels = []
        for d in range(int(self.depth.max()), 0, -1):
            idx = np.flatnonzero(self.depth == d)
            M = np.zeros((len(idx), len(nodes)))
            M[np.arange(len(idx)), self.parent[idx]] = 1.0
            self.levels.append((idx, M))

    def __len__(self):
        return self.X.shape[0]

    def subset(self, rows) -> "TreeBatch":
        out = object.__new__(TreeBatch)
        out.__dict__.update(self.__dict__)
        rows = np.asarray(rows, dtype=int)
        out.X = self.X[rows]
        out.truths = None if self.truths is None else self.truths[rows]
        out.index = self.index[rows]
        return out

    def masked_X(self, ablations: Iterable[str]) -> np.ndarray:
        if "no_wait" not in ablations or not self.is_comm.any():
            return self.X
        X = self.X.copy()
        comm = np.flatnonzero(self.is_comm)
        X[:, comm[:, None], WAIT_IDX[None, :]] = 0.0
        return X


def build_batches(records: Sequence, with_truth: bool = True) -> list[TreeBatch]:
    """Group records by cell, keeping first-appearance order."""
    groups: dict = {}
    for i, r in enumerate(records):
        groups.setdefault((r.arch, r.par, r.work), []).append(i)
    out = []
    for (arch, par, work), idx in groups.items():
        recs = [records[i] for i in idx]
        tree = recs[0].tree
        truths = None
        if with_truth:
            truths = np.array([[r.nodes[node.id].total for node in tree.root.walk()]
                               for r in recs])
        out.append(TreeBatch(tree, [r.features for r in recs], truths, idx))
    return out


def subset_batches(batches: Sequence[TreeBatch], indices) -> list[TreeBatch]:
    """Restrict batches to the given dataset indices, dropping empty ones."""
    want = set(int(i) for i in indices)
    out = []
    for batch in batches:
        rows = [k for k, i in enumerate(batch.index) if int(i) in want]
        if rows:
            out.append(batch.subset(rows))
    return out


# -- leaves ------------------------------------------------------------------------------

def _mask_structure(Z: np.ndarray, ablations) -> np.ndarray:
    if "no_structure" in ablations:
        Z = Z.copy()
        Z[..., STRUCTURE_IDX] = 0.0
    return Z


def leaf_rows(batches: Sequence[TreeBatch], kind: ModuleKind,
              ablations=()) -> tuple[np.ndarray, np.ndarray]:
    Xs, ys = [], []
    for batch in batches:
        cols = [i for i, k in enumerate(batch.kinds) if k is kind and batch.is_leaf[i]]
        if not cols:
            continue
        Xs.append(batch.masked_X(ablations)[:, cols].reshape(-1, N_FEATURES))
        if batch.truths is not None:
            ys.append(batch.truths[:, cols].reshape(-1))
    if not Xs:
        return np.zeros((0, N_FEATURES)), np.zeros(0)
    return np.concatenate(Xs), (np.concatenate(ys) if ys else np.zeros(0))


def fit_ridge(X: np.ndarray, y: np.ndarray, ridge_lambda: float, kind=None,
              ablations=()) -> LeafRegressor:
    """Ridge least squares on standardized features; constant columns get weight 0."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n < d + 1:
        raise DataError(f"{getattr(kind, 'value', kind)}: need at least {d + 1} samples, "
                        f"got {n}")
    st = Standardizer.fit(X)
    Z = _mask_structure(st.transform(X), ablations)
    active = ~st.constant
    if "no_structure" in ablations:
        active[STRUCTURE_IDX] = False
    Za = Z[:, active]
    ybar = float(y.mean())
    A = Za.T @ Za
    if ridge_lambda > 0:
        A = A + ridge_lambda * np.eye(A.shape[0])
    elif np.linalg.matrix_rank(A) < A.shape[0]:
        raise DataError(f"{getattr(kind, 'value', kind)}: singular normal equations at "
                        "ridge_lambda=0; use ridge_lambda > 0")
    w = np.zeros(d)
    w[active] = np.linalg.solve(A, Za.T @ (y - ybar))
    return LeafRegressor(kind, w, ybar, st)


def fit_leaves(data, kind: ModuleKind, ridge_lambda: float = 1e-3,
               ablations=()) -> LeafRegressor:
    """Fit the regressor for one leaf kind on a Dataset, record list or batch list."""
    batches = _as_batches(data)
    X, y = leaf_rows(batches, kind, ablations)
    return fit_ridge(X, y, ridge_lambda, kind, ablations)


def _as_batches(data) -> list[TreeBatch]:
    if hasattr(data, "records"):
        return build_batches(data.records)
    data = list(data)
    if data and isinstance(data[0], TreeBatch):
        return data
    return build_batches(data)


def leaf_predictions(batch: TreeBatch, leaves: Mapping[ModuleKind, LeafRegressor],
                     ablations=()) -> np.ndarray:
    """Per-node leaf predictions, shape (runs, nodes); interior columns are 0."""
    X = batch.masked_X(ablations)
    energy = np.zeros(X.shape[:2])
    for kind in set(k for k, leaf in zip(batch.kinds, batch.is_leaf) if leaf):
        reg = leaves.get(kind)
        if reg is None:
            raise DataError(f"no leaf regressor for module kind {kind.value}")
        cols = [i for i, k in enumerate(batch.kinds) if k is kind and batch.is_leaf[i]]
        Z = _mask_structure(reg.standardizer.transform(X[:, cols]), ablations)
        energy[:, cols] = reg.predict_z(Z)
    neg = energy < 0
    if neg.any():
        log.warning("clamped %d negative leaf predictions to 0", int(neg.sum()))
        energy[neg] = 0.0
    return energy


# -- composition ---------------------------------------------------------------------

def child_scales(comp: ComposerParams, X: np.ndarray, ablations=()) -> np.ndarray:
    """Child weights for raw feature vectors ``X[..., N_FEATURES]``."""
    Z = comp.standardizer.transform(X) if comp.standardizer is not None else np.asarray(X)
    z = _mask_structure(Z, ablations) @ comp.weights + comp.bias
    return 1.0 + np.tanh(z) / comp.tau


def compose(batch: TreeBatch, leaf_energy: np.ndarray, child_scale: np.ndarray,
            drop_comm: bool = False) -> np.ndarray:
    energy = leaf_energy.copy()
    if drop_comm:
        energy[:, batch.is_comm] = 0.0
    for idx, M in batch.levels:
        energy += (child_scale[:, idx] * energy[:, idx]) @ M
    return energy


def predict_batch(batch: TreeBatch, params: PredictorParams, ablations=None) -> np.ndarray:
    """Energy of every node for every run in the batch, shape (runs, nodes)."""
    abl = params.ablations if ablations is None else frozenset(ablations)
    if params.feature_schema_version != FEATURE_SCHEMA_VERSION:
        raise DataError(f"feature schema {params.feature_schema_version} does not match "
                        f"this build ({FEATURE_SCHEMA_VERSION})")
    leaf_energy = leaf_predictions(batch, params.leaves, abl)
    child_scale = child_scales(params.composer, batch.masked_X(abl), abl)
    return compose(batch, leaf_energy, child_scale, drop_comm="no_comm" in abl)


def predict(tree: ModelTree, agg: AggregatedFeatures, params: PredictorParams,
            ablations=None) -> dict[str, float]:
    """Per-node energy (Wh) for one run; ``"root"`` is the model-level prediction."""
    batch = TreeBatch(tree, [agg])
    energy = predict_batch(batch, params, ablations)[0]
    return dict(zip(batch.node_ids, energy.tolist()))


def predict_records(records: Sequence, params: PredictorParams, ablations=None,
                    batches: Sequence[TreeBatch] | None = None) -> np.ndarray:
    """Root predictions aligned with ``records`` (or with the batches' indices)."""
    batches = build_batches(records, with_truth=False) if batches is None else batches
    if records is not None:
        n_out = len(records)
    else:
        n_out = 1 + max(int(batch.index.max()) for batch in batches)
    out = np.full(n_out, np.nan)
    for batch in batches:
        out[batch.index] = predict_batch(batch, params, ablations)[:, 0]
    return out


# -- composer training -----------------------------------------------------------------

@dataclass(frozen=True)
class ComposerHyper:
    """``epochs`` is the step count for ``gd`` and the iteration cap for ``lbfgs``.

    ``weight_decay`` adds ``weight_decay * (|weights|^2 + bias^2)`` to the loss; without it
    the composer has near-flat valleys where bias and weights trade off.
    """
    learning_rate: float = 0.05
    epochs: int = 300
    tau: float = 2.0
    init_scale: float = 0.0
    init_bias: float = 0.0
    seed: int = 0
    objective: str = "all_nodes"   # or "root"
    optimizer: str = "lbfgs"       # or "gd" (fixed step)
    weight_decay: float = 1e-4


def _supervised(batch: TreeBatch, objective: str) -> np.ndarray:
    if objective == "root":
        return np.array([0])
    if objective == "all_nodes":
        return np.flatnonzero(~batch.is_leaf)
    raise ValueError(f"unknown objective {objective!r}")


class _ComposerProblem:
    """Relative squared error of composed energies, with its analytic gradient."""

    def __init__(self, batches, leaves, tau, standardizer, objective, ablations=()):
        self.tau = tau
        self.items = []
        self.count = 0
        for batch in batches:
            if batch.truths is None:
                raise DataError("composer training needs measured energies")
            leaf_energy = leaf_predictions(batch, leaves, ablations)
            Z = _mask_structure(standardizer.transform(batch.X), ablations)
            sup = _supervised(batch, objective)
            T = batch.truths[:, sup]
            if not (T > 0).all():
                raise DataError("measured energies of supervised nodes must be > 0")
            self.items.append((batch, leaf_energy, Z, sup, T))
            self.count += T.size

    def loss_grad(self, weights, bias, want_grad=True):
        loss = 0.0
        g_weights = np.zeros_like(weights)
        g_bias = 0.0
        for batch, leaf_energy, Z, sup, T in self.items:
            z = Z @ weights + bias
            th = np.tanh(z)
            child_scale = 1.0 + th / self.tau
            energy = compose(batch, leaf_energy, child_scale)
            e = (energy[:, sup] - T) / T
            sq = (e ** 2).sum(axis=1)
            if not np.isfinite(sq).all():
                bad = int(np.flatnonzero(~np.isfinite(sq))[0])
                raise NumericError(f"non-finite composer loss at record {int(batch.index[bad])}")
            loss += sq.sum()
            if not want_grad:
                continue
            g = np.zeros_like(energy)
            g[:, sup] = 2.0 * e / T / self.count
            g_scale = np.zeros_like(energy)
            for idx, M in reversed(batch.levels):     # shallowest first
                gp = g @ M.T                      # parent gradient for each node in idx
                g[:, idx] += gp * child_scale[:, idx]
                g_scale[:, idx] = gp * energy[:, idx]
            dz = g_scale * (1.0 - th ** 2) / self.tau
            g_weights += np.einsum("rn,rnd->d", dz, Z)
            g_bias += float(dz.sum())
        return loss / self.count, g_weights, g_bias


def fit_composer(data, leaves: Mapping[ModuleKind, LeafRegressor],
                 hyper: ComposerHyper = ComposerHyper(), ablations=(),
                 return_history: bool = False):
    """Fit the composer weights and bias on measured node energies.

    ``history`` holds the penalized objective before each step plus the final value.
    """
    if hyper.optimizer not in ("gd", "lbfgs"):
        raise ValueError(f"unknown optimizer {hyper.optimizer!r}")
    batches = _as_batches(data)
    rows = np.concatenate([batch.X[:, 1:].reshape(-1, N_FEATURES) for batch in batches])
    st = Standardizer.fit(rows)
    prob = _ComposerProblem(batches, leaves, hyper.tau, st, hyper.objective, ablations)
    rng = np.random.default_rng(hyper.seed)
    x = np.append(hyper.init_scale * rng.standard_normal(N_FEATURES), hyper.init_bias)
    wd = hyper.weight_decay

    def objective(x):
        loss, g_weights, g_bias = prob.loss_grad(x[:-1], x[-1])
        return loss + wd * (x @ x), np.append(g_weights, g_bias) + 2.0 * wd * x

    history = []
    if hyper.optimizer == "gd":
        for _ in range(hyper.epochs):
            f, g = objective(x)
            history.append(f)
            x = x - hyper.learning_rate * g
    elif hyper.epochs > 0:
        history.append(objective(x)[0])
        res = optimize.minimize(objective, x, jac=True, method="L-BFGS-B",
                                callback=lambda xk: history.append(objective(xk)[0]),
                                options={"maxiter": hyper.epochs, "ftol": 0.0,
                                         "gtol": 1e-12})
        x = res.x
    history.append(objective(x)[0])
    comp = ComposerParams(x[:-1].copy(), float(x[-1]), hyper.tau, st)
    return (comp, history) if return_history else comp


def fit_predictor(data, ridge_lambda: float = 1e-3, hyper: ComposerHyper = ComposerHyper(),
                  ablations=()) -> PredictorParams:
    """Fit every leaf kind present, then the composer. Only ``no_structure`` changes training."""
    batches = _as_batches(data)
    train_abl = frozenset(a for a in ablations if a == "no_structure")
    kinds = []
    for batch in batches:
        for k, leaf in zip(batch.kinds, batch.is_leaf):
            if leaf and k not in kinds:
                kinds.append(k)
    kinds.sort(key=LEAF_KINDS.index)
    leaves = {k: fit_leaves(batches, k, ridge_lambda, train_abl) for k in kinds}
    comp = fit_composer(batches, leaves, hyper, train_abl)
    return PredictorParams(leaves, comp, frozenset(ablations))


# -- documents ------------------------------------------------------------------------

def params_to_dict(params: PredictorParams, provenance: dict | None = None) -> dict:
    comp = params.composer
    return {
        "kind": "piep",
        "schema_version": PARAMS_SCHEMA_VERSION,
        "feature_schema_version": params.feature_schema_version,
        "tool_version": __version__,
        "feature_names": list(FEATURE_NAMES),
        "ablations": sorted(params.ablations),
        "leaves": {k.value: {"weights": r.weights.tolist(), "bias": r.bias,
                             "standardizer": r.standardizer.to_dict()}
                   for k, r in params.leaves.items()},
        "composer": {"weights": comp.weights.tolist(), "bias": comp.bias, "tau": comp.tau,
                     "standardizer": comp.standardizer.to_dict() if comp.standardizer else None},
        "provenance": provenance or {},
    }


def params_from_dict(d: dict) -> PredictorParams:
    if d.get("kind") != "piep":
        raise ParseError(f"model document kind {d.get('kind')!r} is not 'piep'")
    if d.get("schema_version") != PARAMS_SCHEMA_VERSION:
        raise ParseError(f"model schema version {d.get('schema_version')} does not match "
                         f"supported version {PARAMS_SCHEMA_VERSION}")
    if d.get("feature_schema_version") != FEATURE_SCHEMA_VERSION:
        raise ParseError(f"feature schema version {d.get('feature_schema_version')} does not "
                         f"match supported version {FEATURE_SCHEMA_VERSION}")
    if d.get("feature_names") != list(FEATURE_NAMES):
        raise ParseError("feature ordering in model document differs from this build")
    leaves = {}
    for name, r in d["leaves"].items():
        k = ModuleKind(name)
        leaves[k] = LeafRegressor(k, np.array(r["weights"], dtype=float), r["bias"],
                                  Standardizer.from_dict(r["standardizer"]))
    comp_doc = d["composer"]
    st = Standardizer.from_dict(comp_doc["standardizer"]) if comp_doc["standardizer"] else None
    comp = ComposerParams(np.array(comp_doc["weights"], dtype=float), comp_doc["bias"],
                          comp_doc["tau"], st)
    return PredictorParams(leaves, comp, frozenset(d["ablations"]), d["feature_schema_version"])


def dumps_params(params: PredictorParams, provenance: dict | None = None) -> str:
    return json.dumps(params_to_dict(params, provenance), indent=1) + "\n"


def loads_params(text: str) -> PredictorParams:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt model document: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(d, dict):
        raise ParseError("corrupt model document: top level is not an object")
    try:
        return params_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"corrupt model document: {exc}") from None


def save_params(params: PredictorParams, path, provenance: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_params(params, provenance))


def load_params(path) -> PredictorParams:
    with open(path, encoding="utf-8") as fh:
        return loads_params(fh.read())


def params_hash(params: PredictorParams) -> str:
    return hashlib.sha256(dumps_params(params).encode()).hexdigest()[:16]
