"""Comparison predictors.

* token regression: ``e = a0*t_in + a1*t_out + a2*t_in*t_out`` with no intercept,
  one fit per model variant (blind to parallelism) plus a pooled fallback
* counter proxy: ordinary least squares of total energy on the summed
  GPU energy counter, with intercept
* comm-blind tree: the hierarchical predictor with communication leaves removed
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .errors import DataError, ParseError
from .features import AggregatedFeatures
from .predictor import PredictorParams, predict
from .tree import ModelTree

BASELINE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TokenRegressionParams:
    alpha0: float
    alpha1: float
    alpha2: float

    def predict(self, seq_in, seq_out):
        t_in = np.asarray(seq_in, dtype=float)
        t_out = np.asarray(seq_out, dtype=float)
        return self.alpha0 * t_in + self.alpha1 * t_out + self.alpha2 * t_in * t_out

    def as_list(self) -> list[float]:
        return [self.alpha0, self.alpha1, self.alpha2]


def fit_token_regression(calibration) -> TokenRegressionParams:
    """Least squares on rows of (t_in, t_out, energy)."""
    data = np.asarray(calibration, dtype=float).reshape(-1, 3)
    t_in, t_out, e = data.T
    A = np.column_stack([t_in, t_out, t_in * t_out])
    if len(A) < 3 or np.linalg.matrix_rank(A) < 3:
        raise DataError("token regression design is rank deficient; need at least 3 "
                        "linearly independent (seq_in, seq_out) rows")
    coef, *_ = np.linalg.lstsq(A, e, rcond=None)
    if not np.isfinite(coef).all():
        raise DataError("token regression produced non-finite coefficients")
    return TokenRegressionParams(*map(float, coef))


def variant_key(r) -> str:
    return r.arch.variant_name


@dataclass(frozen=True)
class TokenRegressionModel:
    """Per-variant token fits; ``pooled`` covers variants unseen in training.

    Energy is fit per sequence (total divided by batch size) so batch size
    acts as a multiplier rather than an unmodelled covariate.
    """
    per_key: dict = field(default_factory=dict)
    pooled: TokenRegressionParams | None = None

    def predict_record(self, r) -> float:
        p = self.per_key.get(variant_key(r), self.pooled)
        if p is None:
            raise DataError(f"no token regression for variant {variant_key(r)}")
        return float(p.predict(r.work.seq_in, r.work.seq_out)) * r.work.batch_size


def _token_rows(records) -> np.ndarray:
    return np.array([(r.work.seq_in, r.work.seq_out,
                      r.model_total_energy / r.work.batch_size) for r in records])


def fit_token_model(records: Sequence) -> TokenRegressionModel:
    groups: dict = {}
    for r in records:
        groups.setdefault(variant_key(r), []).append(r)
    per_key = {}
    for k, rs in groups.items():
        try:
            per_key[k] = fit_token_regression(_token_rows(rs))
        except DataError:
            pass  # too few distinct workloads; pooled fit takes over
    pooled = fit_token_regression(_token_rows(records))
    return TokenRegressionModel(per_key, pooled)


# -- counter proxy ----------------------------------------------------------------

@dataclass(frozen=True)
class ProxyRegressionParams:
    slope: float
    intercept: float

    def predict(self, counter):
        return self.slope * np.asarray(counter, dtype=float) + self.intercept


def fit_proxy(counter, total) -> ProxyRegressionParams:
    x = np.asarray(counter, dtype=float)
    y = np.asarray(total, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("counter and total must be equal-length vectors")
    if len(x) < 2:
        raise DataError("proxy regression needs at least 2 points")
    if np.ptp(x) == 0:
        raise DataError("proxy regression: counter column is constant")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return ProxyRegressionParams(float(slope), float(intercept))


def fit_proxy_records(records: Sequence) -> ProxyRegressionParams:
    return fit_proxy([r.gpu_energy_counter for r in records],
                     [r.model_total_energy for r in records])


def predict_proxy(params: ProxyRegressionParams, records: Sequence) -> np.ndarray:
    return params.predict([r.gpu_energy_counter for r in records])


# -- comm-blind tree ------------------------------------------------------------------

def predict_comm_blind(tree: ModelTree, agg: AggregatedFeatures,
                       params: PredictorParams) -> float:
    return predict(tree, agg, params, ablations=params.ablations | {"no_comm"})["root"]


# -- documents ----------------------------------------------------------------------

def baseline_to_dict(model, provenance: dict | None = None) -> dict:
    head = {"schema_version": BASELINE_SCHEMA_VERSION, "tool_version": __version__}
    if isinstance(model, TokenRegressionModel):
        body = {"kind": "token_regression",
                "per_key": {k: p.as_list() for k, p in sorted(model.per_key.items())},
                "pooled": model.pooled.as_list() if model.pooled else None}
    elif isinstance(model, TokenRegressionParams):
        body = {"kind": "token_regression", "per_key": {}, "pooled": model.as_list()}
    elif isinstance(model, ProxyRegressionParams):
        body = {"kind": "proxy", "slope": model.slope, "intercept": model.intercept}
    else:
        raise TypeError(f"not a baseline model: {type(model).__name__}")
    return {"kind": body.pop("kind"), **head, **body, "provenance": provenance or {}}


def baseline_from_dict(d: dict):
    if d.get("schema_version") != BASELINE_SCHEMA_VERSION:
        raise ParseError(f"baseline schema version {d.get('schema_version')} does not match "
                         f"supported version {BASELINE_SCHEMA_VERSION}")
    try:
        if d["kind"] == "token_regression":
            per_key = {k: TokenRegressionParams(*v) for k, v in d["per_key"].items()}
            pooled = TokenRegressionParams(*d["pooled"]) if d["pooled"] else None
            return TokenRegressionModel(per_key, pooled)
        if d["kind"] == "proxy":
            return ProxyRegressionParams(float(d["slope"]), float(d["intercept"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"corrupt baseline document: {exc}") from None
    raise ParseError(f"unknown baseline kind {d.get('kind')!r}")


def dumps_baseline(model, provenance: dict | None = None) -> str:
    return json.dumps(baseline_to_dict(model, provenance), indent=1) + "\n"
