import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from energytree.baselines import (ProxyRegressionParams, TokenRegressionParams,
                                  baseline_from_dict, baseline_to_dict, dumps_baseline,
                                  fit_proxy, fit_proxy_records, fit_token_model,
                                  fit_token_regression, predict_comm_blind, predict_proxy)
from energytree.config import ParallelismConfig, preset
from energytree.errors import DataError, ParseError
from energytree.evaluation import make_splits, run_protocols
from energytree.features import N_FEATURES, Standardizer
from energytree.predictor import (ComposerHyper, ComposerParams, PredictorParams,
                                  fit_predictor, predict)
from energytree.simulator import SimParams, gen_dataset, make_grid

from conftest import WORKLOADS

TRUE = TokenRegressionParams(1.0, 2.0, 0.1)


def calibration(params, pairs):
    return [(a, b, float(params.predict(a, b))) for a, b in pairs]


def test_token_regression_recovers_coefficients():
    pairs = [(16, 32), (64, 8), (128, 128), (32, 256), (8, 8), (200, 50)]
    fit = fit_token_regression(calibration(TRUE, pairs))
    np.testing.assert_allclose(fit.as_list(), TRUE.as_list(), atol=1e-6)


def test_token_regression_eval_is_exact():
    assert TRUE.predict(10, 20) == 70.0


@given(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-1, 1)),
       st.lists(st.tuples(st.integers(1, 512), st.integers(1, 512)), min_size=6,
                max_size=20, unique=True))
def test_token_regression_recovery_property(coef, pairs):
    A = np.array([(a, b, a * b) for a, b in pairs], dtype=float)
    if np.linalg.matrix_rank(A) < 3 or np.linalg.cond(A) > 1e6:
        return
    truth = TokenRegressionParams(*coef)
    fit = fit_token_regression(calibration(truth, pairs))
    np.testing.assert_allclose(fit.as_list(), coef, atol=1e-6)


def test_token_regression_rank_deficient():
    with pytest.raises(DataError, match="rank"):
        fit_token_regression([(1, 1, 3.0), (2, 2, 6.0)])
    # t_out = 2 * t_in makes the first two columns collinear
    with pytest.raises(DataError, match="rank"):
        fit_token_regression([(1, 2, 1.0), (2, 4, 2.0), (3, 6, 3.0), (5, 10, 4.0)])


def test_proxy_recovers_proportional_counter(rng):
    total = rng.uniform(1, 100, 50)
    fit = fit_proxy(0.6 * total, total)
    assert fit.slope == pytest.approx(1 / 0.6, rel=1e-6)
    assert fit.intercept == pytest.approx(0.0, abs=1e-9)


def test_proxy_errors():
    with pytest.raises(DataError, match="at least 2"):
        fit_proxy([1.0], [2.0])
    with pytest.raises(DataError, match="constant"):
        fit_proxy([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        fit_proxy([1.0, 2.0], [1.0])


def test_proxy_on_records(small_tp_dataset):
    recs = small_tp_dataset.records
    fit = fit_proxy_records(recs)
    pred = predict_proxy(fit, recs)
    assert pred.shape == (len(recs),) and np.isfinite(pred).all()
    # the counter misses host-side energy, so total exceeds it
    assert fit.slope > 1.0


def test_token_model_falls_back_to_pooled(small_tp_dataset):
    recs = small_tp_dataset.records
    model = fit_token_model(recs)
    assert set(model.per_key) == {r.arch.variant_name for r in recs}
    unseen = [r for r in recs if r.arch.variant_name == "llama-tiny"]
    pooled_only = fit_token_model([r for r in recs if r.arch.variant_name != "llama-tiny"])
    r = unseen[0]
    want = pooled_only.pooled.predict(r.work.seq_in, r.work.seq_out) * r.work.batch_size
    assert pooled_only.predict_record(r) == pytest.approx(float(want))


# -- comm-blind --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def piep(small_tp_dataset):
    return fit_predictor(small_tp_dataset.records, hyper=ComposerHyper(epochs=40))


def test_comm_blind_equals_full_on_one_gpu(small_tp_dataset, piep):
    for r in small_tp_dataset.records:
        if r.par.degree == 1:
            assert predict_comm_blind(r.tree, r.features, piep) == \
                predict(r.tree, r.features, piep)["root"]


def test_removing_comm_never_raises_root_at_unit_weights(small_tp_dataset, piep):
    st0 = Standardizer(np.zeros(N_FEATURES), np.ones(N_FEATURES))
    unit = PredictorParams(piep.leaves, ComposerParams(np.zeros(N_FEATURES), 0.0, 2.0, st0))
    for r in small_tp_dataset.records[::5]:
        assert predict_comm_blind(r.tree, r.features, unit) <= \
            predict(r.tree, r.features, unit)["root"]


def test_comm_blind_gap_smaller_under_data_parallel():
    archs = [preset("vicuna-tiny"), preset("qwen-tiny")]
    gaps = {}
    for strategy in ("PipelineParallel", "DataParallel"):
        pars = [ParallelismConfig(strategy, d) for d in (2, 4)]
        ds = gen_dataset(make_grid(archs, pars, WORKLOADS), 15, SimParams(seed=5))
        reps = run_protocols(ds, make_splits(ds, "kfold:3"), ["piep", "comm_blind"],
                             hyper=ComposerHyper(epochs=80))
        gaps[strategy] = reps["piep_no_comm"].mape - reps["piep"].mape
    assert gaps["PipelineParallel"] > gaps["DataParallel"] > 0


# -- documents -----------------------------------------------------------------------------

def test_baseline_documents_round_trip(small_tp_dataset):
    recs = small_tp_dataset.records
    for model in (fit_token_model(recs), fit_proxy_records(recs)):
        text = dumps_baseline(model, {"seed": 1})
        assert baseline_from_dict(json.loads(text)) == model
    d = baseline_to_dict(TRUE)
    assert d["kind"] == "token_regression" and baseline_from_dict(d).pooled == TRUE


def test_baseline_document_errors():
    d = baseline_to_dict(ProxyRegressionParams(1.5, 0.1))
    with pytest.raises(ParseError, match="version 9 .*version 1"):
        baseline_from_dict({**d, "schema_version": 9})
    with pytest.raises(ParseError, match="kind"):
        baseline_from_dict({**d, "kind": "mystery"})
    with pytest.raises(ParseError, match="corrupt"):
        baseline_from_dict({k: v for k, v in d.items() if k != "slope"})
    with pytest.raises(TypeError):
        baseline_to_dict(object())
