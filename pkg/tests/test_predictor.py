import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from energytree.errors import DataError, NumericError, ParseError
from energytree.features import N_FEATURES, STRUCTURE_IDX, Standardizer
from energytree.predictor import (ComposerHyper, ComposerParams, PredictorParams,
                                  TreeBatch, _ComposerProblem, build_batches, child_scales,
                                  compose, dumps_params,
                                  fit_composer, fit_leaves, fit_predictor, fit_ridge,
                                  leaf_predictions, load_params, loads_params,
                                  params_to_dict, predict, predict_batch, save_params)
from energytree.tree import LEAF_KINDS, ModelTree, ModuleKind, TreeNode


@pytest.fixture(scope="module")
def batches(small_tp_dataset):
    return build_batches(small_tp_dataset.records)


@pytest.fixture(scope="module")
def leaves(batches):
    kinds = {k for batch in batches for k, leaf in zip(batch.kinds, batch.is_leaf) if leaf}
    return {k: fit_leaves(batches, k) for k in kinds}


@pytest.fixture(scope="module")
def fitted(batches):
    return fit_predictor(batches, hyper=ComposerHyper(epochs=60))


def zero_params(leaves, tau=2.0):
    st0 = Standardizer(np.zeros(N_FEATURES), np.ones(N_FEATURES))
    return PredictorParams(leaves, ComposerParams(np.zeros(N_FEATURES), 0.0, tau, st0))


def alpha_one_batches(batches, leaves):
    """Batches whose measured energies are exactly the unit-weight composition."""
    out = []
    for batch in batches:
        energy = compose(batch, leaf_predictions(batch, leaves), np.ones(batch.X.shape[:2]))
        relabeled = batch.subset(np.arange(len(batch)))
        relabeled.truths = energy
        out.append(relabeled)
    return out


# -- composition ------------------------------------------------------------------

def test_alpha_bound_on_random_vectors():
    rng = np.random.default_rng(7)
    for tau in (0.5, 2.0, 10.0):
        X = rng.standard_normal((100_000, N_FEATURES)) * rng.uniform(0.1, 1e3, N_FEATURES)
        st0 = Standardizer.fit(X)
        comp = ComposerParams(rng.standard_normal(N_FEATURES) / np.sqrt(N_FEATURES),
                              rng.normal(), tau, st0)
        a = child_scales(comp, X)
        assert a.min() > 1 - 1 / tau and a.max() < 1 + 1 / tau


@given(st.floats(0.05, 50), st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_alpha_never_leaves_closed_band(tau, bias, seed):
    # tanh saturates to exactly +-1 in floating point once |z| > ~19
    rng = np.random.default_rng(seed)
    comp = ComposerParams(rng.standard_normal(N_FEATURES) * 10, bias, tau)
    a = child_scales(comp, rng.standard_normal((64, N_FEATURES)) * 100)
    assert (a >= 1 - 1 / tau).all() and (a <= 1 + 1 / tau).all()


def test_zero_composer_is_leaf_sum(small_tp_dataset, batches, leaves):
    params = zero_params(leaves)
    for batch in batches:
        energy = predict_batch(batch, params)
        leaf_sum = leaf_predictions(batch, leaves)[:, batch.is_leaf].sum(axis=1)
        np.testing.assert_allclose(energy[:, 0], leaf_sum, rtol=1e-13)
    rec = small_tp_dataset.records[-1]
    nodes = predict(rec.tree, rec.features, params)
    assert nodes["root"] == pytest.approx(sum(nodes[node.id] for node in rec.tree.leaves()),
                                          rel=1e-13)


def test_two_leaf_toy_tree(small_tp_dataset):
    rec = small_tp_dataset.records[0]
    root = TreeNode("root", ModuleKind.ROOT,
                    (TreeNode("a", ModuleKind.EMBEDDING), TreeNode("b", ModuleKind.MLP)))
    batch = TreeBatch(ModelTree(root, rec.arch, rec.par), [rec.features])
    energy = compose(batch, np.array([[0.0, 3.0, 5.0]]), np.array([[1.0, 1.1, 0.9]]))
    assert energy[0, 0] == pytest.approx(7.8, abs=1e-12)
    assert energy[0, 1:].tolist() == [3.0, 5.0]


def test_no_comm_drops_comm_leaves(batches, leaves):
    params = zero_params(leaves)
    tp2 = next(batch for batch in batches if batch.is_comm.any())
    full = predict_batch(tp2, params)
    blind = predict_batch(tp2, params, ("no_comm",))
    energy = leaf_predictions(tp2, leaves)
    np.testing.assert_allclose(full[:, 0] - blind[:, 0], energy[:, tp2.is_comm].sum(axis=1),
                               rtol=1e-10)


def test_no_wait_only_touches_comm_rows(batches):
    tp2 = next(batch for batch in batches if batch.is_comm.any())
    X = tp2.masked_X(("no_wait",))
    np.testing.assert_array_equal(X[:, ~tp2.is_comm], tp2.X[:, ~tp2.is_comm])
    assert not np.array_equal(X, tp2.X)
    assert tp2.masked_X(()) is tp2.X


def test_no_structure_ignores_structure_columns(batches, fitted):
    params = fitted.with_ablations("no_structure")
    batch = batches[0]
    bumped = batch.subset(np.arange(len(batch)))
    bumped.X = batch.X.copy()
    bumped.X[..., STRUCTURE_IDX] += 17.0
    np.testing.assert_array_equal(predict_batch(batch, params), predict_batch(bumped, params))


def test_unknown_ablation(fitted):
    with pytest.raises(ValueError):
        fitted.with_ablations("no_everything")


def test_missing_regressor_and_schema_mismatch(batches, fitted):
    partial = {k: v for k, v in fitted.leaves.items() if k is not ModuleKind.MLP}
    with pytest.raises(DataError, match="MLP"):
        predict_batch(batches[0], replace(fitted, leaves=partial))
    with pytest.raises(DataError, match="schema"):
        predict_batch(batches[0], replace(fitted, feature_schema_version=99))


def test_negative_leaf_output_is_clamped(batches, leaves, caplog):
    neg = dict(leaves)
    r = leaves[ModuleKind.NORM]
    neg[ModuleKind.NORM] = replace(r, bias=-1e6)
    energy = leaf_predictions(batches[0], neg)
    norm_cols = [i for i, k in enumerate(batches[0].kinds) if k is ModuleKind.NORM]
    assert (energy[:, norm_cols] == 0).all()
    assert "clamped" in caplog.text


def test_prediction_is_deterministic(batches, fitted):
    batch = batches[-1]
    np.testing.assert_array_equal(predict_batch(batch, fitted), predict_batch(batch, fitted))


# -- leaf regressors ---------------------------------------------------------------

def test_ridge_recovers_linear_truth(rng):
    X = rng.standard_normal((300, 6)) * [1, 10, 0.1, 5, 2, 1e3] + [0, 3, -1, 0, 7, 50]
    w = np.array([0.5, -2.0, 3.0, 0.0, 1.25, 0.01])
    reg = fit_ridge(X, X @ w + 4.0, 1e-10)
    coef, intercept = reg.raw_coefficients()
    np.testing.assert_allclose(coef, w, atol=1e-6)
    assert intercept == pytest.approx(4.0, abs=1e-6)


def test_ridge_matches_augmented_least_squares(rng):
    X = rng.standard_normal((80, 5))
    y = rng.standard_normal(80)
    lam = 0.7
    reg = fit_ridge(X, y, lam)
    Z = reg.standardizer.transform(X)
    A = np.vstack([Z, np.sqrt(lam) * np.eye(5)])
    rhs = np.concatenate([y - y.mean(), np.zeros(5)])
    oracle, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    np.testing.assert_allclose(reg.weights, oracle, rtol=1e-8)


def test_ridge_constant_target_and_limit(rng):
    X = rng.standard_normal((40, 3))
    reg = fit_ridge(X, np.full(40, 2.5), 1e-3)
    assert (reg.weights == 0).all() and reg.bias == 2.5
    big = fit_ridge(X, X @ [1.0, 2.0, 3.0], 1e12)
    assert np.abs(big.weights).max() < 1e-9


def test_ridge_errors(rng):
    with pytest.raises(DataError, match="at least 4"):
        fit_ridge(rng.standard_normal((3, 3)), np.ones(3), 1.0, ModuleKind.MLP)
    X = rng.standard_normal((20, 2))
    X = np.column_stack([X, X[:, 0] * 2])
    with pytest.raises(DataError, match="ridge_lambda > 0"):
        fit_ridge(X, rng.standard_normal(20), 0.0)
    assert np.isfinite(fit_ridge(X, rng.standard_normal(20), 1e-6).weights).all()


def test_weights_have_schema_length(leaves):
    for r in leaves.values():
        assert r.weights.shape == (N_FEATURES,)


# -- composer training ---------------------------------------------------------------

def test_composer_gradient_matches_central_differences(batches, leaves):
    rows = np.concatenate([batch.X[:, 1:].reshape(-1, N_FEATURES) for batch in batches])
    prob = _ComposerProblem(batches, leaves, 2.0, Standardizer.fit(rows), "all_nodes")
    rng = np.random.default_rng(11)
    weights = 0.1 * rng.standard_normal(N_FEATURES)
    bias = 0.2
    _, g_weights, g_bias = prob.loss_grad(weights, bias)
    grad = np.append(g_weights, g_bias)
    live = np.flatnonzero(np.abs(grad) > 1e-9 * np.abs(grad).max())
    coords = rng.choice(live, size=min(24, len(live)), replace=False)
    assert len(coords) >= 20
    h = 1e-5
    x = np.append(weights, bias)
    for i in coords:
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        fd = (prob.loss_grad(up[:-1], up[-1], False)[0]
              - prob.loss_grad(dn[:-1], dn[-1], False)[0]) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * abs(grad[i]), i


def test_composer_converges_to_unit_weights(batches, leaves):
    data = alpha_one_batches(batches, leaves)
    hyper = ComposerHyper(epochs=1000, init_scale=0.05, init_bias=0.3)
    comp, _ = fit_composer(data, leaves, hyper, return_history=True)
    prob = _ComposerProblem(data, leaves, hyper.tau, comp.standardizer, "all_nodes")
    x0 = 0.05 * np.random.default_rng(hyper.seed).standard_normal(N_FEATURES)
    start = prob.loss_grad(x0, 0.3, False)[0]
    end = prob.loss_grad(comp.weights, comp.bias, False)[0]
    assert np.linalg.norm(comp.weights) < 1e-2 and abs(comp.bias) < 1e-2
    assert end < 1e-6 * start


def test_zero_learning_rate_is_a_no_op(batches, leaves):
    hyper = ComposerHyper(optimizer="gd", learning_rate=0.0, epochs=5, init_scale=0.1,
                          init_bias=0.2)
    comp = fit_composer(batches, leaves, hyper)
    x0 = 0.1 * np.random.default_rng(0).standard_normal(N_FEATURES)
    np.testing.assert_array_equal(comp.weights, x0)
    assert comp.bias == 0.2


@pytest.mark.parametrize("objective", ["all_nodes", "root"])
def test_gradient_descent_loss_does_not_increase(batches, leaves, objective):
    hyper = ComposerHyper(optimizer="gd", learning_rate=0.01, epochs=40, init_bias=0.4,
                          objective=objective)
    _, hist = fit_composer(batches, leaves, hyper, return_history=True)
    assert len(hist) == 41
    assert hist[-1] < hist[0]
    assert all(nxt <= cur + 1e-15 for cur, nxt in zip(hist, hist[1:]))


def test_composer_rejects_bad_inputs(batches, leaves):
    with pytest.raises(ValueError):
        fit_composer(batches, leaves, ComposerHyper(optimizer="adam"))
    with pytest.raises(ValueError):
        ComposerParams(np.zeros(N_FEATURES), 0.0, tau=0.0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_names_record(batches, leaves):
    bad = batches[0].subset(np.arange(len(batches[0])))
    bad.truths = batches[0].truths.copy()
    bad.truths[2, 0] = 1e-320
    with pytest.raises(NumericError, match=f"record {int(bad.index[2])}"):
        fit_composer([bad], leaves, ComposerHyper(epochs=1))


def test_fit_predictor_is_deterministic(batches):
    hyper = ComposerHyper(epochs=20)
    assert dumps_params(fit_predictor(batches, hyper=hyper)) == \
        dumps_params(fit_predictor(batches, hyper=hyper))


def test_fitted_leaf_kinds_follow_canonical_order(fitted):
    order = list(fitted.leaves)
    assert order == sorted(order, key=LEAF_KINDS.index)
    assert ModuleKind.ALL_REDUCE in fitted.leaves


# -- documents -----------------------------------------------------------------------

def test_document_round_trip(fitted, tmp_path):
    params = fitted.with_ablations("no_wait")
    path = tmp_path / "m.json"
    save_params(params, path, {"seed": 3})
    back = load_params(path)
    assert dumps_params(back) == dumps_params(params)
    assert back.ablations == params.ablations
    for k, r in params.leaves.items():
        np.testing.assert_array_equal(back.leaves[k].weights, r.weights)
        np.testing.assert_array_equal(back.leaves[k].standardizer.mean, r.standardizer.mean)
        assert back.leaves[k].bias == r.bias
    np.testing.assert_array_equal(back.composer.weights, params.composer.weights)
    assert back.composer.bias == params.composer.bias


def test_truncated_document(fitted):
    text = dumps_params(fitted)
    with pytest.raises(ParseError, match="corrupt"):
        loads_params(text[: len(text) // 2])
    d = params_to_dict(fitted)
    del d["composer"]
    with pytest.raises(ParseError, match="corrupt"):
        loads_params(json.dumps(d))


def test_version_mismatch_names_both_versions(fitted):
    d = params_to_dict(fitted)
    d["schema_version"] = 0
    with pytest.raises(ParseError, match=r"version 0 .*version 1"):
        loads_params(json.dumps(d))
    d = params_to_dict(fitted)
    d["feature_schema_version"] = 7
    with pytest.raises(ParseError, match=r"version 7 .*version 1"):
        loads_params(json.dumps(d))
