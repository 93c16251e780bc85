import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from energytree.config import WorkloadConfig, preset
from energytree.errors import DataError, UsageError
from energytree.evaluation import (EvalReport, canonical_spec, make_splits, mape,
                                   pareto_table, pareto_tsv, percentage_errors,
                                   run_protocol, run_protocols, spearman, spearman_rho,
                                   standard_error)
from energytree.features import FEATURE_NAMES
from energytree.predictor import ComposerHyper, fit_predictor


def brute_rank(v):
    """Average 1-based ranks by counting, without sorting."""
    v = list(v)
    return [sum(u < x for u in v) + (sum(u == x for u in v) + 1) / 2 for x in v]


def brute_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va * vb) ** 0.5


def fake_records(keys):
    return [SimpleNamespace(arch=SimpleNamespace(variant_name=f"{fam}-{size}",
                                                 family_name=fam),
                            work=SimpleNamespace(batch_size=bs))
            for fam, size, bs in keys]


# -- metrics --------------------------------------------------------------------------------

def test_mape_examples():
    assert mape([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert mape([11.0], [10.0]) == pytest.approx(10.0)
    assert mape([11.0, 18.0], [10.0, 20.0]) == pytest.approx(10.0)


def test_mape_errors():
    with pytest.raises(DataError, match="index 1"):
        mape([1.0, 1.0], [1.0, 0.0])
    with pytest.raises(DataError):
        mape([1.0], [1.0, 2.0])
    with pytest.raises(DataError):
        mape([], [])


def test_standard_error_uses_sample_std():
    e = percentage_errors([11.0, 18.0, 30.0], [10.0, 20.0, 25.0])
    assert standard_error(e) == pytest.approx(np.std(e, ddof=1) / np.sqrt(3))
    assert standard_error([4.0]) == 0.0


@given(st.lists(st.floats(0.01, 1e6), min_size=1, max_size=30))
def test_mape_of_truths_is_zero(t):
    assert mape(t, t) == 0.0


# -- splits ---------------------------------------------------------------------------------

def test_kfold_on_nine_records():
    recs = fake_records([("vicuna", "7b", 8)] * 9)
    plan = make_splits(recs, "kfold:3", seed=4)
    assert [len(f.test) for f in plan.folds] == [3, 3, 3]
    tests = [set(f.test) for f in plan.folds]
    assert all(not a & b for a, b in itertools.combinations(tests, 2))
    assert set().union(*tests) == set(range(9))
    assert make_splits(recs, "kfold:3", seed=4) == plan
    assert make_splits(recs, "kfold:3", seed=5) != plan


def test_holdout_family_excludes_group():
    recs = fake_records([("vicuna", "7b", 8), ("llama", "8b", 8), ("vicuna", "13b", 4),
                         ("qwen", "7b", 4)])
    plan = make_splits(recs, "holdout:family")
    fold = next(f for f in plan.folds if f.label == "family=vicuna")
    assert fold.test == (0, 2)
    assert not any(recs[i].arch.family_name == "vicuna" for i in fold.train)


def test_split_errors():
    recs = fake_records([("a", "1", 1)] * 2)
    with pytest.raises(DataError, match="exceeds"):
        make_splits(recs, "kfold:3")
    with pytest.raises(DataError, match="empty"):
        make_splits([], "kfold:2")
    for bad in ("kfold:x", "kfold:1", "holdout:colour", "bootstrap:3"):
        with pytest.raises(UsageError):
            make_splits(recs, bad)


KEYS = st.tuples(st.sampled_from(["vicuna", "llama", "qwen"]), st.sampled_from(["s", "m"]),
                 st.sampled_from([1, 4, 8]))


@given(st.lists(KEYS, min_size=2, max_size=40),
       st.sampled_from(["kfold:2", "kfold:3", "holdout:variant", "holdout:batch_size",
                        "holdout:family"]),
       st.integers(0, 1000))
def test_split_plans_are_disjoint_and_exclusive(keys, scheme, seed):
    recs = fake_records(keys)
    if scheme == "kfold:3" and len(recs) < 3:
        return
    plan = make_splits(recs, scheme, seed)
    for f in plan.folds:
        assert not set(f.train) & set(f.test)
        assert set(f.train) | set(f.test) == set(range(len(recs)))
        if scheme.startswith("holdout"):
            key = scheme.split(":")[1]
            get = {"variant": lambda r: r.arch.variant_name,
                   "family": lambda r: r.arch.family_name,
                   "batch_size": lambda r: r.work.batch_size}[key]
            held = {get(recs[i]) for i in f.test}
            assert len(held) == 1
            assert not any(get(recs[i]) in held for i in f.train)
    if scheme.startswith("kfold"):
        assert sorted(i for f in plan.folds for i in f.test) == list(range(len(recs)))


# -- protocols ------------------------------------------------------------------------------

HYPER = ComposerHyper(epochs=40)


def test_oracle_scores_zero_on_every_plan(small_tp_dataset):
    for scheme in ("kfold:3", "holdout:variant", "holdout:batch_size", "holdout:family"):
        rep = run_protocol(small_tp_dataset, make_splits(small_tp_dataset, scheme), "oracle")
        assert rep.mape == 0.0 and rep.n == len(small_tp_dataset)


def test_specs_share_splits_and_report_modules(small_tp_dataset):
    plan = make_splits(small_tp_dataset, "kfold:3", seed=1)
    reps = run_protocols(small_tp_dataset, plan, ["piep", "token", "proxy"], HYPER)
    assert set(reps) == {"piep", "token_regression", "proxy"}
    for r in reps.values():
        assert r.metadata["split_plan"] == plan.digest
        assert [f["n"] for f in r.per_fold] == [len(f.test) for f in plan.folds]
        assert r.mape >= 0
    assert {"MLP", "AllReduce", "TransformerBlock"} <= set(reps["piep"].per_module)
    assert reps["proxy"].per_module == {}
    assert reps["piep"].mape < reps["token_regression"].mape


def test_report_is_byte_identical(small_tp_dataset):
    plan = make_splits(small_tp_dataset, "kfold:3", seed=2)
    a = run_protocols(small_tp_dataset, plan, ["piep", "piep_no_wait"], HYPER)
    b = run_protocols(small_tp_dataset, plan, ["piep", "piep_no_wait"], HYPER)
    for k in a:
        assert a[k].to_json() == b[k].to_json()
        assert a[k].to_tsv() == b[k].to_tsv()


def test_tsv_layout():
    rep = EvalReport("piep", "kfold:2", 1.5, 0.1, 4,
                     [{"label": "fold0", "mape": 1.0, "stderr": 0.2, "n": 2}],
                     {"v": {"mape": 1.5, "stderr": 0.1, "n": 4}})
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == ["spec", "scheme", "level", "key", "mape", "stderr", "n"]
    assert [ln.split("\t")[2] for ln in lines[1:]] == ["model", "fold", "variant"]


def test_unknown_spec():
    assert canonical_spec("comm_blind") == "piep_no_comm"
    with pytest.raises(UsageError):
        canonical_spec("gpt")


# -- pareto ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def piep(small_tp_dataset):
    return fit_predictor(small_tp_dataset, hyper=HYPER)


def test_pareto_time_drops_with_degree(piep):
    work = WorkloadConfig(8, 32, 32)
    archs = [preset("vicuna-tiny"), preset("llama-tiny")]
    rows = pareto_table(piep, archs, [2, 1], work)
    assert [(r.arch, r.degree) for r in rows] == [("llama-tiny", 1), ("llama-tiny", 2),
                                                 ("vicuna-tiny", 1), ("vicuna-tiny", 2)]
    for one, two in zip(rows[::2], rows[1::2]):
        assert two.time_per_token < one.time_per_token
        assert one.energy_per_token > 0
    assert pareto_table(piep, archs, [1, 2], work) == rows
    assert pareto_table(piep, archs, [], work) == []
    assert pareto_tsv([]).strip() == "arch\tdegree\ttime_per_token_s\tenergy_per_token_wh"


def test_pareto_needs_params():
    with pytest.raises(DataError, match="trained"):
        pareto_table(None, [preset("vicuna-tiny")], [1], WorkloadConfig(1, 1, 1))


# -- spearman --------------------------------------------------------------------------------

def test_spearman_monotone():
    y = np.array([1.0, 5.0, 2.0, 9.0, 4.0])
    assert spearman_rho(np.exp(y), y) == pytest.approx(1.0, abs=1e-15)
    assert spearman_rho(-y ** 3, y) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_ties_match_brute_force():
    x, y = [1, 2, 2, 3], [1, 2, 3, 4]
    assert brute_rank(x) == [1, 2.5, 2.5, 4]
    want = brute_pearson(brute_rank(x), brute_rank(y))
    assert abs(spearman_rho(x, y) - want) <= 1e-12


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=3, max_size=25))
def test_spearman_matches_brute_force(pairs):
    x, y = zip(*pairs)
    rho = spearman_rho(x, y)
    if len(set(x)) == 1 or len(set(y)) == 1:
        assert np.isnan(rho)
    else:
        assert abs(rho - brute_pearson(brute_rank(x), brute_rank(y))) <= 1e-12


def test_spearman_on_dataset(small_tp_dataset):
    rho, undefined = spearman(small_tp_dataset,
                              ["batch_size", "num_heads", "gpu_energy_counter_mean"])
    assert rho["batch_size"] > 0 and "gpu_energy_counter_mean" in rho
    assert all(-1 <= v <= 1 for v in rho.values())
    full, undef = spearman(small_tp_dataset)
    assert set(full) | set(undef) == set(FEATURE_NAMES)
    with pytest.raises(DataError, match="unknown feature"):
        spearman(small_tp_dataset, ["shoe_size"])
    with pytest.raises(DataError):
        spearman(small_tp_dataset.records[:2])


def test_spearman_constant_is_undefined():
    assert np.isnan(spearman_rho([2, 2, 2], [1, 2, 3]))
    with pytest.raises(DataError):
        spearman_rho([1, 2], [1, 2])
