import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bosa import agent, dataset, envs, metrics
from bosa.envs import POINT_MASS, BehaviorSpec
from bosa.metrics import EvalResult, TransferDelta


def test_normalized_score_endpoints():
    assert metrics.normalized_score(5.0, 5.0, 25.0) == 0.0
    assert metrics.normalized_score(25.0, 5.0, 25.0) == 100.0
    with pytest.raises(ValueError):
        metrics.normalized_score(1.0, 3.0, 3.0)


@settings(max_examples=100, deadline=None)
@given(
    returns=st.lists(st.floats(-100, 100), min_size=2, max_size=8),
    c=st.floats(-5, 5),
    horizon=st.integers(1, 200),
)
def test_normalization_affine_invariance(returns, c, horizon):
    lo, hi = -50.0, 150.0
    base = [metrics.normalized_score(r, lo, hi) for r in returns]
    shift = c * horizon
    moved = [metrics.normalized_score(r + shift, lo + shift, hi + shift) for r in returns]
    assert np.argsort(base, kind="stable").tolist() == np.argsort(moved, kind="stable").tolist()
    assert np.allclose(base, moved, atol=1e-6)


def test_expert_scores_about_hundred_and_random_about_zero():
    spec = envs.make_spec(POINT_MASS)
    expert, rand = BehaviorSpec("expert", 0.0), BehaviorSpec("random", 0.0)
    g = np.random.default_rng(0)
    e = metrics.evaluate_policy(lambda s: envs.scripted_policy(spec, expert, envs.EnvState(s), g), spec, 100, np.random.default_rng(1))
    r = metrics.evaluate_policy(lambda s: envs.scripted_policy(spec, rand, envs.EnvState(s), g), spec, 100, np.random.default_rng(2))
    assert e.score == pytest.approx(100, abs=10)
    assert r.score == pytest.approx(0, abs=10)


def test_single_episode_result(rng):
    spec = envs.make_spec(POINT_MASS)
    ac = agent.init_state(4, 2, agent.BosaConfig(hidden_dim=8), rng)
    res = metrics.evaluate(ac, spec, 1, rng, seed=3, variant="full")
    assert len(res.returns) == 1 and res.seed == 3
    with pytest.raises(ValueError):
        metrics.evaluate(ac, spec, 0, rng)


def test_missing_references_error(rng, monkeypatch):
    spec = envs.make_spec(POINT_MASS)
    fam = envs.FAMILIES[POINT_MASS]
    from dataclasses import replace

    monkeypatch.setitem(envs.FAMILIES, POINT_MASS, replace(fam, expert_return=float("nan")))
    with pytest.raises(KeyError):
        metrics.evaluate_policy(lambda s: np.zeros(2), spec, 1, rng)


@pytest.mark.parametrize(
    "score, best, y",
    [(86.5, 112.0, -0.2277), (104.2, 110.9, -0.0604)],
)
def test_transfer_delta_table_examples(score, best, y):
    assert metrics.transfer_deltas(best, score, best).y == pytest.approx(y, abs=1e-4)


def test_transfer_delta_identity_and_errors():
    d = metrics.transfer_deltas(40.0, 40.0, 80.0)
    assert d.x == d.y == -0.5
    assert metrics.transfer_deltas(80.0, 10.0, 80.0).x == 0.0
    with pytest.raises(ZeroDivisionError):
        metrics.transfer_deltas(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        TransferDelta(float("inf"), 0.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3))
def test_delta_identity_property(a, b):
    d = metrics.transfer_deltas(a, a, b)
    assert d.x == d.y


def _res(score, seed=0, variant="full", ds="mix"):
    return EvalResult([score], score, seed, variant, ds)


def test_aggregate_examples():
    assert metrics.aggregate([_res(7.0)]) == (7.0, 0.0)
    assert metrics.aggregate([_res(v, i) for i, v in enumerate([1.0, 2.0, 3.0])]) == (2.0, 1.0)
    assert metrics.aggregate([_res(4.0, i) for i in range(5)])[1] == 0.0
    with pytest.raises(ValueError):
        metrics.aggregate([_res(1.0), _res(2.0, variant="no-filter")])
    with pytest.raises(ValueError):
        metrics.aggregate([])


def test_extrapolation_gap_zero_on_target_data(rng):
    spec = envs.make_spec(POINT_MASS)
    d = dataset.collect(spec, BehaviorSpec("medium"), 2000, 1)
    ac = agent.init_state(4, 2, agent.BosaConfig(hidden_dim=16), rng, d.state_mean, d.state_std)
    assert metrics.extrapolation_diagnostic(ac, d, spec, rng, 500) == 0.0


def test_extrapolation_gap_positive_on_shifted_data(rng):
    spec = envs.make_spec(POINT_MASS)
    d = dataset.collect(spec.shifted(mass_scale=0.5), BehaviorSpec("medium"), 2000, 1, "source")
    ac = agent.init_state(4, 2, agent.BosaConfig(hidden_dim=16), rng, d.state_mean, d.state_std)
    assert metrics.extrapolation_diagnostic(ac, d, spec, rng, 500) > 0.0


def test_report_files(tmp_path):
    results = [EvalResult([1.0, 3.0], 10.0 * (i + 1), i, "full", "mix", {"references": [0.0, 10.0]}) for i in range(3)]
    path = metrics.write_report(results, tmp_path / "report.csv")
    rows = list(csv.DictReader(open(path)))
    assert [r["seed"] for r in rows] == ["0", "1", "2", "mean"]
    assert float(rows[-1]["score"]) == 20.0 and float(rows[-1]["std"]) == 10.0
    assert float(rows[0]["std"]) == pytest.approx(10.0)  # episode std 1.0 on a 0..10 reference span

    deltas = {"pm-medium": TransferDelta(-0.5, -0.2)}
    metrics.write_deltas(deltas, tmp_path / "deltas.csv")
    assert open(tmp_path / "deltas.csv").read().splitlines()[1] == "pm-medium,-0.500000,-0.200000"
    a = metrics.scatter_svg(deltas, tmp_path / "a.svg").read_bytes()
    b = metrics.scatter_svg(deltas, tmp_path / "b.svg").read_bytes()
    assert a == b and b"<svg" in a


def test_result_dict_round_trip():
    r = EvalResult([1.0, 2.0], 55.0, 4, "no-filter", "mix", {"lam": 0.1})
    assert metrics.result_from_dict(metrics.result_to_dict(r)) == r
