import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from helpers import metrics
from irisgate.evaluation import ComparisonPair
from irisgate.gate import (
    Degenerate,
    InvalidInput,
    LogisticModel,
    PairTable,
    fit_logistic,
    gate_sweep,
    model_comparison,
    penalized_gradient,
    penalized_loglik,
    probe_quality_scores,
)
from oracles import numeric_gradient


def _pairs(seed, n_probes=120, impostors=6, slope=0.12, noise=0.03, separable=False):
    """One genuine pair per probe plus impostors; low VIA raises genuine HD."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n_probes):
        via = float(rng.uniform(2000, 12000))
        if separable:
            hd = 0.45 if via < 4000 else 0.2
        else:
            hd = 0.36 - slope * (via - 7000) / 5000 + rng.normal(0, noise)
        m = metrics(via=via, pir=float(rng.uniform(0.2, 0.7)), mrd1=float(rng.uniform(5, 40)))
        pid = f"P{k:04d}"
        pairs.append(ComparisonPair(f"E{k:04d}", pid, True, float(np.clip(hd, 0, 1)), probe_metrics=m,
                                    enrollment_metrics=metrics()))
        for j in range(impostors):
            pairs.append(ComparisonPair(f"X{k:04d}_{j}", pid, False, float(rng.normal(0.47, 0.012)),
                                        probe_metrics=m, enrollment_metrics=metrics()))
    return pairs


# --------------------------------------------------------------------------
# Logistic fit


def test_constant_feature_gets_zero_weight(rng):
    y = (rng.random(300) < 0.3).astype(float)
    y[:2], y[2:4] = 1, 0
    model = fit_logistic(np.full((300, 1), 7.0), y)
    assert abs(model.weights[0]) < 1e-6
    assert model.intercept == pytest.approx(logit(y.mean()), abs=1e-6)
    assert model.converged


@pytest.mark.parametrize("seed", range(10))
def test_fit_reaches_a_stationary_point(seed):
    rng = np.random.default_rng(seed)
    n, d = 200, int(rng.integers(1, 4))
    X = rng.normal(size=(n, d)) * rng.uniform(0.1, 100, d) + rng.uniform(-50, 50, d)
    beta = rng.normal(size=d)
    y = (rng.random(n) < 1 / (1 + np.exp(-((X - X.mean(0)) / X.std(0)) @ beta))).astype(float)
    w = rng.integers(1, 4, n).astype(float)
    model = fit_logistic(X, y, reg=1e-3, sample_weight=w)
    Z = model.standardize(X)
    g = penalized_gradient(model.theta, Z, y, 1e-3, w)
    assert np.max(np.abs(g)) < 1e-6
    theta = rng.normal(size=d + 1)
    num = numeric_gradient(lambda t: penalized_loglik(t, Z, y, 1e-3, w), theta)
    ana = penalized_gradient(theta, Z, y, 1e-3, w)
    assert np.allclose(num, ana, rtol=1e-4, atol=1e-4)


def test_fit_errors(rng):
    X = rng.normal(size=(10, 1))
    with pytest.raises(Degenerate):
        fit_logistic(X, np.ones(10))
    with pytest.raises(Degenerate):
        fit_logistic(X, np.r_[1.0, np.zeros(9)])
    bad = X.copy()
    bad[3] = np.nan
    with pytest.raises(InvalidInput):
        fit_logistic(bad, np.r_[np.ones(5), np.zeros(5)])
    with pytest.raises(InvalidInput):
        fit_logistic(X, np.r_[np.full(5, 2.0), np.zeros(5)])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_external_standardization_does_not_change_predictions(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 2)) * [300.0, 0.05] + [8000.0, 0.4]
    y = (rng.random(150) < 1 / (1 + np.exp(-(X[:, 0] - 8000) / 300))).astype(float)
    y[:2], y[2:4] = 1, 0
    raw = fit_logistic(X, y)
    Xs = (X - X.mean(0)) / X.std(0)
    pre = fit_logistic(Xs, y)
    assert np.allclose(raw.predict_proba(X), pre.predict_proba(Xs), rtol=0, atol=1e-8)


def test_probe_quality_scores_average_per_probe():
    model = LogisticModel(("delta_via",), np.array([1.0]), 0.0, np.zeros(1), np.ones(1), 0.0, True, 1)
    probe = metrics(via=0.0)
    pairs = [ComparisonPair("a", "p", True, 0.3, probe_metrics=probe, enrollment_metrics=metrics(via=-logit(0.2))),
             ComparisonPair("b", "p", False, 0.5, probe_metrics=probe, enrollment_metrics=metrics(via=-logit(0.8)))]
    assert probe_quality_scores(model, pairs[:1]) == {"p": pytest.approx(0.2)}
    assert probe_quality_scores(model, pairs) == {"p": pytest.approx(0.5)}
    assert probe_quality_scores(model, []) == {}


# --------------------------------------------------------------------------
# Sweep


@pytest.fixture(scope="module")
def table():
    return PairTable.from_pairs(_pairs(1))


@pytest.fixture(scope="module")
def sweeps(table):
    return model_comparison(table, fmr_target=0.01, resamples=60, seed=5,
                            models={"M0": (), "M1_VIA": ("via",)})


def test_zero_discard_equals_baseline(sweeps):
    m0, m1 = sweeps["M0"], sweeps["M1_VIA"]
    assert np.array_equal(m0.fmr[:, 0], m1.fmr[:, 0])
    assert np.array_equal(m0.fnmr[:, 0], m1.fnmr[:, 0])
    assert np.array_equal(m0.thresholds, m1.thresholds)
    assert m0.rows[0] == m1.rows[0]


def test_baseline_rows_are_constant(sweeps):
    rows = sweeps["M0"].rows
    assert all((r.mean_fmr, r.mean_fnmr, r.fmr_ci95, r.fnmr_ci95) ==
               (rows[0].mean_fmr, rows[0].mean_fnmr, rows[0].fmr_ci95, rows[0].fnmr_ci95) for r in rows)


def test_intervals_contain_means(sweeps):
    for sweep in sweeps.values():
        for r in sweep.rows:
            assert r.fmr_ci95[0] <= r.mean_fmr <= r.fmr_ci95[1]
            assert r.fnmr_ci95[0] <= r.mean_fnmr <= r.fnmr_ci95[1]


def test_sweep_is_deterministic_and_worker_independent(table, sweeps):
    again = gate_sweep(table, ("via",), fmr_target=0.01, resamples=60, seed=5, workers=3)
    assert np.array_equal(again.fnmr, sweeps["M1_VIA"].fnmr)
    assert np.array_equal(again.fmr, sweeps["M1_VIA"].fmr)
    other = gate_sweep(table, ("via",), fmr_target=0.01, resamples=60, seed=6)
    assert not np.array_equal(other.fnmr, sweeps["M1_VIA"].fnmr)


def test_perfect_ranking_gives_monotone_fnmr():
    pairs = _pairs(3, n_probes=100, separable=True)
    res = gate_sweep(pairs, ("via",), discard_rates=np.linspace(0, 0.3, 16), fmr_target=0.01, resamples=40, seed=1)
    assert (np.diff(res.fnmr, axis=1) <= 1e-15).all()


def test_discarding_rarely_hurts(sweeps):
    fnmr = sweeps["M1_VIA"].fnmr
    assert np.mean(fnmr[:, 7] <= fnmr[:, 0]) >= 0.9
    assert sweeps["M1_VIA"].rows[7].mean_fnmr < sweeps["M1_VIA"].rows[0].mean_fnmr


def test_coefficients_are_recorded_per_resample(sweeps):
    summary = sweeps["M1_VIA"].coefficient_summary()
    assert summary["terms"] == ["intercept", "via"] and summary["resamples"] == 60
    assert summary["mean"][1] > 0  # more visible iris, more likely accepted
    assert sweeps["M0"].coefficient_summary() == {}


def test_fixed_model_option_and_input_checks(table):
    res = gate_sweep(table, ("via",), fmr_target=0.01, resamples=10, refit=False)
    assert len({tuple(c["theta"]) for c in res.coefficients}) == 1
    with pytest.raises(ValueError):
        gate_sweep(table, ("via",), discard_rates=[1.0])
    with pytest.raises(ValueError):
        gate_sweep(table, ("via",), resamples=0)
    only_gen = [p for p in _pairs(2, n_probes=10) if p.genuine]
    with pytest.raises(ValueError):
        gate_sweep(only_gen, ("via",))


def test_impossible_draws_raise_degenerate():
    # every genuine pair scores above any impostor: no draw has two accepted genuine pairs
    pairs = [p if not p.genuine else ComparisonPair(p.enrollment_id, p.probe_id, True, 0.9,
                                                    probe_metrics=p.probe_metrics, enrollment_metrics=p.enrollment_metrics)
             for p in _pairs(4, n_probes=20)]
    with pytest.raises(Degenerate):
        gate_sweep(pairs, ("via",), resamples=2, max_retries=3)
