"""Logistic quality scores and the FMR-constrained discard sweep.

The sweep bootstraps over probe images: each resample draws probes with
replacement and every pair follows its probe, so a probe drawn twice
counts its pairs twice. Counts are carried as weights rather than by
copying pairs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .evaluation import ComparisonPair, _sorted_threshold, pair_feature
from .synth import derive_seed

FEATURES = ("via", "pir", "mrd1")
MODELS = {
    "M0": (),
    "M1_VIA": ("via",),
    "M1_PIR": ("pir",),
    "M1_MRD1": ("mrd1",),
    "M3": ("via", "pir", "mrd1"),
}
DEFAULT_RATES = tuple(round(0.01 * k, 2) for k in range(8))
_P_EPS = 1e-15


class Degenerate(ValueError):
    """Training labels do not contain both classes often enough."""


class InvalidInput(ValueError):
    """Features or labels contain non-finite values."""


# --------------------------------------------------------------------------
# Logistic regression


@dataclass
class LogisticModel:
    """Fitted model. ``weights`` act on standardized features."""

    feature_names: tuple
    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray
    reg: float
    converged: bool
    iterations: int

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, len(self.feature_names))
        return (X - self.mean) / self.scale

    def predict_proba(self, X) -> np.ndarray:
        z = self.intercept + self.standardize(X) @ self.weights
        return np.clip(expit(z), _P_EPS, 1.0 - _P_EPS)

    @property
    def theta(self) -> np.ndarray:
        """Intercept followed by weights, the vector the fit optimizes."""
        return np.concatenate([[self.intercept], self.weights])

    def to_dict(self) -> dict:
        return {
            "features": list(self.feature_names),
            "intercept": self.intercept,
            "weights": self.weights.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "reg": self.reg,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def penalized_loglik(theta, Z, y, reg, sample_weight=None) -> float:
    """sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)] - reg/2 * |weights|^2.

    ``theta`` is (intercept, weights) on the design ``Z``; the intercept is
    not penalized.
    """
    theta = np.asarray(theta, dtype=np.float64)
    z = theta[0] + Z @ theta[1:]
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    # log(1 + e^z) computed stably
    ll = np.sum(w * (y * z - np.logaddexp(0.0, z)))
    return float(ll - 0.5 * reg * theta[1:] @ theta[1:])


def penalized_gradient(theta, Z, y, reg, sample_weight=None) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    resid = w * (y - expit(theta[0] + Z @ theta[1:]))
    g = np.concatenate([[resid.sum()], Z.T @ resid])
    g[1:] -= reg * theta[1:]
    return g


def fit_logistic(
    X,
    y,
    reg: float = 1e-6,
    feature_names: Optional[Sequence[str]] = None,
    standardize: bool = True,
    sample_weight=None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticModel:
    """L2-penalized logistic regression by IRLS (Newton steps with halving).

    Features are centred and scaled internally unless ``standardize`` is
    False; a constant column gets scale 1. Iteration stops once the largest
    coefficient change drops below ``tol``.

    Raises:
        Degenerate: fewer than two (weighted) samples in either class.
        InvalidInput: non-finite features, labels or weights.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("features, labels and weights disagree in length")
    if not (np.isfinite(X).all() and np.isfinite(y).all() and np.isfinite(w).all()):
        raise InvalidInput("non-finite input to fit_logistic")
    if not np.isin(y, (0.0, 1.0)).all() or (w < 0).any():
        raise InvalidInput("labels must be 0/1 and weights non-negative")
    pos = float(w[y == 1].sum())
    neg = float(w[y == 0].sum())
    if pos < 2 or neg < 2:
        raise Degenerate(f"need two samples per class, got {pos:g} positive and {neg:g} negative")
    if reg < 0:
        raise ValueError("reg must be non-negative")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(d))
    if len(names) != d:
        raise ValueError("feature_names length does not match the feature count")

    if standardize:
        mean = np.average(X, axis=0, weights=w)
        scale = np.sqrt(np.average((X - mean) ** 2, axis=0, weights=w))
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(d), np.ones(d)
    Z = (X - mean) / scale
    A = np.hstack([np.ones((n, 1)), Z])
    penalty = np.full(d + 1, reg)
    penalty[0] = 0.0

    theta = np.zeros(d + 1)
    theta[0] = math.log(pos / neg)
    obj = penalized_loglik(theta, Z, y, reg, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(A @ theta)
        grad = A.T @ (w * (y - p)) - penalty * theta
        H = (A * (w * p * (1.0 - p))[:, None]).T @ A + np.diag(penalty)
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            cand_obj = penalized_loglik(cand, Z, y, reg, w)
            if cand_obj >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        change = float(np.max(np.abs(cand - theta)))
        theta, obj = cand, cand_obj
        if change < tol:
            converged = True
            break
    return LogisticModel(names, theta[1:].copy(), float(theta[0]), mean, scale, reg, converged, it)


def probe_quality_scores(model: LogisticModel, pairs: Sequence[ComparisonPair]) -> dict:
    """Mean predicted probability of correct classification per probe."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    if not pairs:
        return {}
    X = np.array([[pair_feature(p, f) for f in model.feature_names] for p in pairs])
    probs = model.predict_proba(X)
    for p, prob in zip(pairs, probs):
        sums[p.probe_id] = sums.get(p.probe_id, 0.0) + float(prob)
        counts[p.probe_id] = counts.get(p.probe_id, 0) + 1
    return {k: sums[k] / counts[k] for k in sorted(sums)}


# --------------------------------------------------------------------------
# Discard sweep


@dataclass(frozen=True)
class GateSweepRow:
    discard_rate: float
    mean_fmr: float
    mean_fnmr: float
    fmr_ci95: tuple
    fnmr_ci95: tuple


@dataclass
class SweepResult:
    model: str
    features: tuple
    rows: list
    fmr: np.ndarray = field(repr=False)  # (resamples, rates)
    fnmr: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)
    coefficients: list = field(repr=False, default_factory=list)

    def coefficient_summary(self) -> dict:
        if not self.coefficients:
            return {}
        theta = np.array([c["theta"] for c in self.coefficients])
        return {
            "terms": ["intercept", *self.features],
            "mean": theta.mean(axis=0).tolist(),
            "ci95_low": np.percentile(theta, 2.5, axis=0).tolist(),
            "ci95_high": np.percentile(theta, 97.5, axis=0).tolist(),
            "converged": int(sum(c["converged"] for c in self.coefficients)),
            "resamples": len(self.coefficients),
        }


@dataclass
class PairTable:
    """Array view of scored pairs, indexed by probe."""

    probe_ids: list
    genuine: np.ndarray
    hd: np.ndarray
    probe_index: np.ndarray
    probe_features: dict  # feature -> per-probe values

    @classmethod
    def from_pairs(cls, pairs: Sequence[ComparisonPair], features: Sequence[str] = FEATURES) -> "PairTable":
        if not pairs:
            raise ValueError("no pairs")
        probe_ids = sorted({p.probe_id for p in pairs})
        index = {pid: k for k, pid in enumerate(probe_ids)}
        feats = {f: np.full(len(probe_ids), np.nan) for f in features}
        for p in pairs:
            k = index[p.probe_id]
            for f in features:
                feats[f][k] = pair_feature(p, f)
        return cls(
            probe_ids,
            np.array([p.genuine for p in pairs], dtype=bool),
            np.array([p.hd for p in pairs], dtype=np.float64),
            np.array([index[p.probe_id] for p in pairs], dtype=np.int64),
            feats,
        )

    @property
    def n_probes(self) -> int:
        return len(self.probe_ids)


class _Prepared:
    """Per-table quantities shared by every resample and model."""

    def __init__(self, table: PairTable):
        self.table = table
        imp = ~table.genuine
        order = np.argsort(table.hd[imp], kind="stable")
        self.imp_hd_sorted = table.hd[imp][order]
        self.imp_probe_sorted = table.probe_index[imp][order]
        self.gen_idx = np.flatnonzero(table.genuine)
        self.gen_probe = table.probe_index[self.gen_idx]
        self.gen_hd = table.hd[self.gen_idx]
        P = table.n_probes
        self.imp_per_probe = np.bincount(self.imp_probe_sorted, minlength=P).astype(np.float64)
        self.gen_per_probe = np.bincount(self.gen_probe, minlength=P).astype(np.float64)
        # id rank breaks score ties, which sorted probe_ids already provide
        self.id_rank = np.arange(P)


def _draw(prep: _Prepared, seed: int, r: int, fmr_target: float, max_retries: int):
    """Probe counts for resample ``r`` plus its threshold, retrying degenerate draws."""
    P = prep.table.n_probes
    for attempt in range(max_retries + 1):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "resample", r, attempt)))
        counts = np.bincount(rng.integers(0, P, P), minlength=P).astype(np.float64)
        imp_w = counts[prep.imp_probe_sorted]
        gen_w = counts[prep.gen_probe]
        if imp_w.sum() == 0 or gen_w.sum() == 0:
            continue
        t = _sorted_threshold(prep.imp_hd_sorted, imp_w, fmr_target)
        accept = prep.gen_hd <= t
        if gen_w[accept].sum() < 2 or gen_w[~accept].sum() < 2:
            continue
        return counts, t
    raise Degenerate(f"resample {r}: no usable draw after {max_retries + 1} attempts")


def _rates_for(prep: _Prepared, counts, t, scores, rates):
    """FMR and FNMR at ``t`` after discarding the lowest-scoring probe draws."""
    P = prep.table.n_probes
    imp_acc = np.bincount(prep.imp_probe_sorted[prep.imp_hd_sorted <= t], minlength=P).astype(np.float64)
    gen_rej = np.bincount(prep.gen_probe[prep.gen_hd > t], minlength=P).astype(np.float64)
    drawn = np.flatnonzero(counts)
    order = drawn[np.lexsort((prep.id_rank[drawn], scores[drawn]))]
    cum_before = np.concatenate([[0.0], np.cumsum(counts[order])[:-1]])
    total = counts.sum()
    fmr = np.empty(len(rates))
    fnmr = np.empty(len(rates))
    for k, rate in enumerate(rates):
        n_drop = math.floor(rate * total * (1.0 + 1e-12))
        remaining = counts.copy()
        remaining[order] -= np.clip(n_drop - cum_before, 0.0, counts[order])
        imp_n = remaining @ prep.imp_per_probe
        gen_n = remaining @ prep.gen_per_probe
        fmr[k] = (remaining @ imp_acc) / imp_n if imp_n > 0 else math.nan
        fnmr[k] = (remaining @ gen_rej) / gen_n if gen_n > 0 else math.nan
    return fmr, fnmr


def _fit_scores(prep: _Prepared, features, weights, t, reg):
    X = np.column_stack([prep.table.probe_features[f] for f in features])
    labels = (prep.gen_hd <= t).astype(np.float64)
    model = fit_logistic(X[prep.gen_probe], labels, reg=reg, feature_names=features, sample_weight=weights)
    return model, model.predict_proba(X)


def _summarize(rates, fmr, fnmr) -> list:
    rows = []
    for k, rate in enumerate(rates):
        mean_fmr, fmr_ci = _mean_ci(fmr[:, k])
        mean_fnmr, fnmr_ci = _mean_ci(fnmr[:, k])
        rows.append(GateSweepRow(float(rate), mean_fmr, mean_fnmr, fmr_ci, fnmr_ci))
    return rows


def _mean_ci(values):
    v = values[np.isfinite(values)]
    if v.size == 0:
        return math.nan, (math.nan, math.nan)
    mean = float(v.mean())
    lo, hi = np.percentile(v, [2.5, 97.5])
    # percentile bounds can miss a skewed mean; widen rather than report a CI without it
    return mean, (float(min(lo, mean)), float(max(hi, mean)))


def gate_sweep(
    pairs,
    features: Sequence[str] = ("via",),
    discard_rates: Sequence[float] = DEFAULT_RATES,
    fmr_target: float = 0.001,
    resamples: int = 500,
    seed: int = 0,
    reg: float = 1e-6,
    refit: bool = True,
    model_name: Optional[str] = None,
    workers: int = 1,
    max_retries: int = 20,
) -> SweepResult:
    """Bootstrap the quality gate over probe images.

    Per resample: draw probes with replacement, fix the HD threshold for
    ``fmr_target`` on the drawn impostors, fit the logistic model on the
    drawn genuine pairs (label: accepted at that threshold), score every
    probe, then for each discard rate drop the lowest-scoring draws
    (ties by probe id) and recount FMR and FNMR at the same threshold.
    With ``refit=False`` one model fitted on the full data is reused.
    An empty ``features`` is the ungated baseline.

    Because the model only sees probe features, a probe's mean probability
    over its pairings is its own probability, so scores are computed per
    probe directly.
    """
    rates = np.asarray(discard_rates, dtype=np.float64)
    if rates.size == 0 or (rates < 0).any() or (rates >= 1).any():
        raise ValueError("discard rates must lie in [0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    features = tuple(features)
    table = pairs if isinstance(pairs, PairTable) else PairTable.from_pairs(pairs, features or FEATURES)
    prep = _Prepared(table)
    if prep.gen_idx.size == 0 or prep.imp_hd_sorted.size == 0:
        raise ValueError("pairs must include both genuine and impostor classes")
    P = table.n_probes

    fixed = None
    if features and not refit:
        t_full = _sorted_threshold(prep.imp_hd_sorted, np.ones(prep.imp_hd_sorted.size), fmr_target)
        fixed = _fit_scores(prep, features, None, t_full, reg)

    def one(r):
        counts, t = _draw(prep, seed, r, fmr_target, max_retries)
        coef = None
        if not features:
            scores = np.zeros(P)
        elif fixed is not None:
            model, scores = fixed
            coef = model
        else:
            coef, scores = _fit_scores(prep, features, counts[prep.gen_probe], t, reg)
        fmr, fnmr = _rates_for(prep, counts, t, scores, rates)
        if not features:
            fmr[:], fnmr[:] = fmr[0], fnmr[0]
        return fmr, fnmr, t, coef

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(resamples)))
    else:
        results = [one(r) for r in range(resamples)]

    fmr = np.array([res[0] for res in results])
    fnmr = np.array([res[1] for res in results])
    thresholds = np.array([res[2] for res in results])
    coefs = [
        {"theta": res[3].theta.tolist(), "converged": res[3].converged}
        for res in results
        if res[3] is not None
    ]
    name = model_name or ("M0" if not features else "+".join(features))
    return SweepResult(name, features, _summarize(rates, fmr, fnmr), fmr, fnmr, thresholds, coefs)


def model_comparison(
    pairs,
    discard_rates: Sequence[float] = DEFAULT_RATES,
    fmr_target: float = 0.001,
    resamples: int = 500,
    seed: int = 0,
    models: Optional[dict] = None,
    **kwargs,
) -> dict:
    """Sweeps for M0, the single-feature models and the combined model.

    Every model sees the same resample draws (same seed, and redraws
    depend only on labels), so the curves are paired.
    """
    models = MODELS if models is None else models
    table = pairs if isinstance(pairs, PairTable) else PairTable.from_pairs(pairs, FEATURES)
    return {
        name: gate_sweep(table, feats, discard_rates, fmr_target, resamples, seed, model_name=name, **kwargs)
        for name, feats in models.items()
    }
