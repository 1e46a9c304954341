"""Pairing protocol, decision environments and error rates.

Pairs are labelled with an enrollment side and a probe side. The enrollment
policy names the lid/dilation condition that serves as enrollment; a pair
is genuine when both captures come from the same physical eye. Match
scores are attached afterwards with :func:`score_pairs`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .matching import DEFAULT_MAX_SHIFT, DEFAULT_MIN_OVERLAP, CodeBank, PackedIrisCode
from .model import CaptureRecord, MetricSet, UndefinedMetric
from .synth import derive_seed

log = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.0125
COARSE_BIN_WIDTH = 0.125
IMPOSTOR_SCOPES = ("all", "constrained")


class EmptyPairing(ValueError):
    """The enrollment policy selects no capture."""


class EmptyClass(ValueError):
    """A genuine or impostor class has no pairs."""


@dataclass
class ComparisonPair:
    enrollment_id: str
    probe_id: str
    genuine: bool
    hd: float = math.nan
    shift: int = 0
    overlap_bits: int = 0
    reliable: bool = True
    probe_metrics: Optional[MetricSet] = None
    enrollment_metrics: Optional[MetricSet] = None

    def __post_init__(self):
        if self.enrollment_id == self.probe_id:
            raise ValueError("a capture cannot be paired with itself")


@dataclass(frozen=True)
class EnrollmentPolicy:
    """Which captures act as enrollment.

    ``impostor_scope="all"`` keeps every cross-eye pair as an impostor;
    ``"constrained"`` keeps only those touching an enrollment-condition
    capture, like the genuine pairs. Label ties are broken by a hash of
    ``seed`` and the two capture ids, so a pair's labels do not depend on
    what else is in the dataset.
    """

    lid: str = "wide"
    dilation: str = "undilated"
    impostor_scope: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.impostor_scope not in IMPOSTOR_SCOPES:
            raise ValueError(f"impostor_scope must be one of {IMPOSTOR_SCOPES}")

    @property
    def condition(self) -> str:
        return f"{self.lid}-{self.dilation}"

    def qualifies(self, record: CaptureRecord) -> bool:
        return record.lid_state == self.lid and record.dilation_state == self.dilation


def build_pairs(records: Sequence[CaptureRecord], policy: EnrollmentPolicy = EnrollmentPolicy()) -> list[ComparisonPair]:
    """Enumerate labelled comparison pairs.

    Genuine pairs are all unordered same-eye pairs with at least one
    enrollment-condition capture. Impostor pairs are cross-eye pairs,
    filtered the same way when the policy's scope is ``"constrained"``.
    The qualifying capture is the enrollment; when both or neither
    qualify the labels are assigned by a seeded coin.

    Raises:
        EmptyPairing: if no record meets the enrollment condition.
    """
    recs = sorted(records, key=lambda r: r.capture_id)
    ids = [r.capture_id for r in recs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate capture ids")
    qual = np.array([policy.qualifies(r) for r in recs], dtype=bool)
    if not qual.any():
        raise EmptyPairing(f"no capture matches enrollment condition {policy.condition}")
    keys = [r.iris_key for r in recs]
    pairs = []
    n = len(recs)
    for i in range(n):
        for j in range(i + 1, n):
            genuine = keys[i] == keys[j]
            touches = qual[i] or qual[j]
            if (genuine or policy.impostor_scope == "constrained") and not touches:
                continue
            if qual[i] != qual[j]:
                swap = bool(qual[j])
            else:
                swap = bool(derive_seed(policy.seed, ids[i], ids[j]) & 1)
            e, p = (recs[j], recs[i]) if swap else (recs[i], recs[j])
            pairs.append(
                ComparisonPair(
                    e.capture_id, p.capture_id, genuine,
                    probe_metrics=p.metrics, enrollment_metrics=e.metrics,
                )
            )
    return pairs


def score_pairs(
    pairs: Sequence[ComparisonPair],
    codes: dict,
    max_shift: int = DEFAULT_MAX_SHIFT,
    min_overlap: int = DEFAULT_MIN_OVERLAP,
    workers: int = 1,
    backend=None,
) -> list[ComparisonPair]:
    """Attach rotation-minimized HDs. ``codes`` maps capture id to a packed code.

    The enrollment code stays fixed and the probe code is shifted.
    """
    if not pairs:
        return []
    ids = sorted({p.enrollment_id for p in pairs} | {p.probe_id for p in pairs})
    missing = [i for i in ids if i not in codes]
    if missing:
        raise KeyError(f"no code for captures {missing[:5]}")
    index = {cid: k for k, cid in enumerate(ids)}
    bank = CodeBank([codes[c] for c in ids])
    ia = np.fromiter((index[p.enrollment_id] for p in pairs), dtype=np.int64, count=len(pairs))
    ib = np.fromiter((index[p.probe_id] for p in pairs), dtype=np.int64, count=len(pairs))
    out = bank.match(ia, ib, max_shift, min_overlap, backend=backend, workers=workers)
    return [
        replace(p, hd=float(h), shift=int(s), overlap_bits=int(o), reliable=bool(r))
        for p, h, s, o, r in zip(pairs, out["hd"], out["shift"], out["overlap_bits"], out["reliable"])
    ]


def split_hds(pairs: Iterable[ComparisonPair]) -> tuple[np.ndarray, np.ndarray]:
    gen, imp = [], []
    for p in pairs:
        (gen if p.genuine else imp).append(p.hd)
    return np.asarray(gen, dtype=np.float64), np.asarray(imp, dtype=np.float64)


# --------------------------------------------------------------------------
# Statistics


def decidability(genuine_hds, impostor_hds) -> float:
    """d' = |mu1 - mu2| / sqrt((s1^2 + s2^2) / 2) with sample (n-1) variances."""
    g = np.asarray(genuine_hds, dtype=np.float64)
    i = np.asarray(impostor_hds, dtype=np.float64)
    if g.size < 2 or i.size < 2:
        raise ValueError("decidability needs at least two values per class")
    return _dprime(g.mean(), g.std(ddof=1), i.mean(), i.std(ddof=1))


def _dprime(mu1, s1, mu2, s2) -> float:
    denom = math.sqrt(0.5 * (s1 * s1 + s2 * s2))
    if denom == 0.0:
        raise UndefinedMetric("both classes have zero variance")
    return abs(mu1 - mu2) / denom


def fmr_fnmr(genuine_hds, impostor_hds, threshold: float) -> tuple[float, float]:
    """Error rates under the accept rule ``hd <= threshold``."""
    g = np.asarray(genuine_hds, dtype=np.float64)
    i = np.asarray(impostor_hds, dtype=np.float64)
    if g.size == 0 or i.size == 0:
        raise ValueError("both classes must be non-empty")
    return float(np.mean(i <= threshold)), float(np.mean(g > threshold))


def threshold_for_fmr(impostor_hds, target: float, weights=None) -> float:
    """Largest-style threshold whose FMR stays at or under ``target``.

    With ``k = floor(target * n)`` the threshold is the midpoint between the
    k-th and (k+1)-th order statistics. When ties make that midpoint admit
    too many impostors, the lower end drops to the largest value strictly
    below the (k+1)-th; with nothing below, the result sits one ulp under
    it. ``weights`` gives integer multiplicities (bootstrap counts).
    """
    x = np.asarray(impostor_hds, dtype=np.float64)
    if x.size == 0:
        raise ValueError("impostor list is empty")
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    order = np.argsort(x, kind="stable")
    s = x[order]
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)[order]
    return _sorted_threshold(s, w, target)


def _sorted_threshold(s: np.ndarray, w: np.ndarray, target: float) -> float:
    keep = w > 0
    s, w = s[keep], w[keep]
    if s.size == 0:
        raise ValueError("impostor list is empty")
    cw = np.cumsum(w)
    n = cw[-1]
    # the tiny relative slack absorbs products like 0.29 * 100 = 28.999...
    k = math.floor(target * n * (1.0 + 1e-12))
    if k >= n:
        return float(s[-1])
    upper = s[np.searchsorted(cw, k, side="right")]
    below = np.searchsorted(s, upper, side="left")
    if below == 0:
        return float(np.nextafter(upper, -np.inf))
    t = 0.5 * (s[below - 1] + upper)
    return float(t) if t < upper else float(np.nextafter(upper, -np.inf))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if x.size < 2:
        raise ValueError("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetric("zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# --------------------------------------------------------------------------
# Reports


DELTA_VIA = "delta_via"


def pair_feature(pair: ComparisonPair, name: str) -> float:
    if pair.probe_metrics is None:
        raise ValueError(f"pair {pair.enrollment_id}/{pair.probe_id} has no probe metrics")
    if name == DELTA_VIA:
        if pair.enrollment_metrics is None:
            raise ValueError("delta_via needs enrollment metrics")
        return float(pair.probe_metrics.via - pair.enrollment_metrics.via)
    value = getattr(pair.probe_metrics, name)
    return math.nan if value is None else float(value)


@dataclass(frozen=True)
class CorrelationRow:
    group: str
    split: str
    feature: str
    n: int
    r: Optional[float]  # None when undefined

    @property
    def defined(self) -> bool:
        return self.r is not None


def correlation_report(
    pairs: Sequence[ComparisonPair],
    features: Sequence[str] = ("via", "pir", "mrd1", "code_length", DELTA_VIA),
    group: str = "all",
) -> list[CorrelationRow]:
    """Pearson r of each probe feature against HD, per split."""
    rows = []
    for split, want in (("genuine", True), ("impostor", False)):
        subset = [p for p in pairs if p.genuine == want]
        hd = np.array([p.hd for p in subset], dtype=np.float64)
        for name in features:
            x = np.array([pair_feature(p, name) for p in subset], dtype=np.float64)
            ok = np.isfinite(x) & np.isfinite(hd)
            try:
                r = pearson_r(x[ok], hd[ok])
            except (ValueError, UndefinedMetric):
                r = None
            rows.append(CorrelationRow(group, split, name, int(ok.sum()), r))
    return rows


@dataclass
class DecisionEnvironment:
    genuine_hds: np.ndarray
    impostor_hds: np.ndarray
    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    d_prime: float  # NaN when undefined
    bin_width: float
    bin_edges: np.ndarray = field(repr=False)
    genuine_hist: np.ndarray = field(repr=False)
    impostor_hist: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n_genuine": int(self.genuine_hds.size),
            "n_impostor": int(self.impostor_hds.size),
            "mu1": self.mu1,
            "sigma1": self.sigma1,
            "mu2": self.mu2,
            "sigma2": self.sigma2,
            "d_prime": None if math.isnan(self.d_prime) else self.d_prime,
            "bin_width": self.bin_width,
            "bin_edges": self.bin_edges.tolist(),
            "genuine_hist": self.genuine_hist.tolist(),
            "impostor_hist": self.impostor_hist.tolist(),
        }


def decision_environment(
    pairs: Sequence[ComparisonPair], bin_width: float = DEFAULT_BIN_WIDTH, subsample_seed: int = 0
) -> DecisionEnvironment:
    """Class moments, d', and histograms on [0, 1].

    Moments and d' use every pair. The impostor histogram uses a seeded
    subsample the size of the genuine class (all impostors if fewer).
    d' is NaN when fewer than two values sit in a class or both spreads
    are zero.
    """
    gen, imp = split_hds(pairs)
    return decision_environment_from_hds(gen, imp, bin_width, subsample_seed)


def decision_environment_from_hds(gen, imp, bin_width=DEFAULT_BIN_WIDTH, subsample_seed=0) -> DecisionEnvironment:
    gen = np.asarray(gen, dtype=np.float64)
    imp = np.asarray(imp, dtype=np.float64)
    if gen.size == 0 or imp.size == 0:
        raise EmptyClass("decision environment needs genuine and impostor pairs")
    nbins = int(round(1.0 / bin_width))
    if nbins < 1 or not math.isclose(nbins * bin_width, 1.0, rel_tol=1e-9):
        raise ValueError("bin_width must divide 1")
    edges = np.linspace(0.0, 1.0, nbins + 1)
    sample = imp
    if imp.size > gen.size:
        rng = np.random.Generator(np.random.PCG64(derive_seed(subsample_seed, "impostor-subsample")))
        sample = imp[np.sort(rng.choice(imp.size, gen.size, replace=False))]
    mu1, mu2 = float(gen.mean()), float(imp.mean())
    s1 = float(gen.std(ddof=1)) if gen.size > 1 else math.nan
    s2 = float(imp.std(ddof=1)) if imp.size > 1 else math.nan
    try:
        d = _dprime(mu1, s1, mu2, s2) if gen.size > 1 and imp.size > 1 else math.nan
    except UndefinedMetric:
        d = math.nan
    return DecisionEnvironment(
        genuine_hds=gen,
        impostor_hds=imp,
        mu1=mu1,
        sigma1=s1,
        mu2=mu2,
        sigma2=s2,
        d_prime=d,
        bin_width=bin_width,
        bin_edges=edges,
        genuine_hist=np.histogram(gen, edges)[0],
        impostor_hist=np.histogram(sample, edges)[0],
    )
