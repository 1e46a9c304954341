"""Per-image quality metrics and the acquisition validators."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .model import CaptureRecord, EyeImage, MetricSet, SegmentationMasks, UndefinedMetric

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)


# --------------------------------------------------------------------------
# Geometry


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected component(s); equally large ones are all kept."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.flatnonzero(sizes == sizes.max()) + 1
    return np.isin(labels, keep)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """(row, col) coordinates of mask pixels with a 4-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)
    return np.argwhere(mask & ~inner).astype(float)


def _max_pairwise(points: np.ndarray) -> float:
    best = 0.0
    # chunked so memory stays bounded for large boundaries
    for start in range(0, len(points), 1024):
        chunk = points[start:start + 1024]
        d2 = ((chunk[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def polygon_diameter(mask) -> float:
    """Maximum Euclidean distance between boundary pixels of the mask's largest component.

    Raises:
        UndefinedMetric: if the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UndefinedMetric("diameter of an empty mask")
    pts = boundary_points(largest_component(mask))
    if len(pts) < 3:
        return _max_pairwise(pts)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # collinear boundary: hull is degenerate, the brute force is exact anyway
        return _max_pairwise(pts)
    return _max_pairwise(pts[hull.vertices])


def centroid(mask) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise UndefinedMetric("centroid of an empty mask")
    return float(rows.mean()), float(cols.mean())


@dataclass(frozen=True)
class Circle:
    row: float
    col: float
    radius: float


@dataclass(frozen=True)
class IrisGeometry:
    pupil: Circle
    iris: Circle


IRIS_CENTER_WEIGHT = 0.35


def iris_geometry(masks: SegmentationMasks, center_weight: float = IRIS_CENTER_WEIGHT) -> IrisGeometry:
    """Circle fits for the pupil and iris boundaries.

    The pupil circle sits at the pupil centroid with radius
    ``polygon_diameter / 2``. The iris region is ``iris | pupil`` (the full
    iris disc, so the pupil hole does not affect the fit); its radius is
    half its polygon diameter and its centre is pulled from the pupil
    centroid toward the disc centroid by ``center_weight``. A weight of 1
    is the plain disc centroid, which a lid drags a long way off the true
    centre; 0 assumes concentric boundaries and ignores the lid entirely.
    """
    if not masks.pupil.any() or not masks.iris.any():
        raise UndefinedMetric("pupil and iris masks must both be non-empty")
    if not 0.0 <= center_weight <= 1.0:
        raise ValueError("center_weight must lie in [0, 1]")
    disc = masks.iris | masks.pupil
    pr, pc = centroid(masks.pupil)
    dr, dc = centroid(disc)
    ir = pr + center_weight * (dr - pr)
    ic = pc + center_weight * (dc - pc)
    return IrisGeometry(
        pupil=Circle(pr, pc, polygon_diameter(masks.pupil) / 2.0),
        iris=Circle(ir, ic, polygon_diameter(disc) / 2.0),
    )


# --------------------------------------------------------------------------
# Metrics


def visible_iris_area(masks: SegmentationMasks) -> int:
    """Iris-mask pixels that are not also pupil-mask pixels."""
    return int(np.count_nonzero(masks.iris & ~masks.pupil))


def pupil_iris_ratio(masks: SegmentationMasks) -> float:
    if not masks.pupil.any() or not masks.iris.any():
        raise UndefinedMetric("PIR needs non-empty pupil and iris masks")
    return polygon_diameter(masks.pupil) / polygon_diameter(masks.iris)


def mrd(masks: SegmentationMasks, which: str = "MRD1") -> float:
    """Marginal reflex distance in pixels, signed.

    MRD1 is the pupil-centre row minus the top row of the eyeball mask in the
    pupil-centre column; MRD2 is the bottom row minus the centre row. Both are
    positive while the lid margin lies beyond the centre in the open direction.
    If the eyeball mask is empty in that column the global extreme row is used.
    """
    which = which.upper()
    if which not in ("MRD1", "MRD2"):
        raise ValueError(f"unknown MRD kind {which!r}")
    if not masks.eyeball.any():
        raise UndefinedMetric("MRD needs a non-empty eyeball mask")
    cr, cc = centroid(masks.pupil)
    row = int(np.floor(cr + 0.5))
    col = int(np.floor(cc + 0.5))
    column = np.flatnonzero(masks.eyeball[:, col]) if 0 <= col < masks.eyeball.shape[1] else np.array([])
    if column.size == 0:
        column = np.flatnonzero(masks.eyeball.any(axis=1))
    if which == "MRD1":
        return float(row - column.min())
    return float(column.max() - row)


def laplacian_response(pixels: np.ndarray) -> np.ndarray:
    """Interior response of the 4-neighbour Laplacian kernel."""
    x = np.asarray(pixels, dtype=np.float64)
    return x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4.0 * x[1:-1, 1:-1]


def sharpness(image: EyeImage | np.ndarray) -> float:
    """Variance of the Laplacian over interior pixels of the whole image."""
    pixels = image.pixels if isinstance(image, EyeImage) else np.asarray(image)
    if pixels.ndim != 2 or min(pixels.shape) < 3:
        raise UndefinedMetric(f"sharpness needs an image of at least 3x3, got {pixels.shape}")
    return float(laplacian_response(pixels).var())


def occlusion_fraction(masks: SegmentationMasks, arc_degrees: float, geometry: IrisGeometry | None = None) -> float:
    """Fraction of an ideal top-centred annulus sector missing from the visible iris.

    The sector spans ``arc_degrees`` centred on 12 o'clock around the iris
    centre, between the pupil and iris radii.
    """
    geo = geometry or iris_geometry(masks)
    h, w = masks.shape
    rr, cc = np.mgrid[0:h, 0:w]
    dy = geo.iris.row - rr
    dx = cc - geo.iris.col
    rho = np.hypot(dx, dy)
    # angular distance from straight up
    off_vertical = np.degrees(np.abs(np.arctan2(dx, dy)))
    sector = (rho >= geo.pupil.radius) & (rho <= geo.iris.radius) & (off_vertical <= arc_degrees / 2.0)
    total = np.count_nonzero(sector)
    if total == 0:
        raise UndefinedMetric("empty occlusion sector")
    visible = masks.iris & ~masks.pupil
    return float(np.count_nonzero(sector & ~visible)) / total


def compute_metrics(image: EyeImage, masks: SegmentationMasks) -> MetricSet:
    """All per-image metrics. Undefined quantities come back as NaN."""
    def attempt(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetric:
            return float("nan")

    try:
        geo = iris_geometry(masks)
    except UndefinedMetric:
        geo = None
    return MetricSet(
        via=visible_iris_area(masks),
        pir=attempt(pupil_iris_ratio, masks),
        mrd1=attempt(mrd, masks, "MRD1"),
        mrd2=attempt(mrd, masks, "MRD2"),
        iris_diameter=attempt(polygon_diameter, masks.iris),
        pupil_diameter=attempt(polygon_diameter, masks.pupil),
        sharpness=attempt(sharpness, image),
        occlusion_90=attempt(occlusion_fraction, masks, 90.0, geo) if geo else float("nan"),
        occlusion_30=attempt(occlusion_fraction, masks, 30.0, geo) if geo else float("nan"),
    )


# --------------------------------------------------------------------------
# Validators


class Failure(str, Enum):
    PIR_OUT_OF_RANGE = "PirOutOfRange"
    TOO_BLURRY = "TooBlurry"
    OCCLUSION_90 = "Occlusion90"
    OCCLUSION_30 = "Occlusion30"
    MASK_TOO_SMALL = "MaskTooSmall"


@dataclass(frozen=True)
class ValidatorConfig:
    pir_min: float = 0.1
    pir_max: float = 0.7
    sharpness_min: float = 461.0
    occlusion90_max: float = 0.25
    occlusion30_max: float = 0.30
    mask_min_px: int = 4096

    def __post_init__(self):
        if self.pir_min > self.pir_max:
            raise ValueError("pir_min must not exceed pir_max")
        for name in ("occlusion90_max", "occlusion30_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def relaxed(cls, **overrides) -> "ValidatorConfig":
        """PIR and occlusion checks opened up so only mask size and sharpness bite."""
        base = dict(pir_min=0.0001, pir_max=0.9999, occlusion90_max=0.99, occlusion30_max=0.99)
        base.update(overrides)
        return cls(**base)


@dataclass
class ValidationReport:
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def tokens(self) -> str:
        return ";".join(f.value for f in self.failures)


def validate_metrics(m: MetricSet, cfg: ValidatorConfig) -> ValidationReport:
    """Apply every check and report all failures.

    Each bound is inclusive: a value exactly at the threshold passes. NaN
    (undefined) metrics fail their check.
    """
    failures = []
    if not (cfg.pir_min <= m.pir <= cfg.pir_max):
        failures.append(Failure.PIR_OUT_OF_RANGE)
    if not (m.sharpness >= cfg.sharpness_min):
        failures.append(Failure.TOO_BLURRY)
    if not (m.occlusion_90 <= cfg.occlusion90_max):
        failures.append(Failure.OCCLUSION_90)
    if not (m.occlusion_30 <= cfg.occlusion30_max):
        failures.append(Failure.OCCLUSION_30)
    if not (m.via >= cfg.mask_min_px):
        failures.append(Failure.MASK_TOO_SMALL)
    return ValidationReport(failures)


def validate(record: CaptureRecord, cfg: ValidatorConfig) -> ValidationReport:
    if record.metrics is None:
        record.metrics = compute_metrics(record.image, record.masks)
    return validate_metrics(record.metrics, cfg)
