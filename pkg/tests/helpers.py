"""Builders for small hand-made test inputs."""

from __future__ import annotations

import numpy as np

from irisgate.encoding import IrisCode
from irisgate.model import CaptureRecord, MetricSet, SegmentationMasks


def disk(shape, center, radius) -> np.ndarray:
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius ** 2


def annulus_masks(shape=(260, 260), center=(130.0, 130.0), R=100.0, p=50.0, lid_row=None) -> SegmentationMasks:
    """Concentric pupil/iris masks; rows above ``lid_row`` are covered."""
    outer = disk(shape, center, R)
    pupil = disk(shape, center, p)
    open_rows = np.ones(shape, dtype=bool)
    if lid_row is not None:
        open_rows[: int(lid_row)] = False
    return SegmentationMasks(pupil=pupil, iris=outer & ~pupil & open_rows,
                             eyeball=disk(shape, center, 1.3 * R) & open_rows,
                             eyelash=np.zeros(shape, dtype=bool))


def random_code(rng, radial=8, angular=200, mask_p=1.0) -> IrisCode:
    bits = rng.random((2, radial, angular)) < 0.5
    mask = rng.random((2, radial, angular)) < mask_p
    return IrisCode(bits, mask)


def metrics(via=8000, pir=0.3, mrd1=40.0, code_length=3000) -> MetricSet:
    nan = float("nan")
    return MetricSet(via, pir, mrd1, nan, nan, nan, nan, nan, nan, code_length)


def record(cid, identity="S0", side="left", lid="wide", dil="undilated", m=None) -> CaptureRecord:
    return CaptureRecord(cid, identity, side, lid, dil, metrics=m)
