"""Shared domain types, the capture manifest, and on-disk image/mask formats.

Images are 8-bit grayscale PGM (P5). Masks live in a small binary container:

    offset  size  field
    0       4     magic b"IGMK"
    4       1     version (currently 1)
    5       4     width, uint32 little-endian
    9       4     height, uint32 little-endian
    13      ...   four bit-packed planes (pupil, iris, eyeball, eyelash),
                  each ceil(width*height/8) bytes, row-major,
                  least-significant bit first within each byte
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

MANIFEST_COLUMNS = (
    "capture_id",
    "identity_id",
    "eye_side",
    "lid_state",
    "dilation_state",
    "image_path",
    "mask_path",
)

MASK_MAGIC = b"IGMK"
MASK_VERSION = 1
MASK_LAYERS = ("pupil", "iris", "eyeball", "eyelash")


class ManifestError(ValueError):
    """Raised when a manifest cannot be loaded."""


class UndefinedMetric(ValueError):
    """Raised when a quantity is undefined for the given input (e.g. empty mask)."""


class EyeSide(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class LidState(str, Enum):
    SQUINT = "squint"
    NEUTRAL = "neutral"
    WIDE = "wide"


class DilationState(str, Enum):
    UNDILATED = "undilated"
    DILATED = "dilated"


# Acquisition order of the six-image protocol: undilated row first, then dilated.
CONDITIONS = tuple(
    (lid, dil)
    for dil in (DilationState.UNDILATED, DilationState.DILATED)
    for lid in (LidState.SQUINT, LidState.NEUTRAL, LidState.WIDE)
)


def condition_name(lid: LidState | str, dilation: DilationState | str) -> str:
    return f"{LidState(lid).value}-{DilationState(dilation).value}"


@dataclass(frozen=True)
class EyeImage:
    """Row-major 8-bit grayscale image."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"EyeImage needs a non-empty 2-D array, got shape {px.shape}")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SegmentationMasks:
    """Per-pixel boolean layers for one capture.

    The layers are not assumed to be mutually consistent; each metric
    states its own set operations.
    """

    pupil: np.ndarray
    iris: np.ndarray
    eyeball: np.ndarray
    eyelash: np.ndarray

    def __post_init__(self):
        for name in MASK_LAYERS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pupil.shape

    def shapes_agree(self) -> bool:
        return all(getattr(self, n).shape == self.pupil.shape for n in MASK_LAYERS)

    def shifted(self, dy: int, dx: int) -> "SegmentationMasks":
        """Translate every layer by (dy, dx), filling vacated pixels with False."""
        return SegmentationMasks(*(_shift(getattr(self, n), dy, dx) for n in MASK_LAYERS))


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    src = a[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


@dataclass
class MetricSet:
    via: int
    pir: float
    mrd1: float
    mrd2: float
    iris_diameter: float
    pupil_diameter: float
    sharpness: float
    occlusion_90: float
    occlusion_30: float
    code_length: Optional[int] = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


METRIC_FIELDS = tuple(f.name for f in fields(MetricSet))


@dataclass
class CaptureRecord:
    """One capture: labels plus lazily loaded image and masks.

    ``image`` and ``masks`` are read from ``image_path``/``mask_path`` on first
    access when not supplied directly.
    """

    capture_id: str
    identity_id: str
    eye_side: str
    lid_state: str
    dilation_state: str
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    metrics: Optional[MetricSet] = None
    _image: Optional[EyeImage] = field(default=None, repr=False)
    _masks: Optional[SegmentationMasks] = field(default=None, repr=False)

    @property
    def iris_key(self) -> tuple[str, str]:
        return (self.identity_id, self.eye_side)

    @property
    def condition(self) -> str:
        return f"{self.lid_state}-{self.dilation_state}"

    @property
    def image(self) -> EyeImage:
        if self._image is None:
            if self.image_path is None:
                raise ValueError(f"{self.capture_id}: no image attached")
            self._image = read_pgm(self.image_path)
        return self._image

    @property
    def masks(self) -> SegmentationMasks:
        if self._masks is None:
            if self.mask_path is None:
                raise ValueError(f"{self.capture_id}: no masks attached")
            self._masks = read_masks(self.mask_path)
        return self._masks


def validate_record(record: CaptureRecord) -> tuple[bool, list[str]]:
    """Check label legality and image/mask dimension agreement.

    Defects are returned rather than raised.
    """
    defects = []
    for attr, enum in (("eye_side", EyeSide), ("lid_state", LidState), ("dilation_state", DilationState)):
        value = getattr(record, attr)
        if value not in {e.value for e in enum}:
            defects.append(f"label defect: {attr}={value!r}")
    try:
        image, masks = record.image, record.masks
    except (OSError, ValueError) as exc:
        defects.append(f"unreadable capture: {exc}")
        return False, defects
    if not masks.shapes_agree():
        shapes = {n: getattr(masks, n).shape for n in MASK_LAYERS}
        defects.append(f"dimension mismatch: mask layers {shapes}")
    if masks.shape != image.pixels.shape:
        (mh, mw), (ih, iw) = masks.shape, image.pixels.shape
        defects.append(f"dimension mismatch: mask {mw}x{mh} vs image {iw}x{ih}")
    return not defects, defects


# --------------------------------------------------------------------------
# Manifest


def load_manifest(path) -> list[CaptureRecord]:
    """Read a capture manifest CSV. Paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records = []
    seen: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: header missing columns {missing}")
        for rowno, row in enumerate(reader, start=2):
            if any(row.get(c) in (None, "") for c in MANIFEST_COLUMNS):
                raise ManifestError(f"{path}: row {rowno} is malformed (empty or missing field)")
            cid = row["capture_id"]
            if cid in seen:
                raise ManifestError(f"{path}: duplicate capture_id {cid!r} (rows {seen[cid]} and {rowno})")
            seen[cid] = rowno
            records.append(
                CaptureRecord(
                    capture_id=cid,
                    identity_id=row["identity_id"],
                    eye_side=row["eye_side"],
                    lid_state=row["lid_state"],
                    dilation_state=row["dilation_state"],
                    image_path=base / row["image_path"],
                    mask_path=base / row["mask_path"],
                )
            )
    return records


def write_manifest(path, records) -> None:
    """Write records sorted by capture_id, with paths relative to ``path``'s directory."""
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in sorted(records, key=lambda r: r.capture_id):
            writer.writerow(
                [
                    rec.capture_id,
                    rec.identity_id,
                    rec.eye_side,
                    rec.lid_state,
                    rec.dilation_state,
                    _relpath(rec.image_path, base),
                    _relpath(rec.mask_path, base),
                ]
            )


def _relpath(p, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return p.as_posix()


# --------------------------------------------------------------------------
# Image and mask files


def write_pgm(path, image: EyeImage) -> None:
    Image.fromarray(image.pixels, mode="L").save(path, format="PPM")


def read_pgm(path) -> EyeImage:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}")
        return EyeImage(np.array(im))


def write_masks(path, masks: SegmentationMasks) -> None:
    h, w = masks.shape
    if not masks.shapes_agree():
        raise ValueError("mask layers disagree in shape")
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<BII", MASK_VERSION, w, h))
        for name in MASK_LAYERS:
            fh.write(np.packbits(getattr(masks, name).ravel(), bitorder="little").tobytes())


def read_masks(path) -> SegmentationMasks:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: bad mask magic {data[:4]!r}")
    version, w, h = struct.unpack_from("<BII", data, 4)
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {version}")
    plane = (w * h + 7) // 8
    body = np.frombuffer(data, dtype=np.uint8, offset=13)
    if body.size != 4 * plane:
        raise ValueError(f"{path}: expected {4 * plane} payload bytes, found {body.size}")
    layers = [
        np.unpackbits(body[i * plane:(i + 1) * plane], count=w * h, bitorder="little").reshape(h, w).astype(bool)
        for i in range(4)
    ]
    return SegmentationMasks(*layers)
