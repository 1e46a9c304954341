"""Deterministic synthetic eye captures with ground-truth segmentation masks.

Every iris is a seeded value-noise texture defined over (angle, normalized
radius). A capture places that texture in an annulus between a pupil and an
iris boundary, covers it with straight horizontal eyelid chords, then applies
Gaussian blur and additive sensor noise. Because the texture lives in
normalized polar coordinates, the linear deformation mode is exactly the
rubber-sheet model; the nonlinear mode bends the radial mapping with
``r' = r + k r (1 - r)``.

Randomness comes from numpy's PCG64. Per-capture streams are seeded with a
64-bit BLAKE2b digest of ``(master_seed, identity_id, eye_side, condition)``,
so any capture can be regenerated independently of the others.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .model import (
    CONDITIONS,
    CaptureRecord,
    EyeImage,
    EyeSide,
    SegmentationMasks,
    write_manifest,
    write_masks,
    write_pgm,
)

log = logging.getLogger(__name__)

# Lattice resolution (angular cells, radial cells) and amplitude per octave.
# Cells are elongated radially, like the furrows of a real iris.
OCTAVES = ((20, 2, 0.5), (40, 3, 1.0), (80, 5, 0.8), (160, 8, 0.5))

PUPIL_LEVEL = 22.0
SCLERA_LEVEL = 185.0
SKIN_LEVEL = 150.0
IRIS_MEAN = 105.0
IRIS_CONTRAST = 38.0


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class IrisIdentity:
    identity_id: str
    texture_seed: int
    iris_radius: float
    lattices: tuple = field(repr=False, compare=False, default=())

    def texture(self, theta, r) -> np.ndarray:
        """Texture value at angle ``theta`` (radians) and normalized radius ``r`` in [0, 1].

        Zero mean and roughly unit variance over the annulus.
        """
        theta = np.asarray(theta, dtype=np.float64)
        r = np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0)
        total = np.zeros(np.broadcast(theta, r).shape)
        norm = 0.0
        for (n_theta, n_r, amp), lattice in zip(OCTAVES, self.lattices):
            total += amp * _value_noise(lattice, theta, r, n_theta, n_r)
            norm += amp * amp
        return total / np.sqrt(norm) * _NOISE_GAIN


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(lattice, theta, r, n_theta, n_r):
    u = (theta / (2.0 * np.pi)) % 1.0 * n_theta
    v = r * n_r
    i0 = np.floor(u).astype(np.intp)
    j0 = np.minimum(np.floor(v).astype(np.intp), n_r - 1)
    fu = _smooth(u - i0)
    fv = _smooth(v - j0)
    i0 %= n_theta
    i1 = (i0 + 1) % n_theta
    a = lattice[j0, i0] * (1 - fu) + lattice[j0, i1] * fu
    b = lattice[j0 + 1, i0] * (1 - fu) + lattice[j0 + 1, i1] * fu
    return a * (1 - fv) + b * fv


# value noise with smoothstep interpolation keeps ~0.75 of the lattice std
_NOISE_GAIN = 1.36


def generate_identity(seed: int, identity_id: Optional[str] = None, iris_radius: float = 66.0) -> IrisIdentity:
    """Build an iris texture from a 64-bit seed."""
    seed = int(seed) & (2**64 - 1)
    rng = np.random.Generator(np.random.PCG64(seed))
    lattices = tuple(rng.standard_normal((n_r + 1, n_theta)) for n_theta, n_r, _ in OCTAVES)
    return IrisIdentity(
        identity_id=identity_id if identity_id is not None else f"iris-{seed:016x}",
        texture_seed=seed,
        iris_radius=float(iris_radius),
        lattices=lattices,
    )


@dataclass(frozen=True)
class CaptureParams:
    """Geometry and degradation of one rendered capture.

    Lid positions are absolute image rows: pixels above ``upper_lid_y`` or
    below ``lower_lid_y`` are covered. A ``deformation_k`` of 0 is the linear
    rubber-sheet mapping.
    """

    pupil_radius: float
    upper_lid_y: float
    lower_lid_y: float
    blur_sigma: float = 0.8
    noise_sigma: float = 2.0
    gaze_offset: tuple = (0.0, 0.0)
    deformation_k: float = 0.0
    width: int = 400
    height: int = 320
    noise_seed: int = 0

    def validate(self, iris_radius: float) -> None:
        if not 0 < self.pupil_radius < iris_radius:
            raise ValueError(f"pupil radius {self.pupil_radius} must lie in (0, {iris_radius})")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be non-negative")
        if not -1.0 < self.deformation_k < 1.0:
            raise ValueError("deformation_k must lie in (-1, 1) to keep the radial map monotone")

    def eye_center(self) -> tuple[float, float]:
        """(row, col) of the eye centre."""
        dx, dy = self.gaze_offset
        return (self.height - 1) / 2.0 + dy, (self.width - 1) / 2.0 + dx


def warp_radius(r, k: float):
    return r + k * r * (1.0 - r)


def render_capture(identity: IrisIdentity, params: CaptureParams) -> tuple[EyeImage, SegmentationMasks]:
    """Render one capture and its exact masks.

    The pupil mask is the whole pupil disc, including any part hidden by a
    lid. The iris mask is the lid-free part of the annulus; the eyeball mask
    is the lid-clipped globe.
    """
    R = identity.iris_radius
    params.validate(R)
    p = params.pupil_radius
    h, w = params.height, params.width
    cy, cx = params.eye_center()

    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = cy - rr
    dx = cc - cx
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)

    open_rows = (rr >= params.upper_lid_y) & (rr <= params.lower_lid_y)
    globe = (dx / (2.3 * R)) ** 2 + (dy / (1.6 * R)) ** 2 <= 1.0
    pupil = rho <= p
    annulus = (rho > p) & (rho <= R)

    img = np.full((h, w), SKIN_LEVEL)
    img[globe] = SCLERA_LEVEL
    r_norm = warp_radius((rho[annulus] - p) / (R - p), params.deformation_k)
    img[annulus] = IRIS_MEAN + IRIS_CONTRAST * identity.texture(theta[annulus], r_norm)
    img[pupil] = PUPIL_LEVEL
    # skin over the covered rows, with a darker lash line along each margin
    img[~open_rows] = SKIN_LEVEL
    margin = np.abs(rr - params.upper_lid_y) < 2.0
    margin |= np.abs(rr - params.lower_lid_y) < 1.0
    img[margin & ~open_rows] = 60.0

    if params.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, params.blur_sigma, mode="nearest")
    if params.noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(params.noise_seed))
        img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    masks = SegmentationMasks(
        pupil=pupil,
        iris=annulus & open_rows,
        eyeball=globe & open_rows,
        eyelash=np.zeros((h, w), dtype=bool),
    )
    return EyeImage(pixels), masks


# --------------------------------------------------------------------------
# Cohorts


@dataclass
class CohortConfig:
    """Parameter ranges for a synthetic cohort.

    ``mrd1`` and ``mrd2`` are fractions of the iris radius (the lid margin
    sits that far above/below the pupil centre). ``deformation_k_per_pir``
    makes the radial deformation grow with dilation:
    ``k = deformation_k_per_pir * (pir - deformation_reference_pir)``; leave
    it at 0 for a purely linear (rubber-sheet) cohort. The default bends
    dilated irises (k up to 0.81) and slightly compresses constricted ones.
    """

    identity_count: int = 50
    master_seed: int = 0
    width: int = 400
    height: int = 320
    iris_radius: tuple = (60.0, 72.0)
    pir: dict = field(default_factory=lambda: {"undilated": (0.15, 0.4), "dilated": (0.55, 0.75)})
    mrd1: dict = field(
        default_factory=lambda: {"wide": (1.1, 1.4), "neutral": (0.55, 0.9), "squint": (0.1, 0.45)}
    )
    mrd2: tuple = (0.9, 1.2)
    blur_sigma: tuple = (0.8, 1.8)
    noise_sigma: tuple = (3.0, 8.0)
    gaze_offset: float = 6.0
    deformation_k_per_pir: float = 1.8
    deformation_reference_pir: float = 0.3

    @classmethod
    def from_dict(cls, data: dict) -> "CohortConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cohort config keys: {sorted(unknown)}")
        # JSON turns ranges into lists; keep them as (lo, hi) tuples
        data = {k: _as_ranges(v) for k, v in data.items()}
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "CohortConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _as_ranges(value):
    if isinstance(value, list):
        return tuple(value)
    if isinstance(value, dict):
        return {k: _as_ranges(v) for k, v in value.items()}
    return value


def subject_id(index: int) -> str:
    return f"S{index:04d}"


def capture_plan(config: CohortConfig) -> list[tuple[str, str, str, str, CaptureParams]]:
    """Every capture of the cohort as (identity_id, eye_side, lid, dilation, params)."""
    plan = []
    for i in range(config.identity_count):
        sid = subject_id(i)
        for side in (EyeSide.LEFT.value, EyeSide.RIGHT.value):
            identity = iris_identity(config, sid, side)
            R = identity.iris_radius
            for cond_index, (lid, dil) in enumerate(CONDITIONS):
                rng = np.random.Generator(
                    np.random.PCG64(derive_seed(config.master_seed, sid, side, cond_index))
                )
                pir = rng.uniform(*config.pir[dil.value])
                mrd1 = rng.uniform(*config.mrd1[lid.value]) * R
                mrd2 = rng.uniform(*config.mrd2) * R
                gaze = tuple(rng.uniform(-config.gaze_offset, config.gaze_offset, 2))
                base = CaptureParams(
                    pupil_radius=pir * R,
                    upper_lid_y=0.0,
                    lower_lid_y=0.0,
                    gaze_offset=gaze,
                    width=config.width,
                    height=config.height,
                )
                cy, _ = base.eye_center()
                params = CaptureParams(
                    pupil_radius=pir * R,
                    upper_lid_y=cy - mrd1,
                    lower_lid_y=cy + mrd2,
                    blur_sigma=rng.uniform(*config.blur_sigma),
                    noise_sigma=rng.uniform(*config.noise_sigma),
                    gaze_offset=gaze,
                    deformation_k=config.deformation_k_per_pir * (pir - config.deformation_reference_pir),
                    width=config.width,
                    height=config.height,
                    noise_seed=int(rng.integers(0, 2**63)),
                )
                plan.append((sid, side, lid.value, dil.value, params))
    return plan


def iris_identity(config: CohortConfig, sid: str, side: str) -> IrisIdentity:
    seed = derive_seed(config.master_seed, sid, side, "texture")
    radius_rng = np.random.Generator(np.random.PCG64(derive_seed(config.master_seed, sid, side, "radius")))
    return generate_identity(seed, identity_id=f"{sid}-{side}", iris_radius=radius_rng.uniform(*config.iris_radius))


def capture_id(sid: str, side: str, lid: str, dil: str) -> str:
    return f"{sid}_{side[0].upper()}_{dil}_{lid}"


def generate_cohort(config: CohortConfig, out_dir) -> list[CaptureRecord]:
    """Render the whole cohort into ``out_dir`` and write ``manifest.csv``.

    Layout: ``images/<capture_id>.pgm``, ``masks/<capture_id>.igmk``,
    ``manifest.csv`` and ``cohort.json`` (the config used). The returned
    records load their pixels back from disk on demand.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    identities: dict = {}
    for sid, side, lid, dil, params in capture_plan(config):
        key = (sid, side)
        if key not in identities:
            identities[key] = iris_identity(config, sid, side)
        image, masks = render_capture(identities[key], params)
        cid = capture_id(sid, side, lid, dil)
        img_path = out / "images" / f"{cid}.pgm"
        mask_path = out / "masks" / f"{cid}.igmk"
        write_pgm(img_path, image)
        write_masks(mask_path, masks)
        records.append(
            CaptureRecord(
                capture_id=cid,
                identity_id=sid,
                eye_side=side,
                lid_state=lid,
                dilation_state=dil,
                image_path=img_path,
                mask_path=mask_path,
            )
        )
    write_manifest(out / "manifest.csv", records)
    (out / "cohort.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("rendered %d captures into %s", len(records), out)
    return sorted(records, key=lambda r: r.capture_id)


def texture_field(identity: IrisIdentity, angular: int = 256, radial: int = 32) -> np.ndarray:
    """Texture sampled on a regular (radial x angular) grid, for inspection and tests."""
    theta = np.arange(angular) * (2.0 * np.pi / angular)
    r = (np.arange(radial) + 0.5) / radial
    return identity.texture(theta[None, :], r[:, None])

