"""Rubber-sheet normalization and Gabor phase quantization.

Code file layout (little-endian):

    offset  size  field
    0       4     magic b"IRCD"
    4       1     version (currently 1)
    5       4     radial_code, uint32
    9       4     angular_res, uint32
    13      n     code bits, shape (2, radial_code, angular_res) row-major,
                  bit-packed least-significant bit first, n = ceil(bits/8)
    13+n    n     mask bits, same layout
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import IrisGeometry, iris_geometry
from .model import EyeImage, SegmentationMasks

CODE_MAGIC = b"IRCD"
CODE_VERSION = 1


class EmptyCode(ValueError):
    """Raised when a polar grid has no valid samples to encode."""


@dataclass(frozen=True)
class GaborParams:
    """Single-scale angular Gabor filter bank.

    The kernel support spans ``2 * window_halfwidth + 1`` angular samples;
    its real part is made exactly zero-mean so constant regions give no
    response.
    """

    radial_res: int = 16
    angular_res: int = 200
    wavelength: float = 18.0
    sigma: float = 9.0
    window_halfwidth: int = 9
    radial_pool: int = 2
    magnitude_floor: float = 1e-3

    @property
    def radial_code(self) -> int:
        return self.radial_res // self.radial_pool

    def kernel(self) -> np.ndarray:
        x = np.arange(-self.window_halfwidth, self.window_halfwidth + 1, dtype=np.float64)
        envelope = np.exp(-0.5 * (x / self.sigma) ** 2)
        real = envelope * np.cos(2 * np.pi * x / self.wavelength)
        imag = envelope * np.sin(2 * np.pi * x / self.wavelength)
        real -= real.mean()
        return real + 1j * imag


@dataclass
class PolarIris:
    intensities: np.ndarray
    valid: np.ndarray

    @property
    def radial_res(self) -> int:
        return self.intensities.shape[0]

    @property
    def angular_res(self) -> int:
        return self.intensities.shape[1]

    def rotated(self, shift: int) -> "PolarIris":
        """Circularly shift along the angular axis (sample j moves to j + shift)."""
        return PolarIris(np.roll(self.intensities, shift, axis=1), np.roll(self.valid, shift, axis=1))


@dataclass
class IrisCode:
    """Phase bits and validity mask, each shaped (2, radial_code, angular_res).

    Plane 0 holds the real-part signs, plane 1 the imaginary-part signs.
    """

    bits: np.ndarray
    mask_bits: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.mask_bits = np.asarray(self.mask_bits, dtype=bool)
        if self.bits.shape != self.mask_bits.shape or self.bits.ndim != 3 or self.bits.shape[0] != 2:
            raise ValueError(f"bad iris code shapes {self.bits.shape} / {self.mask_bits.shape}")

    @property
    def radial_code(self) -> int:
        return self.bits.shape[1]

    @property
    def angular_res(self) -> int:
        return self.bits.shape[2]

    def rotated(self, shift: int) -> "IrisCode":
        return IrisCode(
            np.roll(self.bits, shift, axis=2), np.roll(self.mask_bits, shift, axis=2), dict(self.metadata)
        )


def code_length(code: IrisCode) -> int:
    """Number of usable (unmasked) bits."""
    return int(np.count_nonzero(code.mask_bits))


def sample_points(geometry: IrisGeometry, radial_res: int, angular_res: int) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian (row, col) sample positions of the polar grid.

    Angle j is ``j * 360 / angular_res`` degrees counter-clockwise from
    3 o'clock. Radial samples sit at the centres of ``radial_res`` equal
    bands between the pupil boundary and the iris boundary, interpolating
    linearly between the two (possibly non-concentric) circles.
    """
    theta = np.arange(angular_res) * (2 * np.pi / angular_res)
    r = (np.arange(radial_res) + 0.5) / radial_res
    cos, sin = np.cos(theta)[None, :], np.sin(theta)[None, :]
    p, s = geometry.pupil, geometry.iris
    inner_row = p.row - p.radius * sin
    inner_col = p.col + p.radius * cos
    outer_row = s.row - s.radius * sin
    outer_col = s.col + s.radius * cos
    rr = r[:, None]
    return (1 - rr) * inner_row + rr * outer_row, (1 - rr) * inner_col + rr * outer_col


def normalize(
    image: EyeImage,
    masks: SegmentationMasks,
    radial_res: int = 16,
    angular_res: int = 200,
    geometry: IrisGeometry | None = None,
) -> PolarIris:
    """Unwrap the iris annulus onto a (radial_res, angular_res) grid.

    Intensities are bilinearly interpolated. A sample is valid when its
    nearest pixel is iris, not pupil, inside the eyeball and not eyelash.
    """
    geo = geometry or iris_geometry(masks)
    rows, cols = sample_points(geo, radial_res, angular_res)
    pixels = image.pixels.astype(np.float64)
    intensities = ndimage.map_coordinates(pixels, [rows, cols], order=1, mode="nearest")
    usable = masks.iris & ~masks.pupil & masks.eyeball & ~masks.eyelash
    h, w = usable.shape
    ri = np.floor(rows + 0.5).astype(np.intp)
    ci = np.floor(cols + 0.5).astype(np.intp)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    valid = np.zeros(rows.shape, dtype=bool)
    valid[inside] = usable[ri[inside], ci[inside]]
    return PolarIris(intensities, valid)


def _circular_window(values: np.ndarray, weights: np.ndarray, halfwidth: int) -> np.ndarray:
    """out[..., j] = sum_k weights[k] * values[..., j + k - halfwidth], wrapping in j."""
    out = np.zeros(values.shape, dtype=np.result_type(values, weights))
    for k, wk in enumerate(weights):
        out += wk * np.roll(values, halfwidth - k, axis=-1)
    return out


def encode(polar: PolarIris, params: GaborParams | None = None) -> IrisCode:
    """Quantize Gabor phase into two bits per code cell.

    Rows are averaged in groups of ``radial_pool``; a pooled sample is valid
    only if all its rows are. A code cell is masked when any sample under its
    kernel is invalid or when the response magnitude is at or below
    ``magnitude_floor`` times the standard deviation of the valid intensities.

    Raises:
        EmptyCode: if the polar grid has no valid samples.
    """
    params = params or GaborParams(radial_res=polar.radial_res, angular_res=polar.angular_res)
    if not polar.valid.any():
        raise EmptyCode("polar grid has no valid samples")
    pool = params.radial_pool
    n_rows = polar.radial_res // pool
    if n_rows == 0:
        raise ValueError(f"radial_res {polar.radial_res} is smaller than radial_pool {pool}")
    grid = polar.intensities[: n_rows * pool].reshape(n_rows, pool, -1).mean(axis=1)
    ok = polar.valid[: n_rows * pool].reshape(n_rows, pool, -1).all(axis=1)

    kernel = params.kernel()
    hw = params.window_halfwidth
    response = _circular_window(np.where(ok, grid, 0.0), kernel, hw)
    window_ok = _circular_window(ok.astype(np.int64), np.ones(2 * hw + 1, dtype=np.int64), hw) == 2 * hw + 1

    valid_px = polar.intensities[polar.valid]
    # the absolute term keeps rounding noise on flat regions below the floor
    floor = params.magnitude_floor * float(valid_px.std()) + 1e-9 * (1.0 + float(np.abs(valid_px).max()))
    strong = np.abs(response) > floor

    bits = np.stack([response.real > 0, response.imag > 0])
    mask = np.broadcast_to(window_ok & strong, bits.shape).copy()
    meta = {
        "wavelength": params.wavelength,
        "sigma": params.sigma,
        "window_halfwidth": hw,
        "radial_res": polar.radial_res,
        "angular_res": polar.angular_res,
        "radial_pool": pool,
    }
    return IrisCode(bits, mask, meta)


def encode_capture(image: EyeImage, masks: SegmentationMasks, params: GaborParams | None = None) -> IrisCode:
    params = params or GaborParams()
    polar = normalize(image, masks, params.radial_res, params.angular_res)
    return encode(polar, params)


# --------------------------------------------------------------------------
# Code files


def write_code(path, code: IrisCode) -> None:
    header = CODE_MAGIC + struct.pack("<BII", CODE_VERSION, code.radial_code, code.angular_res)
    body = np.packbits(code.bits.ravel(), bitorder="little").tobytes()
    mask = np.packbits(code.mask_bits.ravel(), bitorder="little").tobytes()
    Path(path).write_bytes(header + body + mask)


def read_code(path) -> IrisCode:
    data = Path(path).read_bytes()
    if data[:4] != CODE_MAGIC:
        raise ValueError(f"{path}: bad code magic {data[:4]!r}")
    version, radial, angular = struct.unpack_from("<BII", data, 4)
    if version != CODE_VERSION:
        raise ValueError(f"{path}: unsupported code version {version}")
    nbits = 2 * radial * angular
    nbytes = (nbits + 7) // 8
    payload = np.frombuffer(data, dtype=np.uint8, offset=13)
    if payload.size != 2 * nbytes:
        raise ValueError(f"{path}: expected {2 * nbytes} payload bytes, found {payload.size}")
    shape = (2, radial, angular)
    bits = np.unpackbits(payload[:nbytes], count=nbits, bitorder="little").reshape(shape)
    mask = np.unpackbits(payload[nbytes:], count=nbits, bitorder="little").reshape(shape)
    return IrisCode(bits, mask)
