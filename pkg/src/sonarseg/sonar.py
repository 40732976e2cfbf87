"""MBES frames, fan projection onto the Cartesian raster, and dataset files.

Raster convention: 128 rows x 320 columns, sonar apex at the bottom-center,
range increasing upwards, the full ``range_max`` spanning the raster height.
Network tensors are the transpose (``1 x 320 x 128``), see :func:`to_tensor`.

On disk a dataset is two directories of 8-bit binary PGM (P5) files paired by
stem: ``images/<id>.pgm`` (intensity * 255) and ``masks/<id>.pgm`` (0/255).
Raw polar frames use the little-endian "MBES" format::

    magic b"MBES", u16 version, u16 beam_count, u32 bin_count,
    f32 range_max, f32 aperture_deg, f32 frequency_hz,
    beam_count * bin_count f32 intensities (beam-major)
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (BadDimensionsError, DataError, FormatError, MissingMaskError,
                     NonBinaryMaskError, ParameterError, StorageError, TruncatedFileError)

RASTER_W = 320
RASTER_H = 128
RANGE_MAX_M = 20.0
APERTURE_DEG = 130.0
FREQUENCY_HZ = 750e3

MBES_MAGIC = b"MBES"
MBES_VERSION = 1
_MBES_HEADER = struct.Struct("<4sHHIfff")


@dataclass(frozen=True)
class Geometry:
    """Raster size plus the fan it displays."""

    width: int = RASTER_W
    height: int = RASTER_H
    range_max: float = RANGE_MAX_M
    aperture_deg: float = APERTURE_DEG

    @property
    def radius_px(self) -> float:
        return float(self.height)

    @property
    def px_per_m(self) -> float:
        return self.radius_px / self.range_max

    def to_pixel(self, r_m, theta_rad):
        """(range, azimuth) -> (row, col) in continuous pixel coordinates (centers at .5)."""
        rpx = np.asarray(r_m) * self.px_per_m
        col = self.width / 2.0 + rpx * np.sin(theta_rad)
        row = self.height - rpx * np.cos(theta_rad)
        return row, col

    def polar_coords(self):
        """Range (m) and azimuth (rad, 0 = boresight, positive to the right) of every pixel center."""
        return _polar_coords(self)

    def fan_mask(self) -> np.ndarray:
        return _fan_mask(self).copy()

    def sector_fraction(self) -> float:
        """Analytic fraction of the raster covered by the fan."""
        area = np.deg2rad(self.aperture_deg) / 2.0 * self.radius_px ** 2
        return float(area / (self.width * self.height))


DEFAULT_GEOMETRY = Geometry()


@functools.lru_cache(maxsize=16)
def _polar_coords(geom: Geometry):
    rows, cols = np.mgrid[0:geom.height, 0:geom.width]
    dx = cols + 0.5 - geom.width / 2.0
    dy = geom.height - (rows + 0.5)
    r = np.hypot(dx, dy) / geom.px_per_m
    theta = np.arctan2(dx, dy)
    r.flags.writeable = False
    theta.flags.writeable = False
    return r, theta


@functools.lru_cache(maxsize=16)
def _fan_mask(geom: Geometry) -> np.ndarray:
    r, theta = _polar_coords(geom)
    half = np.deg2rad(geom.aperture_deg) / 2.0
    m = (r <= geom.range_max) & (np.abs(theta) <= half)
    m.flags.writeable = False
    return m


@dataclass
class PolarFrame:
    """One ping: ``intensities[beam, bin]``, beams spread evenly across the aperture
    (first beam at -aperture/2), bins evenly over ``[0, range_max]``."""

    intensities: np.ndarray
    range_max: float = RANGE_MAX_M
    aperture_deg: float = APERTURE_DEG
    frequency_hz: float = FREQUENCY_HZ

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 2:
            raise ParameterError("intensities must be a beams x bins grid")
        if np.any(self.intensities < 0) or not np.all(np.isfinite(self.intensities)):
            raise ParameterError("intensities must be finite and non-negative")
        if not 0.0 < self.aperture_deg <= 180.0:
            raise ParameterError(f"aperture must lie in (0, 180], got {self.aperture_deg}")
        if self.range_max <= 0:
            raise ParameterError("range_max must be positive")

    @property
    def beam_count(self) -> int:
        return self.intensities.shape[0]

    @property
    def bin_count(self) -> int:
        return self.intensities.shape[1]

    def beam_angles(self) -> np.ndarray:
        half = np.deg2rad(self.aperture_deg) / 2.0
        return np.linspace(-half, half, self.beam_count)

    def bin_ranges(self) -> np.ndarray:
        return np.linspace(0.0, self.range_max, self.bin_count)


@dataclass
class SonarImage:
    pixels: np.ndarray
    fan_mask: np.ndarray = field(default_factory=DEFAULT_GEOMETRY.fan_mask)


@dataclass
class MaskImage:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)


@dataclass
class SamplePair:
    image: SonarImage
    mask: MaskImage
    id: str = ""


def to_tensor(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """128 x 320 raster -> 1 x 320 x 128 network input."""
    return np.ascontiguousarray(np.asarray(pixels, dtype=dtype).T[None])


def from_tensor(arr: np.ndarray) -> np.ndarray:
    """1 x 320 x 128 (or 320 x 128) network map -> 128 x 320 raster."""
    a = np.asarray(arr)
    if a.ndim == 3:
        a = a[0]
    return np.ascontiguousarray(a.T)


# ----------------------------------------------------------------------
# projection


@functools.lru_cache(maxsize=8)
def _projection_table(beams: int, bins: int, range_max: float, aperture_deg: float, geom: Geometry):
    g = Geometry(geom.width, geom.height, range_max, aperture_deg)
    r, theta = _polar_coords(g)
    inside = _fan_mask(g)
    half = np.deg2rad(aperture_deg) / 2.0
    fb = np.clip(r / range_max * (bins - 1), 0, bins - 1)
    fa = np.clip((theta + half) / (2 * half) * (beams - 1), 0, beams - 1)
    b0 = np.minimum(np.floor(fb).astype(np.intp), bins - 2)
    a0 = np.minimum(np.floor(fa).astype(np.intp), beams - 2)
    wb = fb - b0
    wa = fa - a0
    idx = np.nonzero(inside)
    return inside, idx, a0[idx], b0[idx], wa[idx], wb[idx]


def polar_to_cartesian(frame: PolarFrame, geometry: Geometry = DEFAULT_GEOMETRY,
                       normalize: bool = True) -> SonarImage:
    """Project a polar frame into the raster by bilinear sampling in (beam, bin) space.

    Intensities are divided by the frame maximum (an all-zero frame stays zero).
    Pixels outside the fan are exactly 0.
    """
    if frame.beam_count < 2 or frame.bin_count < 2:
        raise ParameterError("need at least 2 beams and 2 bins to interpolate")
    inside, idx, a0, b0, wa, wb = _projection_table(
        frame.beam_count, frame.bin_count, float(frame.range_max), float(frame.aperture_deg), geometry)
    grid = frame.intensities
    if normalize:
        peak = grid.max()
        grid = grid / peak if peak > 0 else np.zeros_like(grid)
    # lerp form: a constant neighbourhood reproduces its value exactly
    g00, g01 = grid[a0, b0], grid[a0, b0 + 1]
    g10, g11 = grid[a0 + 1, b0], grid[a0 + 1, b0 + 1]
    v0 = g00 + wb * (g01 - g00)
    v1 = g10 + wb * (g11 - g10)
    v = v0 + wa * (v1 - v0)
    pixels = np.zeros((geometry.height, geometry.width))
    pixels[idx] = v
    if normalize:
        np.clip(pixels, 0.0, 1.0, out=pixels)
    return SonarImage(pixels, inside.copy())


# ----------------------------------------------------------------------
# files


def write_pgm(path, pixels: np.ndarray) -> None:
    a = np.asarray(pixels)
    if a.dtype != np.uint8:
        raise ParameterError("PGM writer expects uint8 pixels")
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: incomplete PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise TruncatedFileError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def quantize_image(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_sample(sample: SamplePair, directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    write_pgm(d / "images" / f"{sample.id}.pgm", quantize_image(sample.image.pixels))
    write_pgm(d / "masks" / f"{sample.id}.pgm", (sample.mask.pixels > 0).astype(np.uint8) * 255)


def read_image(path, geometry: Geometry = DEFAULT_GEOMETRY) -> SonarImage:
    raw = read_pgm(path)
    if raw.shape != (geometry.height, geometry.width):
        raise BadDimensionsError(f"{path}: expected {geometry.width}x{geometry.height}, got {raw.shape[1]}x{raw.shape[0]}")
    return SonarImage(raw.astype(np.float64) / 255.0, geometry.fan_mask())


def read_mask(path, geometry: Geometry = DEFAULT_GEOMETRY) -> MaskImage:
    raw = read_pgm(path)
    if raw.shape != (geometry.height, geometry.width):
        raise BadDimensionsError(f"{path}: expected {geometry.width}x{geometry.height}, got {raw.shape[1]}x{raw.shape[0]}")
    if not np.all((raw == 0) | (raw == 255)):
        raise NonBinaryMaskError(f"{path}: mask values must be 0 or 255")
    return MaskImage((raw == 255).astype(np.uint8))


def load_dataset(directory, geometry: Geometry = DEFAULT_GEOMETRY) -> list:
    """Load every ``images/<id>.pgm`` with its mask, ordered by id."""
    d = Path(directory)
    img_dir, mask_dir = d / "images", d / "masks"
    if not img_dir.is_dir():
        raise DataError(f"{d} has no images/ directory")
    samples = []
    for img_path in sorted(img_dir.glob("*.pgm")):
        sid = img_path.stem
        mask_path = mask_dir / f"{sid}.pgm"
        if not mask_path.exists():
            raise MissingMaskError(f"image {sid!r} has no mask at {mask_path}")
        samples.append(SamplePair(read_image(img_path, geometry), read_mask(mask_path, geometry), sid))
    return samples


def write_mbes(path, frame: PolarFrame) -> None:
    header = _MBES_HEADER.pack(MBES_MAGIC, MBES_VERSION, frame.beam_count, frame.bin_count,
                               frame.range_max, frame.aperture_deg, frame.frequency_hz)
    Path(path).write_bytes(header + frame.intensities.astype("<f4").tobytes())


def read_mbes(path) -> PolarFrame:
    buf = Path(path).read_bytes()
    if len(buf) < _MBES_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, beams, bins, rmax, ap, freq = _MBES_HEADER.unpack_from(buf)
    if magic != MBES_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MBES_VERSION:
        raise FormatError(f"{path}: unsupported MBES version {version}")
    n = beams * bins
    payload = buf[_MBES_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} intensities")
    grid = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(beams, bins)
    return PolarFrame(grid.astype(np.float64), float(rmax), float(ap), float(freq))
