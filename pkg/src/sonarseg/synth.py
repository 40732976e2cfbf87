"""Seeded synthetic MBES scenes with complete fish masks.

Scenes are rendered on the polar (beam x bin) grid and projected with the same
code path as real frames. Fish are small ellipses grouped into schools; clutter
(surface reflection band, bottom ridge, vessel) is bright but never labeled.
Masks are evaluated analytically at raster pixel centers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, ParameterError
from .sonar import (APERTURE_DEG, FREQUENCY_HZ, RANGE_MAX_M, Geometry, MaskImage, PolarFrame,
                    SamplePair, polar_to_cartesian, write_sample)

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    school_count: tuple = (2, 4)
    fish_per_school: tuple = (30, 65)
    fish_height_px: tuple = (2.0, 4.0)
    fish_width_px: tuple = (3.0, 8.0)
    fish_range_m: tuple = (3.0, 18.0)
    school_spread_m: tuple = (0.8, 2.2)
    fish_intensity: tuple = (0.45, 0.9)
    include_surface_reflection: bool = True
    include_bottom_return: bool = True
    include_vessel: bool = True
    clutter_probability: float = 0.6
    speckle_strength: float = 0.5
    noise_floor: float = 0.06
    beams: int = 512
    bins: int = 512
    width: int = 320
    height: int = 128
    range_max: float = RANGE_MAX_M
    aperture_deg: float = APERTURE_DEG
    frequency_hz: float = FREQUENCY_HZ

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("raster size must be positive")
        if self.beams < 2 or self.bins < 2:
            raise ParameterError("need at least 2 beams and 2 bins")
        for name in ("school_count", "fish_per_school", "fish_height_px", "fish_width_px",
                     "fish_range_m", "school_spread_m", "fish_intensity"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ParameterError(f"{name} must be a non-negative (low, high) range")
        for name in ("fish_height_px", "fish_width_px", "school_spread_m"):
            if getattr(self, name)[0] <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("clutter_probability", "speckle_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.noise_floor < 0:
            raise ParameterError("noise_floor must be non-negative")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.width, self.height, self.range_max, self.aperture_deg)


def wittling_spec(seed: int = 0) -> SceneSpec:
    """Test-set preset: bigger, more scattered fish in small schools at closer range."""
    return SceneSpec(seed=seed, school_count=(3, 6), fish_per_school=(3, 10),
                     fish_height_px=(3.0, 5.0), fish_width_px=(6.0, 10.0),
                     fish_range_m=(2.0, 10.0), school_spread_m=(1.5, 3.5))


def clutter_only_spec(seed: int = 0) -> SceneSpec:
    """Vessel, surface band and bottom ridge in every scene, no fish."""
    return SceneSpec(seed=seed, school_count=(0, 0), clutter_probability=1.0)


@dataclass
class Fish:
    row: float
    col: float
    height: float
    width: float
    tilt: float = 0.0
    intensity: float = 0.7


@dataclass
class Scene:
    frame: PolarFrame
    mask: MaskImage
    clutter_mask: np.ndarray
    fish: list = field(default_factory=list)


def _cell_positions(spec: SceneSpec):
    geom = spec.geometry
    half = np.deg2rad(spec.aperture_deg) / 2.0
    theta = np.linspace(-half, half, spec.beams)
    r = np.linspace(0.0, spec.range_max, spec.bins)
    row, col = geom.to_pixel(r[None, :], theta[:, None])
    return r, theta, row, col


def _ellipse(drow, dcol, fish: Fish):
    c, s = np.cos(fish.tilt), np.sin(fish.tilt)
    u = dcol * c + drow * s
    v = -dcol * s + drow * c
    return (u / (fish.width / 2.0)) ** 2 + (v / (fish.height / 2.0)) ** 2 <= 1.0


def _fish_raster_footprint(fish: Fish, geom: Geometry, fan: np.ndarray) -> tuple:
    ext = max(fish.width, fish.height) / 2.0 + 1.0
    r0 = max(int(np.floor(fish.row - ext)), 0)
    r1 = min(int(np.ceil(fish.row + ext)) + 1, geom.height)
    c0 = max(int(np.floor(fish.col - ext)), 0)
    c1 = min(int(np.ceil(fish.col + ext)) + 1, geom.width)
    if r0 >= r1 or c0 >= c1:
        return (slice(0, 0), slice(0, 0)), np.zeros((0, 0), bool)
    rows, cols = np.mgrid[r0:r1, c0:c1]
    inside = _ellipse(rows + 0.5 - fish.row, cols + 0.5 - fish.col, fish) & fan[r0:r1, c0:c1]
    return (slice(r0, r1), slice(c0, c1)), inside


def _paint_fish_polar(grid, fish: Fish, spec: SceneSpec, r, theta, row, col):
    ext = (max(fish.width, fish.height) / 2.0 + 1.0) / spec.geometry.px_per_m
    rc = np.hypot(fish.col - spec.width / 2.0, spec.height - fish.row) / spec.geometry.px_per_m
    tc = np.arctan2(fish.col - spec.width / 2.0, spec.height - fish.row)
    b0, b1 = np.searchsorted(r, [rc - ext, rc + ext])
    dth = ext / max(rc - ext, 1e-3)
    a0, a1 = np.searchsorted(theta, [tc - dth, tc + dth])
    a1 = min(a1 + 1, spec.beams)
    b1 = min(b1 + 1, spec.bins)
    if a0 >= a1 or b0 >= b1:
        return
    sub_r = row[a0:a1, b0:b1] - fish.row
    sub_c = col[a0:a1, b0:b1] - fish.col
    hit = _ellipse(sub_r, sub_c, fish)
    block = grid[a0:a1, b0:b1]
    block[hit] = np.maximum(block[hit], fish.intensity)


def _clutter_layer(spec: SceneSpec, rng: np.random.Generator, r, theta, row, col) -> np.ndarray:
    layer = np.zeros((spec.beams, spec.bins))
    rr = r[None, :]
    th = theta[:, None]
    p = spec.clutter_probability
    if spec.include_surface_reflection and rng.random() < p:
        # bright band near the apex with slow azimuthal modulation
        center = rng.uniform(0.8, 3.0)
        width = rng.uniform(0.25, 0.7)
        level = rng.uniform(0.5, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        mod = 0.7 + 0.3 * np.sin(3.0 * th + phase)
        layer = np.maximum(layer, level * mod * np.exp(-0.5 * ((rr - center) / width) ** 2))
    if spec.include_bottom_return and rng.random() < p:
        # smooth ridge whose range varies with azimuth, weaker seabed texture beyond it
        base = rng.uniform(11.0, 18.5)
        slope = rng.uniform(-3.0, 3.0)
        curve = rng.uniform(-3.0, 3.0)
        ridge_r = base + slope * th + curve * th ** 2
        width = rng.uniform(0.3, 0.8)
        level = rng.uniform(0.4, 0.9)
        ridge = level * np.exp(-0.5 * ((rr - ridge_r) / width) ** 2)
        beyond = np.where(rr > ridge_r, 0.35 * level * np.exp(-(rr - ridge_r) / 2.5), 0.0)
        layer = np.maximum(layer, np.maximum(ridge, beyond))
    if spec.include_vessel and rng.random() < p:
        half = np.deg2rad(spec.aperture_deg) / 2.0
        vr = rng.uniform(4.0, 17.0)
        vt = rng.uniform(-half + 0.2, half - 0.2)
        vrow, vcol = spec.geometry.to_pixel(vr, vt)
        vessel = Fish(float(vrow), float(vcol), rng.uniform(4.0, 8.0), rng.uniform(28.0, 60.0),
                      rng.uniform(-0.3, 0.3), rng.uniform(0.7, 1.0))
        hit = _ellipse(row - vessel.row, col - vessel.col, vessel)
        layer[hit] = np.maximum(layer[hit], vessel.intensity)
    return layer


def _sample_fish(spec: SceneSpec, rng: np.random.Generator) -> list:
    half = np.deg2rad(spec.aperture_deg) / 2.0
    geom = spec.geometry
    fish = []
    n_schools = rng.integers(spec.school_count[0], spec.school_count[1] + 1)
    for _ in range(n_schools):
        rc = rng.uniform(*spec.fish_range_m)
        tc = rng.uniform(-half * 0.85, half * 0.85)
        sr = rng.uniform(*spec.school_spread_m)
        st = rng.uniform(*spec.school_spread_m) / rc
        for _ in range(rng.integers(spec.fish_per_school[0], spec.fish_per_school[1] + 1)):
            fr = rc + sr * rng.standard_normal()
            ft = tc + st * rng.standard_normal()
            h = rng.uniform(*spec.fish_height_px)
            w = rng.uniform(*spec.fish_width_px)
            tilt = rng.uniform(-0.35, 0.35)
            inten = rng.uniform(*spec.fish_intensity)
            if not (0.5 < fr < spec.range_max - 0.3 and abs(ft) < half - 0.02):
                continue
            frow, fcol = geom.to_pixel(fr, ft)
            fish.append(Fish(float(frow), float(fcol), h, w, tilt, inten))
    return fish


def render_scene(spec: SceneSpec, rng: np.random.Generator, fish: Optional[list] = None) -> Scene:
    """Render one scene. ``fish`` overrides the sampled schools (clutter is still sampled)."""
    spec.validate()
    geom = spec.geometry
    fan = geom.fan_mask()
    r, theta, row, col = _cell_positions(spec)

    clutter = _clutter_layer(spec, rng, r, theta, row, col)
    clutter_img = polar_to_cartesian(PolarFrame(clutter, spec.range_max, spec.aperture_deg), geom,
                                     normalize=False).pixels
    clutter_mask = clutter_img > 0.05
    # keep a one-pixel moat so fish and clutter never share a labeled pixel
    moat = clutter_mask.copy()
    moat[1:] |= clutter_mask[:-1]
    moat[:-1] |= clutter_mask[1:]
    moat[:, 1:] |= clutter_mask[:, :-1]
    moat[:, :-1] |= clutter_mask[:, 1:]

    if fish is None:
        fish = _sample_fish(spec, rng)
    grid = clutter.copy()
    mask = np.zeros((geom.height, geom.width), dtype=np.uint8)
    placed = []
    for f in fish:
        sl, inside = _fish_raster_footprint(f, geom, fan)
        if not inside.any() or (moat[sl] & inside).any():
            continue
        mask[sl][inside] = 1
        _paint_fish_polar(grid, f, spec, r, theta, row, col)
        placed.append(f)

    if spec.speckle_strength > 0:
        s = spec.speckle_strength
        speckle = rng.rayleigh(np.sqrt(2.0 / np.pi), size=grid.shape)
        grid = grid * ((1.0 - s) + s * speckle)
    if spec.noise_floor > 0:
        floor = spec.noise_floor * (0.5 + r / spec.range_max)
        grid = grid + floor[None, :] * rng.exponential(1.0, size=grid.shape)

    frame = PolarFrame(grid, spec.range_max, spec.aperture_deg, spec.frequency_hz)
    return Scene(frame, MaskImage(mask), clutter_mask & fan, placed)


def generate_scene(spec: SceneSpec, rng: np.random.Generator):
    scene = render_scene(spec, rng)
    return scene.frame, scene.mask


def scene_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, index]))


def generate_sample(spec: SceneSpec, index: int) -> tuple:
    """Sample ``index`` of the corpus defined by ``spec`` (SamplePair, Scene)."""
    scene = render_scene(spec, scene_rng(spec, index))
    image = polar_to_cartesian(scene.frame, spec.geometry)
    return SamplePair(image, scene.mask, f"scene_{index:05d}"), scene


def generate_corpus(spec: SceneSpec, n: int, out_dir) -> list:
    """Write ``n`` image/mask pairs plus a manifest. Returns the sample ids."""
    if n <= 0:
        raise ParameterError("corpus size must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        sample, _ = generate_sample(spec, i)
        write_sample(sample, out)
        ids.append(sample.id)
    write_manifest(out / MANIFEST_NAME, spec, n)
    return ids


def write_manifest(path, spec: SceneSpec, n: int) -> None:
    lines = [f"format_version={MANIFEST_VERSION}", f"n={n}"]
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple:
    """Return ``(spec, n)`` from a manifest file."""
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    if int(values.pop("format_version", -1)) != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version")
    n = int(values.pop("n"))
    return spec_from_mapping(values), n


def spec_from_mapping(values: dict) -> SceneSpec:
    kwargs = {}
    defaults = SceneSpec()
    for f in dataclasses.fields(SceneSpec):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = getattr(defaults, f.name)
        if isinstance(default, bool):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, tuple):
            kwargs[f.name] = tuple(type(x)(float(p)) if isinstance(x, float) else int(float(p))
                                   for x, p in zip(default, raw.split(",")))
        else:
            kwargs[f.name] = type(default)(raw)
    unknown = set(values) - {f.name for f in dataclasses.fields(SceneSpec)}
    if unknown:
        raise DataError(f"unknown scene spec keys: {sorted(unknown)}")
    spec = SceneSpec(**kwargs)
    spec.validate()
    return spec


def regenerate_corpus(manifest_path, out_dir) -> list:
    spec, n = read_manifest(manifest_path)
    return generate_corpus(spec, n, out_dir)
