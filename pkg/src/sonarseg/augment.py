"""Joint image/mask augmentation: flips, rotation, shifts and crop-resize.

Each transform fires independently with ``probability``. Rotation, shift and
crop are composed into one affine map and resampled once (bilinear, zero fill);
masks are re-binarized at 0.5 afterwards. Flips are exact index reversals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .sonar import MaskImage, SamplePair, SonarImage

ROTATION_DEG = 20.0
SHIFT_FRACTION = 0.2
CROP_MIN_FRACTION = 0.8


@dataclass
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    shift: tuple = (0.0, 0.0)  # (rows, cols) as fractions of height and width
    crop: tuple = (1.0, 1.0, 0.0, 0.0)  # (height frac, width frac, row offset frac, col offset frac)

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.has_affine)

    @property
    def has_affine(self) -> bool:
        return self.angle_deg != 0.0 or self.shift != (0.0, 0.0) or self.crop[:2] != (1.0, 1.0)


def draw_params(rng: np.random.Generator, probability: float = 0.5) -> AugmentParams:
    p = AugmentParams()
    # fixed draw order keeps a seed's stream stable whatever fires
    fire = rng.random(5) < probability
    angle = rng.uniform(-ROTATION_DEG, ROTATION_DEG)
    shift = tuple(rng.uniform(-SHIFT_FRACTION, SHIFT_FRACTION, 2))
    fh, fw = rng.uniform(CROP_MIN_FRACTION, 1.0, 2)
    oh, ow = rng.uniform(0.0, 1.0, 2)
    p.hflip = bool(fire[0])
    p.vflip = bool(fire[1])
    if fire[2]:
        p.angle_deg = float(angle)
    if fire[3]:
        p.shift = (float(shift[0]), float(shift[1]))
    if fire[4]:
        p.crop = (float(fh), float(fw), float(oh * (1 - fh)), float(ow * (1 - fw)))
    return p


def affine_for(params: AugmentParams, shape) -> tuple:
    """Matrix and offset mapping output (row, col) to input (row, col)."""
    h, w = shape
    fh, fw, oh, ow = params.crop
    # crop-resize: output -> crop window
    s = np.diag([fh, fw])
    t = np.array([oh * h, ow * w])
    # undo the shift
    t = t - np.array([params.shift[0] * h, params.shift[1] * w])
    # undo the rotation about the raster center
    a = np.deg2rad(params.angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    matrix = rot @ s
    offset = rot @ (t - c) + c
    return matrix, offset


def _warp(a: np.ndarray, matrix, offset) -> np.ndarray:
    return ndimage.affine_transform(a, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def hflip(sample: SamplePair) -> SamplePair:
    return SamplePair(SonarImage(sample.image.pixels[:, ::-1].copy(), sample.image.fan_mask[:, ::-1].copy()),
                      MaskImage(sample.mask.pixels[:, ::-1].copy()), sample.id)


def vflip(sample: SamplePair) -> SamplePair:
    return SamplePair(SonarImage(sample.image.pixels[::-1].copy(), sample.image.fan_mask[::-1].copy()),
                      MaskImage(sample.mask.pixels[::-1].copy()), sample.id)


def apply(sample: SamplePair, params: AugmentParams) -> SamplePair:
    out = SamplePair(SonarImage(sample.image.pixels.copy(), sample.image.fan_mask.copy()),
                     MaskImage(sample.mask.pixels.copy()), sample.id)
    if params.hflip:
        out = hflip(out)
    if params.vflip:
        out = vflip(out)
    if params.has_affine:
        matrix, offset = affine_for(params, out.image.pixels.shape)
        img = np.clip(_warp(out.image.pixels.astype(np.float64), matrix, offset), 0.0, 1.0)
        fan = _warp(out.image.fan_mask.astype(np.float64), matrix, offset) > 0.5
        mask = (_warp(out.mask.pixels.astype(np.float64), matrix, offset) > 0.5) & fan
        img[~fan] = 0.0
        out = SamplePair(SonarImage(img, fan), MaskImage(mask.astype(np.uint8)), sample.id)
    return out


def augment(sample: SamplePair, rng: np.random.Generator, probability: float = 0.5) -> SamplePair:
    return apply(sample, draw_params(rng, probability))
