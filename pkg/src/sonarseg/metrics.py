"""Pixel-level confusion counts with fish as the positive class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .sonar import DEFAULT_GEOMETRY, MaskImage


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    # each ratio is None when its denominator is zero
    @property
    def accuracy(self) -> Optional[float]:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> Optional[float]:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    @property
    def iou(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def false_positive_rate(self) -> Optional[float]:
        return _ratio(self.fp, self.fp + self.tn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "n": self.total,
                "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "iou": self.iou}


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def _pixels(m) -> np.ndarray:
    return np.asarray(m.pixels if isinstance(m, MaskImage) else m)


def evaluate(pred, truth, restrict_to_fan: bool = True, fan: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Count pixel outcomes; with ``restrict_to_fan`` only in-fan pixels are counted."""
    p = _pixels(pred).astype(bool)
    t = _pixels(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if restrict_to_fan:
        region = fan if fan is not None else DEFAULT_GEOMETRY.fan_mask()
        if region.shape != p.shape:
            raise DimensionError(f"fan mask {region.shape} does not match masks {p.shape}")
        p = p[region]
        t = t[region]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def format_metric(v) -> str:
    return "undefined" if v is None else f"{v:.6f}"
