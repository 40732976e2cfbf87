"""Training driver: fixed split, per-epoch validation, log and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ParameterError
from .metrics import ConfusionCounts, evaluate
from .model import SegmentationModel, predict_mask, save_weights
from .optim import BATCH_SIZE, LEARNING_RATE, RAdam, bce_loss, make_batch, train_epoch
from .sonar import from_tensor
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = "# epoch train_loss val_loss val_accuracy val_precision val_recall val_f1"


def split_dataset(samples: Sequence, fraction: float = 0.8) -> tuple:
    """Deterministic split: the first ``fraction`` of the id-sorted samples train."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError("split fraction must be in (0, 1]")
    ordered = sorted(samples, key=lambda s: s.id)
    k = int(round(fraction * len(ordered)))
    return ordered[:k], ordered[k:]


@dataclass
class ValidationResult:
    loss: float
    counts: ConfusionCounts
    probabilities: list = field(default_factory=list)


def predict_samples(model: SegmentationModel, samples: Sequence, batch_size: int = BATCH_SIZE) -> list:
    """Probability rasters (H x W) for each sample, eval mode."""
    out = []
    for start in range(0, len(samples), batch_size):
        x, _ = make_batch(samples[start:start + batch_size], model.dtype)
        probs = model.predict_proba(x)
        out.extend(from_tensor(p) for p in probs)
    return out


def validate(model: SegmentationModel, samples: Sequence, threshold: float = 0.5,
             batch_size: int = BATCH_SIZE, keep_probabilities: bool = False) -> ValidationResult:
    if len(samples) == 0:
        raise DataError("validation set is empty")
    was_training = model.training
    model.eval()
    total = 0.0
    counts = ConfusionCounts()
    kept = []
    try:
        with no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                x, y = make_batch(chunk, model.dtype)
                pred = model(Tensor(x))
                total += bce_loss(pred, y).value * len(chunk)
                for s, p in zip(chunk, pred.data):
                    prob = from_tensor(p)
                    counts = counts + evaluate(predict_mask(prob, threshold), s.mask, fan=s.image.fan_mask)
                    if keep_probabilities:
                        kept.append(prob)
    finally:
        model.train(was_training)
    return ValidationResult(total / len(samples), counts, kept)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def line(self) -> str:
        vals = [self.train_loss, self.val_loss, self.val_accuracy, self.precision, self.recall, self.f1]
        return f"{self.epoch} " + " ".join("nan" if v is None else repr(float(v)) for v in vals)


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_loss: float
    model: SegmentationModel


def fit(model: SegmentationModel, train_set: Sequence, val_set: Sequence, epochs: int,
        seed: int = 0, lr: float = LEARNING_RATE, batch_size: int = BATCH_SIZE,
        augment: bool = True, threshold: float = 0.5, out_dir=None) -> FitResult:
    """Train for ``epochs`` epochs. With ``out_dir`` writes train.log, best.sseg and final.sseg."""
    if epochs < 0:
        raise ParameterError("epochs must be non-negative")
    if len(train_set) == 0:
        raise DataError("training set is empty")
    ss = np.random.SeedSequence([seed, 0x7A11])
    data_ss, drop_ss = ss.spawn(2)
    rng = np.random.default_rng(data_ss)
    model.set_dropout_rng(np.random.default_rng(drop_ss))
    opt = RAdam(model.parameters(), lr=lr)

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.log", "w")
        logf.write(LOG_HEADER + "\n")
        save_weights(model, out / "best.sseg")
    history = []
    best_loss, best_epoch = float("inf"), 0
    try:
        for epoch in range(1, epochs + 1):
            stats = train_epoch(model, train_set, opt, rng, batch_size, augment)
            if len(val_set):
                v = validate(model, val_set, threshold, batch_size)
                rec = EpochRecord(epoch, stats.loss, v.loss, v.counts.accuracy,
                                  v.counts.precision, v.counts.recall, v.counts.f1)
                score = v.loss
            else:
                rec = EpochRecord(epoch, stats.loss, float("nan"), None, None, None, None)
                score = stats.loss
            history.append(rec)
            log.info("epoch %d train %.5f val %.5f f1 %s", epoch, rec.train_loss, rec.val_loss, rec.f1)
            if logf is not None:
                logf.write(rec.line() + "\n")
                logf.flush()
            if score < best_loss:
                best_loss, best_epoch = score, epoch
                if out is not None:
                    save_weights(model, out / "best.sseg")
    finally:
        if logf is not None:
            logf.close()
    if out is not None:
        save_weights(model, out / "final.sseg")
    return FitResult(history, best_epoch, best_loss, model)


def read_log(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        rows.append([int(parts[0])] + [float(p) for p in parts[1:]])
    return rows
