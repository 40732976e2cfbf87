"""Binary cross-entropy, the RAdam optimizer and one training epoch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import augment as augment_sample
from .errors import DataError, DimensionError, ParameterError
from .sonar import to_tensor
from .tensor import Tensor

LEARNING_RATE = 0.5e-4
BETAS = (0.9, 0.999)
EPS = 1e-8
PROB_CLAMP = 1e-7
BATCH_SIZE = 4


@dataclass
class LossValue:
    loss: Tensor
    pixel_map: np.ndarray

    @property
    def value(self) -> float:
        return float(self.loss.data)


def bce_loss(pred: Tensor, target) -> LossValue:
    """Mean over pixels of -[y log p + (1 - y) log(1 - p)], p clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target)
    if y.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("target must be binary")
    y = y.astype(pred.dtype)
    p = T.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    yt = Tensor(y)
    pos = T.mul(yt, T.log(p))
    neg = T.mul(Tensor(1.0 - y), T.log(1.0 - p))
    pixel = T.neg(T.add(pos, neg))
    return LossValue(T.tensor_mean(pixel), pixel.data)


def rho_infinity(beta2: float) -> float:
    return 2.0 / (1.0 - beta2) - 1.0


class RAdam:
    """Adam with variance rectification of the adaptive step.

    While the approximated SMA length ``rho_t`` is at most 4 the update is the
    bias-corrected momentum step ``lr * m_hat``; afterwards it is
    ``lr * r_t * m_hat / (sqrt(v_hat) + eps)``.
    ``rectify=False`` always takes the momentum step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = LEARNING_RATE,
                 betas: tuple = BETAS, eps: float = EPS, rectify: bool = True):
        if lr < 0:
            raise ParameterError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.rectify = rectify
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = rho_infinity(self.beta2)

    def rho(self, t: int) -> float:
        b2t = self.beta2 ** t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ParameterError(f"parameter {p.name or i} has no gradient")
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rho_t = self.rho(t)
        adaptive = self.rectify and rho_t > 4.0
        if adaptive:
            r = math.sqrt((rho_t - 4) * (rho_t - 2) * self.rho_inf
                          / ((self.rho_inf - 4) * (self.rho_inf - 2) * rho_t))
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            if adaptive:
                update = (self.lr * r) * m_hat / (np.sqrt(v / bc2) + self.eps)
            else:
                update = self.lr * m_hat
            p.data = p.data - update.astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


@dataclass
class EpochStats:
    loss: float
    accuracy: float
    batches: int


def make_batch(samples, dtype=np.float32) -> tuple:
    x = np.stack([to_tensor(s.image.pixels, dtype) for s in samples])
    y = np.stack([to_tensor(s.mask.pixels, dtype) for s in samples])
    return x, y


def train_epoch(model, dataset: Sequence, optimizer: RAdam, rng: np.random.Generator,
                batch_size: int = BATCH_SIZE, augment: bool = True) -> EpochStats:
    """One pass over ``dataset`` in shuffled mini-batches."""
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if batch_size <= 0:
        raise ParameterError("batch size must be positive")
    model.train()
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    correct = 0
    pixels = 0
    batches = 0
    for start in range(0, len(order), batch_size):
        chosen = [dataset[i] for i in order[start:start + batch_size]]
        if augment:
            chosen = [augment_sample(s, rng) for s in chosen]
        x, y = make_batch(chosen, model.dtype)
        pred = model(Tensor(x))
        lv = bce_loss(pred, y)
        model.zero_grad()
        lv.loss.backward()
        optimizer.step()
        total_loss += lv.value * len(chosen)
        correct += int(np.count_nonzero((pred.data > 0.5) == (y > 0.5)))
        pixels += y.size
        batches += 1
    return EpochStats(total_loss / len(dataset), correct / pixels, batches)
