"""Network building blocks: Conv Layer, Up-sample and Sigmoid head."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

LEAKY_SLOPE = 0.2
DROPOUT_RATE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def he_normal_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Draw weights from N(0, sqrt(2 / fan_in))."""
    if fan_in <= 0:
        raise ParameterError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    """Minimal container with ordered parameters, buffers and a train/eval flag."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(prefix + cname + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ParameterError("only odd kernel sizes keep the spatial size")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.padding = (kernel - 1) // 2
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param("weight", he_normal_init((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, stride=1)


class ConvTranspose2d(Module):
    """2x2 stride-2 transposed convolution."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        # each output pixel sees in_ch inputs through one kernel tap
        self.weight = self.add_param("weight", he_normal_init((in_ch, out_ch, 2, 2), in_ch, rng, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.transpose_conv2d(x, self.weight, self.bias, stride=2)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=BN_MOMENTUM, eps=BN_EPS)


class Dropout(Module):
    def __init__(self, rate: float = DROPOUT_RATE):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.training, self.rng)


class ConvLayerBlock(Module):
    """conv -> BN -> dropout -> conv -> BN -> leaky ReLU, all 3x3 with padding 1.

    With ``batch_norm=False`` the two BN stages are omitted (used for
    parameter-count decompositions and for BN-folded inference).
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32,
                 batch_norm: bool = True, dropout: float = DROPOUT_RATE):
        super().__init__()
        self.in_channels, self.out_channels = in_ch, out_ch
        self.batch_norm = batch_norm
        self.conv1 = self.add_child("conv1", Conv2d(in_ch, out_ch, 3, rng, dtype))
        self.bn1 = self.add_child("bn1", BatchNorm2d(out_ch, dtype)) if batch_norm else None
        self.dropout = self.add_child("dropout", Dropout(dropout))
        self.conv2 = self.add_child("conv2", Conv2d(out_ch, out_ch, 3, rng, dtype))
        self.bn2 = self.add_child("bn2", BatchNorm2d(out_ch, dtype)) if batch_norm else None

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[-3]
        if c != self.in_channels:
            raise DimensionError(f"Conv Layer expects {self.in_channels} channels, got {c}")
        y = self.conv1(x)
        if self.bn1 is not None:
            y = self.bn1(y)
        y = self.dropout(y)
        y = self.conv2(y)
        if self.bn2 is not None:
            y = self.bn2(y)
        return T.leaky_relu(y, LEAKY_SLOPE)


class UpSampleBlock(Module):
    """Transposed conv halving the channels, then concatenation with the skip tensor."""

    def __init__(self, in_ch: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if in_ch % 2:
            raise ParameterError("Up-sample input channels must be even")
        self.in_channels = in_ch
        self.tconv = self.add_child("tconv", ConvTranspose2d(in_ch, in_ch // 2, rng, dtype))

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if skip.shape[-2:] != (2 * x.shape[-2], 2 * x.shape[-1]):
            raise DimensionError(
                f"skip spatial dims {skip.shape[-2:]} must be twice the input's {x.shape[-2:]}")
        up = self.tconv(x)
        return T.concat([up, skip], axis=up.data.ndim - 3)


class SigmoidHead(Module):
    """1x1 convolution to a single channel followed by the logistic function."""

    def __init__(self, in_ch: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(in_ch, 1, 1, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.conv(x))
