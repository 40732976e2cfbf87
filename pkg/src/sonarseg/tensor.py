"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the segmentation network are provided. Layout is
channels-first: ``C x H x W`` for a single image or ``N x C x H x W`` for a
batch; every spatial op accepts either form.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array with an optional gradient.

    ``data`` is never mutated by ops; only ``grad`` accumulates. A tensor that
    was produced by a recorded op keeps a reference to its tape node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic used by losses and tests
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class _Node:
    """One recorded op: its inputs and the rule mapping the output grad to input grads."""

    __slots__ = ("inputs", "backward_fn", "order")
    _counter = 0

    def __init__(self, inputs: Sequence[Tensor], backward_fn: Callable):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        _Node._counter += 1
        self.order = _Node._counter


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(inputs, backward_fn)
    return out


def _collect_tape(root: Tensor) -> list:
    """Return the tensors reachable from ``root`` that carry a node, in recording order."""
    seen = set()
    tape = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        tape.append(t)
        stack.extend(i for i in t._node.inputs if i.requires_grad)
    tape.sort(key=lambda t: t._node.order)
    return tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and contributes to ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are dropped
    once propagated.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    tape = _collect_tape(loss)
    # reverse recording order is a valid topological order
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += ig
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g if a.size == g.size else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.size == g.size else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return _record(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        if a.size != ga.size:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if b.size != gb.size:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def tensor_sum(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    return _record(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * a.dtype.type(slope))
    return _record(out, (a,), lambda g: (np.where(pos, g, g * a.dtype.type(slope)),))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated on the branch that cannot overflow."""
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype, copy=False)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def dropout(a: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = rng.random(a.shape) >= rate
    scale = a.dtype.type(1.0 / (1.0 - rate))
    mask = keep * scale
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# --------------------------------------------------------------------------
# spatial ops


def _as_batch(x: Tensor) -> tuple:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def _unbatch(g: np.ndarray, squeezed: bool) -> np.ndarray:
    return g[0] if squeezed else g


def _im2row(xh: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """``Hp x Wp x C`` padded image -> ``(Ho*Wo) x (k*k*C)`` patch rows."""
    c = xh.shape[2]
    win = sliding_window_view(xh, (k, k), axis=(0, 1))[::s, ::s][:ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, k * k * c)


def _hwc_padded(x1: np.ndarray, p: int) -> np.ndarray:
    c, h, w = x1.shape
    xh = np.zeros((h + 2 * p, w + 2 * p, c), dtype=x1.dtype)
    xh[p:p + h, p:p + w] = x1.transpose(1, 2, 0)
    return xh


def _conv_rows(xb: np.ndarray, wrows: np.ndarray, k: int, p: int, s: int, ho: int, wo: int) -> np.ndarray:
    # one sample at a time keeps the patch matrix cache-resident
    n = xb.shape[0]
    o = wrows.shape[0]
    out = np.empty((n, o, ho * wo), dtype=np.result_type(xb, wrows))
    for i in range(n):
        rows = _im2row(_hwc_padded(xb[i], p), k, s, ho, wo)
        out[i] = (rows @ wrows.T).T
    return out.reshape(n, o, ho, wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation computed as patch-rows x weight-matrix products."""
    xb, squeezed = _as_batch(x)
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be O x C x K x K, got {weight.shape}")
    n, c, h, w = xb.shape
    o, cw, k, kw = weight.shape
    if k != kw:
        raise DimensionError("conv2d supports square kernels only")
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    p, s = padding, stride
    if p < 0 or s < 1:
        raise ParameterError("conv2d needs padding >= 0 and stride >= 1")
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError("conv2d: kernel larger than padded input")

    # weight columns ordered (kh, kw, C) to match the patch rows
    wrows = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, k * k * c)
    out = _conv_rows(xb, wrows, k, p, s, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gb = g[None] if squeezed else g
        g2 = gb.reshape(n, o, ho * wo)
        gw = gx = gbias = None
        if weight.requires_grad:
            acc = np.zeros((k * k * c, o), dtype=wrows.dtype)
            for i in range(n):
                acc += _im2row(_hwc_padded(xb[i], p), k, s, ho, wo).T @ g2[i].T
            gw = acc.T.reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gbias = g2.sum(axis=(0, 2))
        if x.requires_grad:
            if s == 1 and p <= k - 1:
                # adjoint of a stride-1 correlation: correlate with the flipped, transposed kernel
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)
                frows = np.ascontiguousarray(wflip).reshape(c, k * k * o)
                gx = _conv_rows(gb, frows, k, k - 1 - p, 1, h, w)
            else:
                gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gb.dtype)
                for i in range(n):
                    d = (g2[i].T @ wrows).reshape(ho, wo, k, k, c)
                    for a in range(k):
                        for b in range(k):
                            gxp[i, a:a + s * ho:s, b:b + s * wo:s] += d[:, :, a, b]
                gx = gxp[:, p:p + h, p:p + w].transpose(0, 3, 1, 2)
            gx = _unbatch(gx, squeezed)
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _record(_unbatch(out, squeezed), inputs, lambda g: bw(g)[:2])
    return _record(_unbatch(out, squeezed), inputs, bw)


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping upsampling).

    ``weight`` is ``C_in x C_out x K x K``. Each input pixel scatters one
    ``K x K`` patch into the output, so the output is exactly ``stride`` times
    larger in each spatial dimension.
    """
    xb, squeezed = _as_batch(x)
    if weight.data.ndim != 4:
        raise DimensionError(f"transpose_conv2d weight must be C_in x C_out x K x K, got {weight.shape}")
    n, c, h, w = xb.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"transpose_conv2d: input has {c} channels, weight expects {ci}")
    if kh != stride or kw != stride:
        raise DimensionError("transpose_conv2d supports kernel size equal to stride only")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"transpose_conv2d: bias shape {bias.shape} != ({o},)")

    w2 = weight.data.reshape(c, o * kh * kw)
    x2 = xb.reshape(n, c, h * w)
    # (N, O*kh*kw, H*W)
    patches = np.matmul(w2.T, x2)
    out = patches.reshape(n, o, kh, kw, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, o, h * kh, w * kw)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gb = g[None] if squeezed else g
        # adjoint: gather each K x K patch back (a stride-K convolution)
        gp = gb.reshape(n, o, h, kh, w, kw).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * kh * kw, h * w)
        gx = _unbatch(np.matmul(w2, gp).reshape(n, c, h, w), squeezed) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for i in range(n):
                gw += x2[i] @ gp[i].T
            gw = gw.reshape(weight.shape)
        gbias = gb.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gbias

    if bias is None:
        return _record(_unbatch(out, squeezed), (x, weight), lambda g: bw(g)[:2])
    return _record(_unbatch(out, squeezed), (x, weight, bias), bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximal element."""
    if window != stride:
        raise ParameterError("max_pool2d supports window == stride only")
    xb, squeezed = _as_batch(x)
    n, c, h, w = xb.shape
    k = window
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = xb.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = g[None] if squeezed else g
        gblocks = np.zeros((n, c, h // k, w // k, k * k), dtype=gb.dtype)
        np.put_along_axis(gblocks, idx[..., None], gb[..., None], axis=-1)
        gx = gblocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (_unbatch(gx, squeezed),)

    return _record(_unbatch(out, squeezed), (x,), bw)


def batch_norm2d(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor],
                 running_mean: np.ndarray, running_var: np.ndarray, training: bool,
                 momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average with
    ``momentum``). In eval mode the running buffers are used.
    """
    xb, squeezed = _as_batch(x)
    n, c, h, w = xb.shape
    m = n * h * w
    if m == 0:
        raise DimensionError("batch_norm2d on an empty batch")
    dt = xb.dtype.type
    if training:
        mu = xb.mean(axis=(0, 2, 3))
        xc = xb - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xb.dtype)
        var = running_var.astype(xb.dtype)
        xc = xb - mu[None, :, None, None]
    invstd = (1.0 / np.sqrt(var + dt(eps))).astype(xb.dtype)
    xhat = xc * invstd[None, :, None, None]
    g_ = gamma.data if gamma is not None else np.ones(c, dtype=xb.dtype)
    b_ = beta.data if beta is not None else np.zeros(c, dtype=xb.dtype)
    out = xhat * g_[None, :, None, None] + b_[None, :, None, None]

    def bw(g):
        gb = g[None] if squeezed else g
        ggamma = (gb * xhat).sum(axis=(0, 2, 3)) if gamma is not None and gamma.requires_grad else None
        gbeta = gb.sum(axis=(0, 2, 3)) if beta is not None and beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = gb * g_[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                gx = (invstd / m)[None, :, None, None] * (
                    m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            else:
                gx = dxhat * invstd[None, :, None, None]
            gx = _unbatch(gx, squeezed)
        return gx, ggamma, gbeta

    inputs = [x]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)

    def bw_select(g):
        gx, gg, gbt = bw(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gbt)
        return tuple(res)

    return _record(_unbatch(out, squeezed), tuple(inputs), bw_select)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
