"""The encoder-decoder segmentation network and its weight file format.

Weight files ("SSEG") are little-endian::

    magic  b"SSEG"
    u16    format version
    u32    record count
    per record:
        u16 name length, name (utf-8)
        u8  dtype tag (0 = f64, 1 = f32, 2 = f16)
        u8  rank, then rank x u32 dims
        raw little-endian payload

Records are the parameters followed by the batch-norm running statistics, in
module order.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ShapeMismatchError, StorageError, TruncatedFileError
from .layers import ConvLayerBlock, Module, SigmoidHead, UpSampleBlock
from .tensor import Tensor

INPUT_SHAPE = (1, 320, 128)
ENCODER_CHANNELS = (16, 32, 64, 128)
BOTTLENECK_CHANNELS = 256
THRESHOLD = 0.5

WEIGHTS_MAGIC = b"SSEG"
WEIGHTS_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<f2")}
_TAG_OF = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("float16"): 2}


class SegmentationModel(Module):
    """Four Conv Layer + max-pool stages, a bottleneck, four Up-sample + Conv
    Layer stages and a sigmoid head. Skips come from the pre-pooling outputs.

    Tensors are laid out ``C x 320 x 128``: the second axis runs across the
    fan (raster columns) and the third along it (raster rows).
    """

    def __init__(self, seed: int = 0, dtype=np.float32, batch_norm: bool = True,
                 input_hw: tuple = INPUT_SHAPE[1:], dropout: float = 0.1):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.input_hw = tuple(input_hw)
        if self.input_hw[0] % 16 or self.input_hw[1] % 16:
            raise DimensionError("input height and width must be divisible by 16")
        self.batch_norm = batch_norm
        chans = ENCODER_CHANNELS
        prev = 1
        self.encoders = []
        for i, c in enumerate(chans, start=1):
            self.encoders.append(self.add_child(
                f"enc{i}", ConvLayerBlock(prev, c, rng, dtype, batch_norm, dropout)))
            prev = c
        self.bottleneck = self.add_child(
            "bottleneck", ConvLayerBlock(prev, BOTTLENECK_CHANNELS, rng, dtype, batch_norm, dropout))
        prev = BOTTLENECK_CHANNELS
        self.ups, self.decoders = [], []
        for i, c in enumerate(reversed(chans), start=1):
            self.ups.append(self.add_child(f"up{i}", UpSampleBlock(prev, rng, dtype)))
            self.decoders.append(self.add_child(
                f"dec{i}", ConvLayerBlock(prev, c, rng, dtype, batch_norm, dropout)))
            prev = c
        self.head = self.add_child("head", SigmoidHead(prev, rng, dtype))
        self.set_dropout_rng(np.random.default_rng([seed, 1]))

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for _, m in self.named_modules():
            if hasattr(m, "rate"):
                m.rng = rng

    def check_input(self, x: Tensor) -> None:
        expected = (1,) + self.input_hw
        if x.data.ndim not in (3, 4) or tuple(x.shape[-3:]) != expected:
            raise DimensionError(f"model input must be {expected} (optionally batched), got {x.shape}")

    def forward(self, x, trace: Optional[list] = None) -> Tensor:
        """Return per-pixel fish probabilities with the same spatial size as ``x``.

        If ``trace`` is a list, ``(row name, input shape, output shape)`` is
        appended for every stage.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self.check_input(x)

        def log(name, a, b):
            if trace is not None:
                trace.append((name, tuple(a.shape[-3:]), tuple(b.shape[-3:])))

        skips = []
        h = x
        for i, enc in enumerate(self.encoders, start=1):
            y = enc(h)
            log(f"Conv Layer {i}", h, y)
            skips.append(y)
            h = T.max_pool2d(y, 2, 2)
            log(f"Max-pooling {i}", y, h)
        y = self.bottleneck(h)
        log("Bottleneck", h, y)
        h = y
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders), start=1):
            u = up(h, skips[-i])
            log(f"Up-sample {i}", h, u)
            h = dec(u)
            log(f"Conv Layer {i + 4}", u, h)
        out = self.head(h)
        log("Sigmoid Layer", h, out)
        return out

    def predict_proba(self, x) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.forward(x).data
        finally:
            self.train(was)

    def state_hash(self) -> str:
        """Digest of all parameters and buffers, used to verify that eval mode is pure."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for name, b in self.named_buffers():
            h.update(name.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # state transfer

    def state_records(self) -> "list[WeightRecord]":
        recs = [WeightRecord(n, p.data) for n, p in self.named_parameters()]
        recs += [WeightRecord(n, b) for n, b in self.named_buffers()]
        return recs

    def load_weights(self, weights: "ModelWeights") -> None:
        """Copy stored values into this model, validating names and shapes."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(params) + list(buffers)
        found = {r.name: r for r in weights.records}
        for name in expected:
            if name not in found:
                raise ShapeMismatchError(name, (params[name].shape if name in params else buffers[name].shape), ())
        for name in found:
            if name not in params and name not in buffers:
                raise ShapeMismatchError(name, (), found[name].data.shape)
        for name in expected:
            rec = found[name]
            if name in params:
                target = params[name]
                if rec.data.shape != target.shape:
                    raise ShapeMismatchError(name, target.shape, rec.data.shape)
                target.data = rec.data.astype(self.dtype)
            else:
                target = buffers[name]
                if rec.data.shape != target.shape:
                    raise ShapeMismatchError(name, target.shape, rec.data.shape)
                target[...] = rec.data


def predict_mask(probabilities: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """Binary mask: 1 where the probability is strictly above ``threshold``."""
    return (np.asarray(probabilities) > threshold).astype(np.uint8)


def count_parameters(model: Module) -> int:
    """Trainable scalars: conv and transposed-conv weights and biases plus BN gamma/beta."""
    return int(sum(p.size for p in model.parameters()))


def count_buffers(model: Module) -> int:
    return int(sum(b.size for _, b in model.named_buffers()))


# ----------------------------------------------------------------------
# serialization


@dataclass
class WeightRecord:
    name: str
    data: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype


@dataclass
class ModelWeights:
    records: list = field(default_factory=list)
    version: int = WEIGHTS_VERSION

    def names(self) -> list:
        return [r.name for r in self.records]

    def __getitem__(self, name: str) -> np.ndarray:
        for r in self.records:
            if r.name == name:
                return r.data
        raise KeyError(name)


def weights_of(model: SegmentationModel) -> ModelWeights:
    return ModelWeights([WeightRecord(r.name, np.array(r.data)) for r in model.state_records()])


def encode_weights(weights: ModelWeights, dtype=None) -> bytes:
    names = weights.names()
    if len(set(names)) != len(names):
        raise StorageError("weight record names must be unique")
    out = [WEIGHTS_MAGIC, struct.pack("<HI", weights.version, len(weights.records))]
    for rec in weights.records:
        data = rec.data if dtype is None else rec.data.astype(dtype)
        tag = _TAG_OF.get(data.dtype)
        if tag is None:
            raise StorageError(f"unsupported dtype {data.dtype} for {rec.name!r}")
        name = rec.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<BB", tag, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(np.ascontiguousarray(data, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(buf: bytes) -> ModelWeights:
    r = _Reader(buf)
    if r.take(4) != WEIGHTS_MAGIC:
        raise FormatError("not an SSEG weight file (bad magic)")
    version, count = r.unpack("<HI")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported SSEG version {version}")
    records = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} in record {name!r}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims)
        records.append(WeightRecord(name, data.astype(dt.newbyteorder("="))))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return ModelWeights(records, version)


def save_weights(model: SegmentationModel, path, dtype=None) -> int:
    """Write the model's weights; ``dtype`` selects the stored width (default: model dtype)."""
    blob = encode_weights(weights_of(model), dtype)
    Path(path).write_bytes(blob)
    return len(blob)


def load_weights(path) -> ModelWeights:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read weight file {path}: {exc}") from exc
    return decode_weights(buf)


def load_model(path, dtype=np.float32, input_hw: tuple = INPUT_SHAPE[1:]) -> SegmentationModel:
    weights = load_weights(path)
    model = SegmentationModel(seed=0, dtype=dtype, input_hw=input_hw)
    model.load_weights(weights)
    return model
