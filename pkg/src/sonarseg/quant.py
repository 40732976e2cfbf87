"""Post-training 8-bit weight quantization, the quantized runtime and a throughput harness.

Batch norm is folded into the preceding convolution, then every remaining
tensor is stored as uint8 with its own affine ``(scale, zero_point)``.
Inference dequantizes once on load and runs the ordinary float32 forward
through a batch-norm-free copy of the network.
"""

from __future__ import annotations

import os
import statistics
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataError, FormatError, ParameterError, StorageError
from .layers import BN_EPS
from .model import (INPUT_SHAPE, ModelWeights, SegmentationModel, WeightRecord, _Reader, encode_weights,
                    weights_of)

QMAGIC = b"SSG8"
QVERSION = 1
WARMUP_FRAMES = 3
MIN_FRAMES = 10


@dataclass(eq=False)
class QTensor:
    name: str
    q: np.ndarray  # uint8, tensor shape
    scale: float
    zero_point: int

    @property
    def shape(self) -> tuple:
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        return np.float64(self.scale) * (self.q.astype(np.float64) - self.zero_point)


@dataclass(eq=False)
class QuantizedModel:
    tensors: list = field(default_factory=list)
    version: int = QVERSION
    input_hw: tuple = INPUT_SHAPE[1:]  # not stored in the file
    _model: Optional[SegmentationModel] = field(default=None, repr=False, compare=False)

    def names(self) -> list:
        return [t.name for t in self.tensors]

    def __getitem__(self, name: str) -> QTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def dequantized(self) -> ModelWeights:
        return ModelWeights([WeightRecord(t.name, t.dequantize()) for t in self.tensors])

    def to_model(self, dtype=np.float32) -> SegmentationModel:
        """Float model (without batch norm) holding the dequantized weights; cached per instance."""
        if self._model is None or self._model.dtype != np.dtype(dtype):
            m = SegmentationModel(seed=0, dtype=dtype, batch_norm=False, input_hw=self.input_hw)
            m.load_weights(self.dequantized())
            m.eval()
            self._model = m
        return self._model


# ----------------------------------------------------------------------
# quantization


def quantize_tensor(w: np.ndarray) -> tuple:
    """Return ``(q, scale, zero_point)`` with ``|w - scale*(q - zp)| <= scale/2``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise DataError("cannot quantize a tensor containing NaN or infinity")
    lo, hi = float(w.min()), float(w.max())
    if lo == hi:
        # constant tensor: symmetric fallback range
        lo, hi = -abs(lo) - 1.0, abs(lo) + 1.0
    else:
        # keep zero representable so the clamped zero point never shifts the grid off the data
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = np.float32((hi - lo) / 255.0)
    if float(scale) * 255.0 < hi - lo:
        scale = np.nextafter(scale, np.float32(np.inf))
    s = float(scale)
    # zero point from the exact range, ties rounded up: [-1, 0, 1] gives 128
    zp = int(np.clip(np.floor(-lo * 255.0 / (hi - lo) + 0.5), 0, 255))
    q = np.clip(np.round(w / s) + zp, 0, 255).astype(np.uint8)
    return q, s, zp


def fold_batch_norm(weights: ModelWeights, eps: float = BN_EPS) -> ModelWeights:
    """Merge every ``<p>.bnK`` into ``<p>.convK`` using the running statistics."""
    recs = {r.name: np.asarray(r.data, dtype=np.float64) for r in weights.records}
    out = []
    consumed = set()
    for r in weights.records:
        name = r.name
        if name in consumed:
            continue
        prefix, _, leaf = name.rpartition(".")
        block, _, layer = prefix.rpartition(".")
        if layer.startswith("conv") and leaf == "weight":
            bn = f"{block}.bn{layer[4:]}" if block else f"bn{layer[4:]}"
            if f"{bn}.gamma" in recs:
                w = recs[name]
                b = recs.get(f"{prefix}.bias", np.zeros(w.shape[0]))
                k = recs[f"{bn}.gamma"] / np.sqrt(recs[f"{bn}.running_var"] + eps)
                out.append(WeightRecord(name, w * k[:, None, None, None]))
                out.append(WeightRecord(f"{prefix}.bias", (b - recs[f"{bn}.running_mean"]) * k + recs[f"{bn}.beta"]))
                consumed.update({f"{prefix}.bias", f"{bn}.gamma", f"{bn}.beta",
                                 f"{bn}.running_mean", f"{bn}.running_var"})
                continue
        if ".bn" in name:
            raise DataError(f"batch-norm record {name!r} has no preceding convolution")
        out.append(WeightRecord(name, recs[name]))
    return ModelWeights(out)


def quantize_weights(weights: ModelWeights, input_hw: tuple = INPUT_SHAPE[1:]) -> QuantizedModel:
    folded = fold_batch_norm(weights)
    tensors = []
    for r in folded.records:
        q, s, zp = quantize_tensor(r.data)
        tensors.append(QTensor(r.name, q, s, zp))
    return QuantizedModel(tensors, input_hw=tuple(input_hw))


def quantize_model(model: SegmentationModel) -> QuantizedModel:
    return quantize_weights(weights_of(model), model.input_hw)


def quantized_forward(qmodel: QuantizedModel, x) -> np.ndarray:
    """Fish probabilities for a ``1 x 320 x 128`` input (or a batch of them)."""
    if qmodel.version != QVERSION:
        raise FormatError(f"unsupported quantized model version {qmodel.version}")
    return qmodel.to_model().predict_proba(x)


# ----------------------------------------------------------------------
# file format (little-endian throughout)


def encode_quantized(qm: QuantizedModel) -> bytes:
    out = [QMAGIC, struct.pack("<HI", qm.version, len(qm.tensors))]
    for t in qm.tensors:
        name = t.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<B", t.q.ndim))
        out.append(struct.pack(f"<{t.q.ndim}I", *t.q.shape))
        out.append(struct.pack("<fB", t.scale, t.zero_point))
        out.append(np.ascontiguousarray(t.q, dtype=np.uint8).tobytes())
    return b"".join(out)


def decode_quantized(buf: bytes) -> QuantizedModel:
    r = _Reader(buf)
    if r.take(4) != QMAGIC:
        raise FormatError("not an SSG8 quantized weight file (bad magic)")
    version, count = r.unpack("<HI")
    if version != QVERSION:
        raise FormatError(f"unsupported SSG8 version {version}")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        scale, zp = r.unpack("<fB")
        n = int(np.prod(dims, dtype=np.int64))
        q = np.frombuffer(r.take(n), dtype=np.uint8).reshape(dims).copy()
        tensors.append(QTensor(name, q, float(scale), int(zp)))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return QuantizedModel(tensors, version)


def save_quantized(qm: QuantizedModel, path) -> int:
    blob = encode_quantized(qm)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return len(blob)


def load_quantized(path, input_hw: tuple = INPUT_SHAPE[1:]) -> QuantizedModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    qm = decode_quantized(buf)
    qm.input_hw = tuple(input_hw)
    return qm


def is_quantized_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == QMAGIC


# ----------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    frames_per_second: float
    wall_times: list
    model_file_bytes: int
    baseline_bytes: int
    size_reduction_ratio: float
    speedup_ratio: float
    thread_count: int
    baseline_fps: float
    n_frames: int
    kind: str

    def as_dict(self) -> dict:
        return {"kind": self.kind, "n_frames": self.n_frames, "thread_count": self.thread_count,
                "fps": self.frames_per_second, "baseline_fps": self.baseline_fps,
                "speedup_ratio": self.speedup_ratio, "model_file_bytes": self.model_file_bytes,
                "baseline_bytes": self.baseline_bytes, "size_reduction_ratio": self.size_reduction_ratio,
                "median_frame_seconds": statistics.median(self.wall_times)}


def _time_frames(fn, frames: Sequence[np.ndarray]) -> list:
    for f in frames[:WARMUP_FRAMES]:
        fn(f)
    times = []
    for f in frames[WARMUP_FRAMES:]:
        t0 = time.perf_counter()
        fn(f)
        times.append(time.perf_counter() - t0)
    return times


def benchmark(target: Union[SegmentationModel, QuantizedModel], n_frames: int = MIN_FRAMES,
              threads: Union[int, str] = "all", frames: Optional[Sequence[np.ndarray]] = None,
              baseline: bool = True, seed: int = 0) -> BenchReport:
    """Median-based frames per second over ``n_frames`` timed frames after 3 warm-up frames.

    The baseline is the same network at 64-bit without quantization; its
    serialized size defines the size-reduction ratio. With ``baseline=False``
    the baseline FPS is not measured and the speedup is reported as 1.
    """
    if n_frames < MIN_FRAMES:
        raise ParameterError(f"n_frames must be at least {MIN_FRAMES}")
    if threads == "all":
        count = os.cpu_count() or 1
    elif isinstance(threads, int) and threads >= 1:
        count = threads
    else:
        raise ParameterError("threads must be a positive integer or 'all'")
    if isinstance(target, QuantizedModel):
        run_model = target.to_model()
        file_bytes = len(encode_quantized(target))
        base_weights = target.dequantized()
        base_model = SegmentationModel(seed=0, dtype=np.float64, batch_norm=False, input_hw=target.input_hw)
        base_model.load_weights(base_weights)
        kind = "q8"
    else:
        run_model = target
        base_weights = weights_of(target)
        file_bytes = len(encode_weights(base_weights))
        base_model = SegmentationModel(seed=0, dtype=np.float64, batch_norm=target.batch_norm,
                                       input_hw=target.input_hw)
        base_model.load_weights(base_weights)
        kind = f"float{8 * target.dtype.itemsize}"
    # the 64-bit file of the full network (batch norm unfolded); its size does not depend on values
    reference = target
    if isinstance(target, QuantizedModel):
        reference = SegmentationModel(seed=0, input_hw=target.input_hw)
    baseline_bytes = len(encode_weights(weights_of(reference), np.float64))
    base_model.eval()

    total = n_frames + WARMUP_FRAMES
    if frames is None:
        rng = np.random.default_rng(seed)
        frames = [rng.random((1,) + run_model.input_hw).astype(np.float32) for _ in range(total)]
    frames = [frames[i % len(frames)] for i in range(total)]

    with threadpool_limits(limits=count):
        times = _time_frames(run_model.predict_proba, frames)
        fps = 1.0 / statistics.median(times)
        if baseline:
            base_fps = 1.0 / statistics.median(_time_frames(base_model.predict_proba, frames))
        else:
            base_fps = fps
    return BenchReport(fps, times, file_bytes, baseline_bytes, baseline_bytes / file_bytes,
                       fps / base_fps, count, base_fps, n_frames, kind)
