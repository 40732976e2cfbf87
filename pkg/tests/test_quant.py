import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sonarseg.errors import DataError, FormatError, ParameterError, TruncatedFileError
from sonarseg.model import SegmentationModel, WeightRecord, ModelWeights, encode_weights, weights_of
from sonarseg.quant import (QuantizedModel, QTensor, benchmark, decode_quantized, encode_quantized,
                            fold_batch_norm, load_quantized, quantize_model, quantize_tensor,
                            quantize_weights, quantized_forward, save_quantized)
from sonarseg.tensor import Tensor

SMALL = (32, 16)


def _stirred_model(seed=2, hw=SMALL, dtype=np.float32):
    """Model whose BN running statistics differ from their initial values."""
    m = SegmentationModel(seed=seed, dtype=dtype, input_hw=hw)
    r = np.random.default_rng(seed)
    for name, p in m.named_parameters():
        if name.endswith("gamma"):
            p.data = r.uniform(0.5, 1.5, p.shape).astype(dtype)
        elif name.endswith("beta") or name.endswith("bias"):
            p.data = r.normal(0, 0.1, p.shape).astype(dtype)
    m.set_dropout_rng(np.random.default_rng(0))
    for _ in range(3):
        m(Tensor(r.random((2, 1) + hw).astype(dtype)))
    return m


def test_three_point_example():
    q, s, zp = quantize_tensor(np.array([-1.0, 0.0, 1.0]))
    assert s == pytest.approx(2 / 255, rel=1e-7)
    assert zp == 128
    back = s * (q.astype(np.float64) - zp)
    assert np.max(np.abs(back - [-1, 0, 1])) <= s / 2


def test_all_zero_tensor_is_exact():
    q, s, zp = quantize_tensor(np.zeros((3, 4)))
    assert np.all(s * (q.astype(np.float64) - zp) == 0.0)


def test_constant_tensor_uses_symmetric_fallback():
    q, s, zp = quantize_tensor(np.full(5, 0.7))
    assert s == pytest.approx(2 * 1.7 / 255, rel=1e-6)
    assert zp == 128
    assert np.max(np.abs(s * (q - zp) - 0.7)) <= s / 2


def test_nan_is_rejected():
    with pytest.raises(DataError):
        quantize_tensor(np.array([0.0, np.nan]))


@given(arrays(np.float64, st.integers(1, 60),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)))
@settings(max_examples=200, deadline=None)
def test_round_trip_bound_property(w):
    q, s, zp = quantize_tensor(w)
    assert q.dtype == np.uint8 and 0 <= zp <= 255
    assert np.max(np.abs(w - s * (q.astype(np.float64) - zp))) <= s / 2 + 1e-12


def test_one_signed_tensors_keep_bound():
    # all-positive and all-negative ranges would push the zero point outside [0, 255]
    for w in (np.linspace(5.0, 6.0, 50), np.linspace(-9.0, -8.5, 50)):
        q, s, zp = quantize_tensor(w)
        assert np.max(np.abs(w - s * (q - zp.__float__()))) <= s / 2 + 1e-12


def test_exhaustive_bound_on_full_model():
    m = _stirred_model(hw=(320, 128))
    folded = fold_batch_norm(weights_of(m))
    qm = quantize_model(m)
    assert qm.names() == folded.names()
    for t, r in zip(qm.tensors, folded.records):
        err = np.max(np.abs(r.data - t.dequantize()))
        assert err <= t.scale / 2 + 1e-12, t.name


def test_folding_matches_eval_batch_norm(rng):
    m = _stirred_model(dtype=np.float64)
    folded = fold_batch_norm(weights_of(m))
    assert not any(".bn" in n for n in folded.names())
    plain = SegmentationModel(seed=0, dtype=np.float64, batch_norm=False, input_hw=SMALL)
    plain.load_weights(folded)
    x = rng.random((3, 1) + SMALL)
    np.testing.assert_allclose(plain.predict_proba(x), m.predict_proba(x), rtol=0, atol=1e-12)


def test_folding_oracle_single_block():
    w = np.arange(2 * 1 * 3 * 3, dtype=np.float64).reshape(2, 1, 3, 3)
    recs = [WeightRecord("blk.conv1.weight", w), WeightRecord("blk.conv1.bias", np.array([1.0, -1.0])),
            WeightRecord("blk.bn1.gamma", np.array([2.0, 0.5])), WeightRecord("blk.bn1.beta", np.array([0.1, 0.2])),
            WeightRecord("blk.bn1.running_mean", np.array([3.0, 4.0])),
            WeightRecord("blk.bn1.running_var", np.array([3.0, 0.25]))]
    out = fold_batch_norm(ModelWeights(recs), eps=1.0)
    # gamma / sqrt(var + 1) = 2/2 = 1 and 0.5/sqrt(1.25)
    k1 = 0.5 / np.sqrt(1.25)
    np.testing.assert_allclose(out["blk.conv1.weight"][0], w[0])
    np.testing.assert_allclose(out["blk.conv1.weight"][1], w[1] * k1)
    np.testing.assert_allclose(out["blk.conv1.bias"], [(1 - 3) * 1 + 0.1, (-1 - 4) * k1 + 0.2])


def test_grid_point_weights_give_bit_identical_output(rng):
    plain = SegmentationModel(seed=4, batch_norm=False, input_hw=SMALL)
    for i, (name, p) in enumerate(plain.named_parameters()):
        s = 2.0 ** -(11 + i % 3)  # keeps activations finite without batch norm
        zp = int(rng.integers(120, 137))  # roughly zero-mean weights
        q = rng.integers(0, 256, p.shape)
        q.flat[0], q.flat[-1] = 0, 255  # pin the range to the full grid
        if p.size > 2:
            q.flat[1] = zp  # and include zero
        if p.size == 1:
            q[...] = zp  # a lone value takes the constant fallback; zero stays exact there
        p.data = (s * (q - zp)).astype(np.float32)
    qm = quantize_model(plain)
    for t, (_, p) in zip(qm.tensors, plain.named_parameters()):
        assert t.dequantize().astype(np.float32).tobytes() == p.data.tobytes()
    x = rng.random((1,) + SMALL).astype(np.float32)
    out = quantized_forward(qm, x)
    assert np.all(np.isfinite(out)) and out.std() > 0
    assert out.tobytes() == plain.predict_proba(x).tobytes()


def test_forward_contract_matches_float_model(rng):
    m = _stirred_model(hw=(320, 128))
    qm = quantize_model(m)
    x = rng.random((1, 320, 128)).astype(np.float32)
    out = quantized_forward(qm, x)
    ref = m.predict_proba(x)
    assert out.shape == ref.shape == (1, 320, 128)
    assert out.dtype == np.float32
    assert np.all((out >= 0) & (out <= 1))


def test_file_round_trip_and_size(tmp_path):
    m = _stirred_model(hw=(320, 128))
    qm = quantize_model(m)
    n = save_quantized(qm, tmp_path / "m.ssg8")
    assert n == (tmp_path / "m.ssg8").stat().st_size
    back = load_quantized(tmp_path / "m.ssg8")
    assert back.names() == qm.names()
    for a, b in zip(qm.tensors, back.tensors):
        assert a.q.tobytes() == b.q.tobytes() and a.zero_point == b.zero_point
        assert np.float32(a.scale) == np.float32(b.scale)
    baseline = len(encode_weights(weights_of(m), np.float64))
    assert baseline / n >= 7.0


def _swapped_reader(buf):
    """Parse the file the way a big-endian host would: native order is '>' so every multi-byte
    field must be explicitly reinterpreted as little-endian."""
    pos = 4
    version, count = struct.unpack_from(">HI", buf, pos)
    version = int.from_bytes(struct.pack(">H", version), "little")
    count = int.from_bytes(struct.pack(">I", count), "little")
    pos += 6
    out = []
    for _ in range(count):
        nlen = int(np.frombuffer(buf, dtype=">u2", count=1, offset=pos).byteswap()[0])
        name = buf[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        rank = buf[pos]
        pos += 1
        dims = tuple(np.frombuffer(buf, dtype=">u4", count=rank, offset=pos).byteswap().tolist())
        pos += 4 * rank
        scale = float(np.frombuffer(buf, dtype=">f4", count=1, offset=pos).byteswap()[0])
        zp = buf[pos + 4]
        pos += 5
        n = int(np.prod(dims))
        out.append((name, dims, scale, zp, buf[pos:pos + n]))
        pos += n
    return version, out


def test_byte_swapped_reader_path():
    m = _stirred_model()
    qm = quantize_model(m)
    buf = encode_quantized(qm)
    version, recs = _swapped_reader(buf)
    assert version == 1
    for (name, dims, scale, zp, payload), t in zip(recs, qm.tensors):
        assert name == t.name and dims == t.shape and zp == t.zero_point
        assert scale == np.float32(t.scale)
        assert payload == t.q.tobytes()


def test_file_errors(tmp_path):
    buf = encode_quantized(quantize_model(_stirred_model()))
    with pytest.raises(FormatError):
        decode_quantized(b"SSEG" + buf[4:])
    with pytest.raises(FormatError):
        decode_quantized(buf[:4] + struct.pack("<H", 2) + buf[6:])
    with pytest.raises(TruncatedFileError):
        decode_quantized(buf[:-1])
    with pytest.raises(FormatError):
        decode_quantized(buf + b"\0")
    qm = decode_quantized(buf)
    qm.version = 7
    with pytest.raises(FormatError):
        quantized_forward(qm, np.zeros((1,) + SMALL, np.float32))


def test_float16_mode_shares_the_weight_api():
    m = _stirred_model()
    w = weights_of(m)
    assert len(encode_weights(w, np.float16)) < len(encode_weights(w, np.float32))


def test_benchmark_contract():
    m = _stirred_model()
    qm = quantize_model(m)
    with pytest.raises(ParameterError):
        benchmark(qm, n_frames=9)
    rep = benchmark(qm, n_frames=10, threads=1)
    assert rep.thread_count == 1
    assert len(rep.wall_times) == 10
    assert rep.frames_per_second > 0 and rep.baseline_fps > 0 and rep.speedup_ratio > 0
    assert rep.size_reduction_ratio == rep.baseline_bytes / rep.model_file_bytes > 1
    d = rep.as_dict()
    for key in ("fps", "baseline_fps", "speedup_ratio", "model_file_bytes", "baseline_bytes",
                "size_reduction_ratio", "thread_count", "n_frames"):
        assert key in d
    frep = benchmark(m, n_frames=10, threads="all", baseline=False)
    assert frep.speedup_ratio == 1.0 and frep.kind == "float32"


def test_benchmark_thread_pinning_is_observable():
    from threadpoolctl import threadpool_info
    seen = []

    class Probe:
        input_hw = SMALL

        def predict_proba(self, x):
            seen.append(max((i["num_threads"] for i in threadpool_info()), default=1))

    from sonarseg import quant
    qm = quantize_model(_stirred_model())
    qm._model = Probe()
    qm._model.dtype = np.dtype(np.float32)
    quant.benchmark(qm, n_frames=10, threads=1, baseline=False)
    assert seen and set(seen) == {1}
