"""
Tests for the CPU reference codecs and the NMSE metric.
"""
import math

import numpy as np
import pytest

from quantkern.errors import (
    EmptyInput,
    IndivisibleRow,
    LengthMismatch,
    MalformedBlock,
    NonFiniteInput,
    ScaleOverflow,
    UnsupportedFormat,
    WrongBlockLen,
)
from quantkern.quant.codec import (
    QuantBlock,
    dequantize_block,
    dequantize_blocks,
    quantize_block,
    quantize_blocks,
)
from quantkern.quant.formats import BlockFormat, tensor_nbytes
from quantkern.quant.metrics import nmse
from quantkern.quant.tensor import dequantize_tensor, quantize_tensor, roundtrip_tensor

QUANTIZED = [fmt for fmt in BlockFormat if fmt.is_quantized]

# Gaussian roundtrip NMSE ceilings per format
NMSE_BOUNDS = {
    BlockFormat.Q8_0: 1e-4,
    BlockFormat.Q6_K: 2e-3,
    BlockFormat.Q5_0: 5e-3,
    BlockFormat.Q5_1: 5e-3,
    BlockFormat.Q4_0: 2e-2,
    BlockFormat.Q4_1: 2e-2,
    BlockFormat.IQ4_NL: 2e-2,
    BlockFormat.Q4_K: 2e-2,
    BlockFormat.Q2_K: 0.3,
    BlockFormat.Q1_0: 0.45,
}


def test_block_sizes():
    expected = {
        BlockFormat.F32: (1, 4), BlockFormat.F16: (1, 2),
        BlockFormat.Q8_0: (32, 34), BlockFormat.Q4_0: (32, 18), BlockFormat.Q4_1: (32, 20),
        BlockFormat.Q5_0: (32, 22), BlockFormat.Q5_1: (32, 24), BlockFormat.IQ4_NL: (32, 18),
        BlockFormat.Q2_K: (256, 84), BlockFormat.Q4_K: (256, 144), BlockFormat.Q6_K: (256, 210),
        BlockFormat.Q1_0: (128, 18),
    }
    for fmt, (block_len, block_bytes) in expected.items():
        assert (fmt.block_len, fmt.block_bytes) == (block_len, block_bytes), fmt


@pytest.mark.parametrize('fmt', QUANTIZED, ids=str)
def test_zero_block_roundtrips_exactly(fmt):
    block = quantize_block(np.zeros(fmt.block_len), fmt)
    assert block.size_ok
    assert np.array_equal(dequantize_block(block), np.zeros(fmt.block_len))


def test_q8_0_single_spike():
    values = np.zeros(32, dtype=np.float32)
    values[0] = 127.0
    data = np.frombuffer(quantize_block(values, BlockFormat.Q8_0).data, dtype=np.uint8)
    assert data[:2].view('<f2')[0] == 1.0
    codes = data[2:].view(np.int8)
    assert codes[0] == 127
    assert not codes[1:].any()


def test_q8_0_decode_by_hand():
    codes = np.zeros(32, dtype=np.int8)
    codes[:2] = [2, -4]
    raw = np.float16(0.5).astype('<f2').tobytes() + codes.tobytes()
    out = dequantize_block(QuantBlock(BlockFormat.Q8_0, raw))
    assert out[:3].tolist() == [1.0, -2.0, 0.0]


def test_q4_0_centered_code_decodes_to_zero():
    raw = np.float16(1.0).astype('<f2').tobytes() + bytes([0x88] * 16)
    assert np.array_equal(dequantize_block(QuantBlock(BlockFormat.Q4_0, raw)), np.zeros(32))


def test_q1_0_all_bits_set():
    raw = np.float16(0.25).astype('<f2').tobytes() + bytes([0xFF] * 16)
    out = dequantize_block(QuantBlock(BlockFormat.Q1_0, raw))
    assert out.shape == (128,)
    assert np.all(out == 0.25)


def test_q8_0_error_within_half_step_over_many_blocks(rng):
    blocks = (rng.standard_normal((100_000, 32)) * rng.uniform(0.01, 100, (100_000, 1))).astype(np.float32)
    data = quantize_blocks(blocks, BlockFormat.Q8_0)
    decoded = dequantize_blocks(data, BlockFormat.Q8_0)
    d = np.ascontiguousarray(data[:, :2]).view('<f2').astype(np.float32)
    err = np.abs(decoded - blocks)
    assert np.all(err <= d / 2 * (1 + 1e-4))


def test_q8_0_requantize_is_byte_identical(rng):
    blocks = rng.standard_normal((2000, 32)).astype(np.float32)
    first = quantize_blocks(blocks, BlockFormat.Q8_0)
    second = quantize_blocks(dequantize_blocks(first, BlockFormat.Q8_0), BlockFormat.Q8_0)
    assert np.array_equal(first, second)


@pytest.mark.parametrize('fmt', [BlockFormat.Q8_0, BlockFormat.Q4_0, BlockFormat.Q5_0,
                                 BlockFormat.IQ4_NL, BlockFormat.Q1_0], ids=str)
def test_symmetric_formats_negate(fmt, rng):
    values = rng.standard_normal((64, fmt.block_len)).astype(np.float32)
    values[:, ::7] = 0.0
    pos = dequantize_blocks(quantize_blocks(values, fmt), fmt)
    neg = dequantize_blocks(quantize_blocks(-values, fmt), fmt)
    assert np.array_equal(neg, -pos)


def test_q8_0_largest_representable_scale():
    values = np.zeros(32, dtype=np.float32)
    values[:3] = [8.0e6, 1.0, -3.5e6]
    data = quantize_blocks(values, BlockFormat.Q8_0)
    decoded = dequantize_blocks(data, BlockFormat.Q8_0)[0]
    d = float(data[0, :2].view('<f2')[0])
    assert np.isfinite(decoded).all()
    assert np.all(np.abs(decoded - values) <= d / 2)


@pytest.mark.parametrize('fmt', QUANTIZED, ids=str)
def test_scale_beyond_f16_range_is_rejected(fmt):
    values = np.zeros(fmt.block_len, dtype=np.float32)
    values[0] = 1e9
    with pytest.raises(ScaleOverflow):
        quantize_block(values, fmt)


def test_q8_0_huge_element_is_rejected_not_decoded_as_nan():
    values = np.zeros(32, dtype=np.float32)
    values[:2] = [1e7, 1.0]
    with pytest.raises(ScaleOverflow) as info:
        quantize_block(values, BlockFormat.Q8_0)
    assert info.value.value == pytest.approx(1e7 / 127, rel=1e-6)


@pytest.mark.parametrize('magnitude', [1e-9, 3e-7, 1e-5, 2e-4])
def test_q8_0_tiny_blocks_keep_a_nonzero_scale(magnitude, rng):
    blocks = (rng.standard_normal((500, 32)) * magnitude).astype(np.float32)
    blocks[0] = magnitude
    data = quantize_blocks(blocks, BlockFormat.Q8_0)
    d = np.ascontiguousarray(data[:, :2]).view('<f2').astype(np.float32)
    assert np.all(d > 0)
    decoded = dequantize_blocks(data, BlockFormat.Q8_0)
    assert np.all(np.abs(decoded - blocks) <= d / 2 * (1 + 1e-4))


def test_q8_0_subnormal_scale_is_raised_rather_than_saturating():
    # 127 * 1.4 steps of the smallest f16 subnormal: the nearest f16 scale is 1
    # step, which would push the largest code to 178
    step = np.float32(2.0 ** -24)
    values = np.zeros(32, dtype=np.float32)
    values[0] = np.float32(127 * 1.4) * step
    data = quantize_blocks(values, BlockFormat.Q8_0)
    d = float(data[0, :2].view('<f2')[0])
    code = int(data[0, 2:].view(np.int8)[0])
    assert d == pytest.approx(2 * float(step))
    assert abs(code) <= 127
    assert abs(code * d - float(values[0])) <= d / 2


@pytest.mark.parametrize('fmt', QUANTIZED, ids=str)
def test_gaussian_roundtrip_nmse(fmt, rng):
    values = rng.standard_normal((16, 256)).astype(np.float32)
    assert nmse(values, roundtrip_tensor(values, fmt)) < NMSE_BOUNDS[fmt]


@pytest.mark.parametrize('fmt', QUANTIZED, ids=str)
def test_codecs_are_deterministic(fmt, rng):
    values = rng.standard_normal((8, 256)).astype(np.float32)
    assert quantize_tensor(values, fmt)[0] == quantize_tensor(values.copy(), fmt)[0]


def test_quantize_block_errors():
    with pytest.raises(WrongBlockLen):
        quantize_block(np.zeros(31), BlockFormat.Q8_0)
    with pytest.raises(NonFiniteInput):
        quantize_block([math.nan] + [0.0] * 31, BlockFormat.Q8_0)
    with pytest.raises(UnsupportedFormat):
        quantize_block([0.0], BlockFormat.F32)
    with pytest.raises(MalformedBlock):
        dequantize_block(QuantBlock(BlockFormat.Q4_0, bytes(17)))


def test_tensor_sizes_and_shape():
    payload, desc = quantize_tensor(np.zeros((1, 32)), BlockFormat.Q4_0)
    assert len(payload) == 18
    assert np.array_equal(dequantize_tensor(payload, desc), np.zeros((1, 32)))

    values = np.random.default_rng(0).standard_normal((4, 256))
    payload, desc = quantize_tensor(values, BlockFormat.Q6_K)
    assert len(payload) == 4 * 210 == tensor_nbytes((4, 256), BlockFormat.Q6_K)
    assert dequantize_tensor(payload, desc).shape == (4, 256)


def test_indivisible_row():
    with pytest.raises(IndivisibleRow):
        quantize_tensor(np.zeros((2, 64)), BlockFormat.Q2_K)


def test_f16_passthrough():
    values = np.array([[1.0, -2.5, 65504.0, 1e-3]], dtype=np.float32)
    payload, desc = quantize_tensor(values, BlockFormat.F16)
    assert len(payload) == 8
    assert np.array_equal(dequantize_tensor(payload, desc), values.astype(np.float16).astype(np.float32))


def test_nmse_examples():
    assert nmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert nmse([1, 0], [0, 0]) == 1.0
    assert nmse([2, 2], [2, 2.002]) == pytest.approx(5e-7, rel=1e-9)
    assert nmse([0, 0], [0, 0]) == 0.0
    assert nmse([0, 0], [0, 1]) == math.inf


def test_nmse_errors():
    with pytest.raises(LengthMismatch):
        nmse([1, 2], [1])
    with pytest.raises(EmptyInput):
        nmse([], [])
