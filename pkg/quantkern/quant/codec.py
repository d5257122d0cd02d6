"""
CPU reference block codecs.

These are the ground truth for every GPU kernel: the shader dequantization
fragments decode exactly the byte layouts produced and consumed here.

All codecs work on batches of blocks, shaped ``(n_blocks, block_len)`` on the
float side and ``(n_blocks, block_bytes)`` on the byte side. Integer codes use
round-half-away-from-zero; scales are stored as f16 (round-to-nearest-even)
and codes are computed against the stored, already rounded scale.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Type

import numpy as np

from quantkern.errors import (
    MalformedBlock,
    NonFiniteInput,
    ScaleOverflow,
    UnsupportedFormat,
    WrongBlockLen,
)
from quantkern.quant.formats import BlockFormat

# Configure module logger
logger = logging.getLogger(__name__)

# Non-linear 4-bit codebook, verbatim from the GGUF reference implementation
IQ4_NL_VALUES = np.array(
    [-127, -104, -83, -65, -49, -35, -22, -10, 1, 13, 25, 38, 53, 69, 89, 113],
    dtype=np.float32,
)

F16_MIN_SUBNORMAL = 2.0 ** -24


@dataclass(frozen=True)
class QuantBlock:
    """One encoded block together with its format."""

    format: BlockFormat
    data: bytes

    @property
    def size_ok(self) -> bool:
        return len(self.data) == self.format.block_bytes


def round_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero without the f32 ``abs(x) + 0.5`` carry error."""
    a = np.abs(x)
    floored = np.floor(a)
    return np.sign(x) * (floored + np.floor(2 * (a - floored)))


def _to_f16(values: np.ndarray) -> np.ndarray:
    """Round to little-endian f16, returning the rounded values as f16."""
    values = np.asarray(values, dtype=np.float32)
    with np.errstate(over='ignore'):
        out = values.astype('<f2')
    if not np.isfinite(out).all():
        raise ScaleOverflow(float(np.abs(values).max()))
    return out


def _fit_scale(amax: np.ndarray, qmax: int) -> np.ndarray:
    """
    f16 scale for symmetric codes in [-qmax, qmax].

    A nonzero block never gets a zero scale, and the stored scale is moved up
    one f16 step when rounding left ``amax / d`` above ``qmax + 0.5``. Both only
    happen for scales in the f16 subnormal range.
    """
    d = _to_f16(amax / np.float32(qmax))
    live = amax > 0
    d = np.where(live & (d == 0), np.float16(F16_MIN_SUBNORMAL), d).astype('<f2')
    with np.errstate(divide='ignore', invalid='ignore'):
        over = live & (amax / d.astype(np.float32) > np.float32(qmax + 0.5))
    return np.where(over, np.nextafter(d, np.float16(np.inf)), d).astype('<f2')


def _f16_bytes(values_f16: np.ndarray) -> np.ndarray:
    """(n, 1) f16 -> (n, 2) raw bytes."""
    return np.ascontiguousarray(values_f16.reshape(-1, 1)).view(np.uint8)


def _read_f16(data: np.ndarray, start: int) -> np.ndarray:
    """Read an f16 field at byte ``start`` of every block as (n, 1) f32."""
    raw = np.ascontiguousarray(data[:, start:start + 2])
    return raw.view('<f2').astype(np.float32)


def _safe_codes(numerator: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """round_away(numerator / scale) with zero wherever the scale is zero."""
    with np.errstate(divide='ignore', invalid='ignore'):
        q = round_away(numerator / scale)
    return np.where(scale == 0, 0, q)


def _signed_extreme(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """The signed value with the largest magnitude along ``axis`` (keepdims)."""
    imax = np.abs(x).argmax(axis=axis)
    return np.take_along_axis(x, np.expand_dims(imax, axis), axis=axis)


def _pack_nibbles(q: np.ndarray) -> np.ndarray:
    """Element j in the low nibble and j + half in the high nibble of byte j."""
    half = q.shape[-1] // 2
    q = q.astype(np.uint8)
    return (q[..., :half] & 0x0F) | ((q[..., half:] & 0x0F) << 4)


def _unpack_nibbles(qs: np.ndarray) -> np.ndarray:
    return np.concatenate([qs & 0x0F, qs >> 4], axis=-1)


_CODECS: Dict[BlockFormat, Type['BlockCodec']] = {}


class BlockCodec:
    """Base class; subclasses register themselves for one block format."""

    format: BlockFormat

    def __init_subclass__(cls, fmt: BlockFormat, **kwargs) -> None:
        super().__init_subclass__(**kwargs)
        cls.format = fmt
        _CODECS[fmt] = cls

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Q8_0Codec(BlockCodec, fmt=BlockFormat.Q8_0):
    """{d: f16, 32 x i8}; d = absmax / 127, kept nonzero for nonzero blocks."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        amax = np.abs(blocks).max(axis=1, keepdims=True)
        d = _fit_scale(amax, 127)
        q = np.clip(_safe_codes(blocks, d.astype(np.float32)), -127, 127)
        return np.concatenate([_f16_bytes(d), q.astype(np.int8).view(np.uint8)], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        q = np.ascontiguousarray(data[:, 2:]).view(np.int8).astype(np.float32)
        return q * d


class Q4_0Codec(BlockCodec, fmt=BlockFormat.Q4_0):
    """{d: f16, 16 nibble bytes}; the signed extreme maps to code 0 (-8)."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        d = _to_f16(_signed_extreme(blocks) / np.float32(-8))
        q = np.clip(_safe_codes(blocks, d.astype(np.float32)) + 8, 0, 15)
        return np.concatenate([_f16_bytes(d), _pack_nibbles(q)], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        q = _unpack_nibbles(data[:, 2:]).astype(np.float32)
        return (q - 8) * d


class Q4_1Codec(BlockCodec, fmt=BlockFormat.Q4_1):
    """{d: f16, m: f16, 16 nibble bytes}; affine min/max fit."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        vmin = blocks.min(axis=1, keepdims=True)
        vmax = blocks.max(axis=1, keepdims=True)
        d = _to_f16((vmax - vmin) / np.float32(15))
        m = _to_f16(vmin)
        q = np.clip(_safe_codes(blocks - m.astype(np.float32), d.astype(np.float32)), 0, 15)
        return np.concatenate([_f16_bytes(d), _f16_bytes(m), _pack_nibbles(q)], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        m = _read_f16(data, 2)
        q = _unpack_nibbles(data[:, 4:]).astype(np.float32)
        return q * d + m


def _pack_high_bits(q: np.ndarray) -> np.ndarray:
    """Bit j of the little-endian u32 holds bit 4 of element j."""
    bits = ((q.astype(np.uint8) >> 4) & 1)
    return np.packbits(bits, axis=-1, bitorder='little')


def _unpack_high_bits(qh: np.ndarray) -> np.ndarray:
    return np.unpackbits(qh, axis=-1, bitorder='little')


class Q5_0Codec(BlockCodec, fmt=BlockFormat.Q5_0):
    """{d: f16, qh: u32, 16 nibble bytes}; decode ((q | hi << 4) - 16) * d."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        d = _to_f16(_signed_extreme(blocks) / np.float32(-16))
        q = np.clip(_safe_codes(blocks, d.astype(np.float32)) + 16, 0, 31)
        return np.concatenate([_f16_bytes(d), _pack_high_bits(q), _pack_nibbles(q)], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        hi = _unpack_high_bits(data[:, 2:6])
        q = _unpack_nibbles(data[:, 6:]) | (hi << 4)
        return (q.astype(np.float32) - 16) * d


class Q5_1Codec(BlockCodec, fmt=BlockFormat.Q5_1):
    """{d: f16, m: f16, qh: u32, 16 nibble bytes}; decode q * d + m."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        vmin = blocks.min(axis=1, keepdims=True)
        vmax = blocks.max(axis=1, keepdims=True)
        d = _to_f16((vmax - vmin) / np.float32(31))
        m = _to_f16(vmin)
        q = np.clip(_safe_codes(blocks - m.astype(np.float32), d.astype(np.float32)), 0, 31)
        return np.concatenate(
            [_f16_bytes(d), _f16_bytes(m), _pack_high_bits(q), _pack_nibbles(q)], axis=1
        )

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        m = _read_f16(data, 2)
        hi = _unpack_high_bits(data[:, 4:8])
        q = _unpack_nibbles(data[:, 8:]) | (hi << 4)
        return q.astype(np.float32) * d + m


class IQ4_NLCodec(BlockCodec, fmt=BlockFormat.IQ4_NL):
    """{d: f16, 16 nibble bytes} indexing the fixed non-linear codebook."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        d = _to_f16(_signed_extreme(blocks) / IQ4_NL_VALUES[0])
        d32 = d.astype(np.float32)
        with np.errstate(divide='ignore', invalid='ignore'):
            t = np.where(d32 == 0, 0, blocks / d32)
        idx = np.abs(t[..., None] - IQ4_NL_VALUES).argmin(axis=-1)
        return np.concatenate([_f16_bytes(d), _pack_nibbles(idx)], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        idx = _unpack_nibbles(data[:, 2:])
        return IQ4_NL_VALUES[idx] * d


class Q1_0Codec(BlockCodec, fmt=BlockFormat.Q1_0):
    """{d: f16, 128 sign bits little-endian}; bit 0 -> -d, bit 1 -> +d."""

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        # Mean magnitude is the least-squares scale for a sign code
        d = _to_f16(np.abs(blocks).mean(axis=1, keepdims=True))
        # -0.0 takes the negative code so negating a block negates its decode
        bits = (~np.signbit(blocks)).astype(np.uint8)
        return np.concatenate([_f16_bytes(d), np.packbits(bits, axis=1, bitorder='little')], axis=1)

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        d = _read_f16(data, 0)
        bits = np.unpackbits(data[:, 2:], axis=1, bitorder='little')
        return np.where(bits == 1, d, -d).astype(np.float32)


class Q2_KCodec(BlockCodec, fmt=BlockFormat.Q2_K):
    """
    {scales: 16 x (scale | min << 4), qs: 64 bytes of 2-bit codes, d: f16, dmin: f16}.

    Sixteen sub-blocks of 16 weights decode as d * sc * q - dmin * mn.
    Code for element 128n + 32j + l sits in bits 2j of qs[32n + l].
    """

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        n = blocks.shape[0]
        x = blocks.reshape(n, 16, 16)
        lo = np.minimum(x.min(axis=2), 0)
        hi = x.max(axis=2)
        scale = (hi - lo) / np.float32(3)
        mins = -lo

        d = _to_f16(scale.max(axis=1, keepdims=True) / np.float32(15))
        dmin = _to_f16(mins.max(axis=1, keepdims=True) / np.float32(15))
        sc = np.clip(_safe_codes(scale, d.astype(np.float32)), 0, 15)
        mn = np.clip(_safe_codes(mins, dmin.astype(np.float32)), 0, 15)

        eff_scale = (d.astype(np.float32) * sc)[..., None]
        eff_min = (dmin.astype(np.float32) * mn)[..., None]
        q = np.clip(_safe_codes(x + eff_min, eff_scale), 0, 3).astype(np.uint8)

        q = q.reshape(n, 2, 4, 32)
        qs = np.zeros((n, 2, 32), dtype=np.uint8)
        for j in range(4):
            qs |= q[:, :, j, :] << (2 * j)

        scales = (sc.astype(np.uint8) | (mn.astype(np.uint8) << 4))
        return np.concatenate(
            [scales, qs.reshape(n, 64), _f16_bytes(d), _f16_bytes(dmin)], axis=1
        )

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        n = data.shape[0]
        scales = data[:, :16]
        shifts = np.array([0, 2, 4, 6], dtype=np.uint8).reshape(1, 1, 4, 1)
        q = (data[:, 16:80].reshape(n, 2, 1, 32) >> shifts) & 3
        q = q.reshape(n, 16, 16).astype(np.float32)
        d = _read_f16(data, 80)
        dmin = _read_f16(data, 82)
        sc = (scales & 0x0F).astype(np.float32)[..., None]
        mn = (scales >> 4).astype(np.float32)[..., None]
        y = d[..., None] * sc * q - dmin[..., None] * mn
        return y.reshape(n, 256)


def _pack_k4_scales(sc: np.ndarray, mn: np.ndarray) -> np.ndarray:
    """Pack eight 6-bit scales and mins into 12 bytes."""
    sc = sc.astype(np.uint8)
    mn = mn.astype(np.uint8)
    out = np.empty((sc.shape[0], 12), dtype=np.uint8)
    out[:, 0:4] = sc[:, :4] | ((sc[:, 4:] >> 4) << 6)
    out[:, 4:8] = mn[:, :4] | ((mn[:, 4:] >> 4) << 6)
    out[:, 8:12] = (sc[:, 4:] & 0x0F) | ((mn[:, 4:] & 0x0F) << 4)
    return out


def unpack_k4_scales(packed: np.ndarray):
    """Inverse of the 12-byte packing: returns (scales, mins), each (n, 8)."""
    s = packed.astype(np.uint8)
    sc = np.empty((s.shape[0], 8), dtype=np.uint8)
    mn = np.empty((s.shape[0], 8), dtype=np.uint8)
    sc[:, :4] = s[:, 0:4] & 63
    mn[:, :4] = s[:, 4:8] & 63
    sc[:, 4:] = (s[:, 8:12] & 0x0F) | ((s[:, 0:4] >> 6) << 4)
    mn[:, 4:] = (s[:, 8:12] >> 4) | ((s[:, 4:8] >> 6) << 4)
    return sc, mn


class Q4_KCodec(BlockCodec, fmt=BlockFormat.Q4_K):
    """
    {d: f16, dmin: f16, 12 bytes of 6-bit scales/mins, 128 nibble bytes}.

    Eight sub-blocks of 32 weights; chunk c of 64 weights keeps sub-block 2c
    in the low nibbles and 2c + 1 in the high nibbles of qs[32c:32c + 32].
    """

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        n = blocks.shape[0]
        x = blocks.reshape(n, 8, 32)
        lo = np.minimum(x.min(axis=2), 0)
        hi = x.max(axis=2)
        scale = (hi - lo) / np.float32(15)
        mins = -lo

        d = _to_f16(scale.max(axis=1, keepdims=True) / np.float32(63))
        dmin = _to_f16(mins.max(axis=1, keepdims=True) / np.float32(63))
        sc = np.clip(_safe_codes(scale, d.astype(np.float32)), 0, 63)
        mn = np.clip(_safe_codes(mins, dmin.astype(np.float32)), 0, 63)

        eff_scale = (d.astype(np.float32) * sc)[..., None]
        eff_min = (dmin.astype(np.float32) * mn)[..., None]
        q = np.clip(_safe_codes(x + eff_min, eff_scale), 0, 15).astype(np.uint8)

        q = q.reshape(n, 4, 2, 32)
        qs = q[:, :, 0, :] | (q[:, :, 1, :] << 4)
        return np.concatenate(
            [_f16_bytes(d), _f16_bytes(dmin), _pack_k4_scales(sc, mn), qs.reshape(n, 128)],
            axis=1,
        )

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        n = data.shape[0]
        d = _read_f16(data, 0)
        dmin = _read_f16(data, 2)
        sc, mn = unpack_k4_scales(data[:, 4:16])
        qs = data[:, 16:144].reshape(n, 4, 1, 32)
        q = np.concatenate([qs & 0x0F, qs >> 4], axis=2).reshape(n, 8, 32).astype(np.float32)
        y = (d * sc.astype(np.float32))[..., None] * q - (dmin * mn.astype(np.float32))[..., None]
        return y.reshape(n, 256)


class Q6_KCodec(BlockCodec, fmt=BlockFormat.Q6_K):
    """
    {ql: 128 low-nibble bytes, qh: 64 bytes of 2-bit highs, 16 x i8 scales, d: f16}.

    Element 128h + 32k + l: low nibble in ql[64h + l + 32 * (k & 1)] (high
    half of the byte when k >= 2), top two bits at shift 2k of qh[32h + l].
    """

    @classmethod
    def quantize_blocks(cls, blocks: np.ndarray) -> np.ndarray:
        n = blocks.shape[0]
        x = blocks.reshape(n, 16, 16)
        scale = _signed_extreme(x, axis=2)[..., 0] / np.float32(-32)
        d = _to_f16(np.abs(scale).max(axis=1, keepdims=True) / np.float32(127))
        sc = np.clip(_safe_codes(scale, d.astype(np.float32)), -127, 127)
        eff = (d.astype(np.float32) * sc)[..., None]
        q = (np.clip(_safe_codes(x, eff), -32, 31) + 32).astype(np.uint8)

        q = q.reshape(n, 2, 4, 32)
        low = q & 0x0F
        high = q >> 4
        ql = np.empty((n, 2, 64), dtype=np.uint8)
        ql[:, :, :32] = low[:, :, 0, :] | (low[:, :, 2, :] << 4)
        ql[:, :, 32:] = low[:, :, 1, :] | (low[:, :, 3, :] << 4)
        qh = (high[:, :, 0, :] | (high[:, :, 1, :] << 2)
              | (high[:, :, 2, :] << 4) | (high[:, :, 3, :] << 6))
        return np.concatenate(
            [ql.reshape(n, 128), qh.reshape(n, 64), sc.astype(np.int8).view(np.uint8), _f16_bytes(d)],
            axis=1,
        )

    @classmethod
    def dequantize_blocks(cls, data: np.ndarray) -> np.ndarray:
        n = data.shape[0]
        ql = data[:, :128].reshape(n, 2, 64)
        qh = data[:, 128:192].reshape(n, 2, 32)
        sc = np.ascontiguousarray(data[:, 192:208]).view(np.int8).astype(np.float32)
        d = _read_f16(data, 208)

        low = np.stack(
            [ql[:, :, :32] & 0x0F, ql[:, :, 32:] & 0x0F, ql[:, :, :32] >> 4, ql[:, :, 32:] >> 4],
            axis=2,
        )
        high = np.stack([(qh >> (2 * k)) & 3 for k in range(4)], axis=2)
        q = (low | (high << 4)).astype(np.float32) - 32
        q = q.reshape(n, 16, 16)
        return ((d * sc)[..., None] * q).reshape(n, 256)


def codec_for(fmt: BlockFormat) -> Type[BlockCodec]:
    """Return the codec class of a quantized format."""
    codec = _CODECS.get(fmt)
    if codec is None:
        raise UnsupportedFormat(f"{fmt} is not a block-coded format")
    return codec


def quantize_blocks(blocks: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Encode ``(n, block_len)`` f32 values into ``(n, block_bytes)`` bytes."""
    codec = codec_for(fmt)
    blocks = np.asarray(blocks, dtype=np.float32).reshape(-1, fmt.block_len)
    if not np.isfinite(blocks).all():
        raise NonFiniteInput(f"Cannot quantize non-finite values to {fmt}")
    data = codec.quantize_blocks(blocks)
    assert data.shape[1] == fmt.block_bytes, f"{fmt} codec produced {data.shape[1]} bytes"
    return data


def dequantize_blocks(data: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Decode ``(n, block_bytes)`` bytes into ``(n, block_len)`` f32 values."""
    codec = codec_for(fmt)
    data = np.asarray(data, dtype=np.uint8).reshape(-1, fmt.block_bytes)
    return codec.dequantize_blocks(data).astype(np.float32, copy=False)


def quantize_block(values: Sequence[float], fmt: BlockFormat) -> QuantBlock:
    """
    Quantize exactly one block of values.

    Args:
        values: block_len finite floats
        fmt: A quantized block format

    Returns:
        The encoded block
    """
    codec_for(fmt)
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size != fmt.block_len:
        raise WrongBlockLen(arr.size, fmt.block_len)
    data = quantize_blocks(arr.reshape(1, -1), fmt)
    return QuantBlock(fmt, data.tobytes())


def dequantize_block(block: QuantBlock) -> np.ndarray:
    """
    Decode one block.

    Args:
        block: Encoded block

    Returns:
        block_len f32 values
    """
    codec_for(block.format)
    if not block.size_ok:
        raise MalformedBlock(len(block.data), block.format.block_bytes)
    raw = np.frombuffer(block.data, dtype=np.uint8).reshape(1, -1)
    return dequantize_blocks(raw, block.format)[0]
