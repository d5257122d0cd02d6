"""
Host emulation of the kernel corpus.

Each function reproduces one template's arithmetic in float32 numpy over the
same byte-level bindings the shader sees, so the runtime can execute graphs
on machines without a WebGPU adapter. Bindings arrive as writable uint8
views of the bound buffer ranges, in binding order after the params uniform.
"""
import logging
from typing import Callable, Dict, Mapping, Sequence

import numpy as np

from quantkern.kernels.types import KernelKey, OpKind
from quantkern.quant.formats import BlockFormat, tensor_nbytes
from quantkern.quant.tensor import TensorDesc, dequantize_tensor

# Configure module logger
logger = logging.getLogger(__name__)

HostKernel = Callable[[KernelKey, Mapping[str, float], Sequence[np.ndarray]], None]

_HOST_KERNELS: Dict[OpKind, HostKernel] = {}


def host_kernel(op: OpKind):
    """Register the host emulation for ``op``."""
    def register(fn: HostKernel) -> HostKernel:
        _HOST_KERNELS[op] = fn
        return fn
    return register


def run_host_kernel(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    _HOST_KERNELS[key.op](key, values, views)


def load(view: np.ndarray, fmt: BlockFormat, count: int, start: int = 0) -> np.ndarray:
    """Decode ``count`` elements starting at element ``start`` to float32."""
    if fmt == BlockFormat.F32:
        return view[4 * start:4 * (start + count)].view('<f4').copy()
    if fmt == BlockFormat.F16:
        return view[2 * start:2 * (start + count)].view('<f2').astype(np.float32)
    # quantized operands are always read from a block boundary
    begin = tensor_nbytes((start,), fmt) if start else 0
    nbytes = tensor_nbytes((count,), fmt)
    return dequantize_tensor(view[begin:begin + nbytes], TensorDesc((count,), fmt))


def store(view: np.ndarray, values: np.ndarray, start: int = 0, fmt: BlockFormat = BlockFormat.F32) -> None:
    """Encode float values into f32 or f16 storage at element ``start``."""
    if fmt == BlockFormat.F16:
        raw = np.ascontiguousarray(values, dtype='<f2').view(np.uint8).reshape(-1)
        view[2 * start:2 * start + raw.size] = raw
    else:
        raw = np.ascontiguousarray(values, dtype='<f4').view(np.uint8).reshape(-1)
        view[4 * start:4 * start + raw.size] = raw


def _rhs_format(key: KernelKey) -> BlockFormat:
    return BlockFormat.F16 if key.has_flag('RHS_F16') else BlockFormat.F32


@host_kernel(OpKind.MATMUL)
def matmul(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    m, n, k = int(values['M']), int(values['N']), int(values['K'])
    a = load(views[0], key.formats[0], m * k).reshape(m, k)
    b = load(views[1], _rhs_format(key), k * n).reshape(k, n)
    # the shader accumulates one TILE_K slice of the inner dimension at a time
    tile_k = key.param('TILE_K', 16)
    acc = np.zeros((m, n), dtype=np.float32)
    for k0 in range(0, k, tile_k):
        acc += a[:, k0:k0 + tile_k] @ b[k0:k0 + tile_k]
    store(views[2], acc)


@host_kernel(OpKind.MATVEC)
def matvec(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    m, k = int(values['M']), int(values['K'])
    a = load(views[0], key.formats[0], m * k).reshape(m, k)
    x = load(views[1], _rhs_format(key), k)
    wg_size, vec = key.param('WG_SIZE', 128), key.param('VEC', 4)
    stride = wg_size * vec
    products = np.zeros((m, -(-k // stride) * stride), dtype=np.float32)
    products[:, :k] = a * x

    # lane l owns elements t * stride + l * vec + v, summed in that order
    lanes = products.reshape(m, -1, wg_size, vec)
    acc = np.zeros((m, wg_size), dtype=np.float32)
    for t in range(lanes.shape[1]):
        for v in range(vec):
            acc += lanes[:, t, :, v]
    # shared-memory tree reduction
    s = wg_size // 2
    while s > 0:
        acc[:, :s] += acc[:, s:2 * s]
        s //= 2
    store(views[2], acc[:, 0])


def _kv(view: np.ndarray, fmt: BlockFormat, seq_len: int, n_heads: int, head_dim: int) -> np.ndarray:
    return load(view, fmt, seq_len * n_heads * head_dim).reshape(seq_len, n_heads, head_dim)


@host_kernel(OpKind.FLASH_DECODE)
def flash_decode(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    seq_len, n_heads = int(values['seq_len']), int(values['n_heads'])
    head_dim, splits = int(values['head_dim']), int(values['splits'])
    chunk = int(values['chunk'])
    scale = np.float32(values['scale'])
    kv_fmt = key.formats[1]

    q = load(views[0], BlockFormat.F32, n_heads * head_dim).reshape(n_heads, head_dim)
    k = _kv(views[1], kv_fmt, seq_len, n_heads, head_dim)
    v = _kv(views[2], kv_fmt, seq_len, n_heads, head_dim)

    records = np.zeros((n_heads, splits, head_dim + 2), dtype=np.float32)
    records[:, :, head_dim] = -3.0e38
    for s in range(splits):
        begin = min(s * chunk, seq_len)
        end = min(begin + chunk, seq_len)
        if begin == end:
            continue
        scores = np.einsum('shd,hd->hs', k[begin:end], q) * scale
        m = scores.max(axis=1)
        p = np.exp(scores - m[:, None])
        records[:, s, :head_dim] = np.einsum('hs,shd->hd', p, v[begin:end])
        records[:, s, head_dim] = m
        records[:, s, head_dim + 1] = p.sum(axis=1)

    if splits == 1:
        l = records[:, 0, head_dim + 1:head_dim + 2]
        out = np.divide(records[:, 0, :head_dim], l, out=np.zeros_like(records[:, 0, :head_dim]), where=l > 0)
        store(views[3], out)
    else:
        store(views[3], records)


@host_kernel(OpKind.FLASH_REDUCE)
def flash_reduce(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    n_heads, head_dim, splits = int(values['n_heads']), int(values['head_dim']), int(values['splits'])
    rec = load(views[0], BlockFormat.F32, n_heads * splits * (head_dim + 2)).reshape(n_heads, splits, head_dim + 2)
    acc, m, l = rec[:, :, :head_dim], rec[:, :, head_dim], rec[:, :, head_dim + 1]

    live = l > 0
    m_all = np.where(live, m, -np.inf).max(axis=1)
    m_all = np.where(np.isfinite(m_all), m_all, 0.0).astype(np.float32)
    w = np.where(live, np.exp(np.where(live, m, 0.0) - m_all[:, None]), 0.0).astype(np.float32)
    l_all = (l * w).sum(axis=1)
    total = np.einsum('hs,hsd->hd', w, acc)
    out = np.divide(total, l_all[:, None], out=np.zeros_like(total), where=l_all[:, None] > 0)
    store(views[1], out)


@host_kernel(OpKind.FLASH_TILE)
def flash_tile(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    n_q, seq_len, n_heads = int(values['n_q']), int(values['seq_len']), int(values['n_heads'])
    head_dim, q_pos0 = int(values['head_dim']), int(values['q_pos0'])
    scale = np.float32(values['scale'])
    kv_fmt = key.formats[1]

    q = load(views[0], BlockFormat.F32, n_q * n_heads * head_dim).reshape(n_q, n_heads, head_dim)
    k = _kv(views[1], kv_fmt, seq_len, n_heads, head_dim)
    v = _kv(views[2], kv_fmt, seq_len, n_heads, head_dim)

    scores = np.einsum('thd,shd->hts', q, k) * scale
    if key.has_flag('CAUSAL'):
        visible = np.arange(seq_len)[None, :] <= (q_pos0 + np.arange(n_q))[:, None]
    else:
        visible = np.ones((n_q, seq_len), dtype=bool)
    scores = np.where(visible[None], scores, -np.inf)
    m = scores.max(axis=2, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(scores - m).astype(np.float32)
    l = p.sum(axis=2, keepdims=True)
    out = np.divide(np.einsum('hts,shd->htd', p, v), l, out=np.zeros((n_heads, n_q, head_dim), np.float32),
                    where=l > 0)
    store(views[3], out.transpose(1, 0, 2))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


_BINARY = {
    'OP_ADD': np.add,
    'OP_SUB': np.subtract,
    'OP_MUL': np.multiply,
    'OP_DIV': np.divide,
    'OP_SILU_GLU': lambda x, b: _silu(x) * b,
}


@host_kernel(OpKind.ELEMENTWISE)
def elementwise(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    n, b_len = int(values['n']), int(values['b_len'])
    src_offset, dst_offset = int(values['src_offset']), int(values['dst_offset'])
    src_fmt = BlockFormat.F16 if key.has_flag('SRC_F16') else BlockFormat.F32
    dst_fmt = BlockFormat.F16 if key.has_flag('DST_F16') else BlockFormat.F32
    x = load(views[0], src_fmt, n, src_offset)

    y = x
    for flag, fn in _BINARY.items():
        if key.has_flag(flag):
            b = load(views[1], BlockFormat.F32, b_len)
            y = fn(x, np.resize(b, n)).astype(np.float32)
    if key.has_flag('OP_SCALE'):
        y = x * np.float32(values['alpha'])

    out = views[0] if key.has_flag('IN_PLACE') else views[-1]
    store(out, y, dst_offset, dst_fmt)


@host_kernel(OpKind.RMS_NORM)
def rms_norm(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    rows, dim = int(values['rows']), int(values['dim'])
    x = load(views[0], BlockFormat.F32, rows * dim).reshape(rows, dim)
    w = load(views[1], BlockFormat.F32, dim)
    inv = np.float32(1.0) / np.sqrt((x * x).mean(axis=1, keepdims=True) + np.float32(values['eps']))
    store(views[2], x * inv * w)


@host_kernel(OpKind.SOFTMAX)
def softmax(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    rows, dim = int(values['rows']), int(values['dim'])
    x = load(views[0], BlockFormat.F32, rows * dim).reshape(rows, dim)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    store(views[1], e / e.sum(axis=1, keepdims=True))


@host_kernel(OpKind.ROPE)
def rope(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    n_tokens, n_heads, head_dim = int(values['n_tokens']), int(values['n_heads']), int(values['head_dim'])
    x = load(views[0], BlockFormat.F32, n_tokens * n_heads * head_dim).reshape(n_tokens, n_heads, head_dim // 2, 2)
    freq = np.power(np.float32(values['theta_base']), -2.0 * np.arange(head_dim // 2) / head_dim).astype(np.float32)
    angle = (int(values['pos0']) + np.arange(n_tokens, dtype=np.float32))[:, None] * freq[None, :]
    c, s = np.cos(angle)[:, None, :], np.sin(angle)[:, None, :]
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] * c - x[..., 1] * s
    out[..., 1] = x[..., 0] * s + x[..., 1] * c
    store(views[0] if key.has_flag('IN_PLACE') else views[1], out)


def f32_to_f16_bits(x: np.ndarray) -> np.ndarray:
    """Bit-level port of ``f32_to_f16_bits`` in common/bits.wgsl."""
    b = np.asarray(x, dtype='<f4').view(np.uint32).astype(np.int64)
    sign = (b >> 16) & 0x8000
    e = ((b >> 23) & 0xFF) - 112
    mant = b & 0x7FFFFF

    r = (np.clip(e, 0, None) << 10) | (mant >> 13)
    rem = mant & 0x1FFF
    r = r + ((rem > 0x1000) | ((rem == 0x1000) & ((r & 1) == 1)))

    full = mant | 0x800000
    shift = np.clip(14 - e, 14, 24)
    sub = full >> shift
    sub_rem = full & ((1 << shift) - 1)
    mid = 1 << (shift - 1)
    sub = sub + ((sub_rem > mid) | ((sub_rem == mid) & ((sub & 1) == 1)))

    bits = np.where(e >= 31, 0x7C00, np.where(e <= 0, np.where(e < -10, 0, sub), r))
    return (sign | bits).astype(np.uint32)


def f16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view('<f2').astype(np.float32)


def round_away(v: np.ndarray) -> np.ndarray:
    """Port of ``round_away`` in common/bits.wgsl, in float32."""
    a = np.abs(v).astype(np.float32)
    f = np.floor(a)
    return np.sign(v).astype(np.float32) * (f + np.floor(np.float32(2) * (a - f)))


@host_kernel(OpKind.QUANTIZE_KV)
def quantize_kv(key: KernelKey, values: Mapping[str, float], views: Sequence[np.ndarray]) -> None:
    fmt = key.formats[-1]
    n_blocks = 2 * int(values['n_pairs'])
    x = load(views[0], BlockFormat.F32, n_blocks * 32).reshape(n_blocks, 32)

    if fmt == BlockFormat.Q8_0:
        amax = np.abs(x).max(axis=1)
        d_bits = f32_to_f16_bits(amax / np.float32(127)).astype(np.int64)
        live = amax > 0
        d_bits = np.where(live, np.maximum(d_bits, 1), d_bits)
        with np.errstate(divide='ignore', invalid='ignore'):
            over = live & (amax / f16_bits_to_f32(d_bits) > np.float32(127.5))
        d_bits = d_bits + over
    else:
        # first element of largest magnitude, sign kept
        ext = x[np.arange(n_blocks), np.abs(x).argmax(axis=1)]
        d_bits = f32_to_f16_bits(ext / np.float32(-8)).astype(np.int64)

    d = f16_bits_to_f32(d_bits)[:, None]
    with np.errstate(divide='ignore', invalid='ignore'):
        codes = np.where(d != 0, round_away(x / d), np.float32(0))
    if fmt == BlockFormat.Q8_0:
        body = np.clip(codes, -127, 127).astype(np.int8).view(np.uint8)
    else:
        q = np.clip(codes + 8, 0, 15).astype(np.uint8)
        body = q[:, :16] | (q[:, 16:] << 4)

    header = d_bits.astype('<u2').view(np.uint8).reshape(n_blocks, 2)
    encoded = np.concatenate([header, body], axis=1).reshape(-1)
    start = int(values['dst_block_offset']) * fmt.block_bytes
    views[1][start:start + encoded.size] = encoded
