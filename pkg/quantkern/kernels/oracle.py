"""
Float64 CPU oracles for the kernel corpus.

Quantized operands are decoded with the reference codecs first; every
oracle then computes in float64 so kernel results can be scored with NMSE.
"""
from typing import Optional

import numpy as np

from quantkern.errors import EpsNonPositive
from quantkern.kernels.types import ElementwiseKind


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    return _f64(a) @ _f64(b)


def matvec(a, x) -> np.ndarray:
    return _f64(a) @ _f64(x).reshape(-1)


def attention(
    q,
    k,
    v,
    scale: float,
    causal: bool = False,
    q_pos0: Optional[int] = None,
) -> np.ndarray:
    """
    Naive masked softmax attention.

    Args:
        q: Queries ``[T, H, D]``
        k: Keys ``[S, H, D]``
        v: Values ``[S, H, D]``
        scale: Logit scale
        causal: Mask keys after each query's absolute position
        q_pos0: Absolute position of query 0, ``S - T`` when omitted

    Returns:
        ``[T, H, D]`` output
    """
    q, k, v = _f64(q), _f64(k), _f64(v)
    n_q, seq_len = q.shape[0], k.shape[0]
    scores = np.einsum('thd,shd->hts', q, k) * scale
    if causal:
        pos0 = seq_len - n_q if q_pos0 is None else q_pos0
        visible = np.arange(seq_len)[None, :] <= (pos0 + np.arange(n_q))[:, None]
        scores = np.where(visible[None], scores, -np.inf)
    m = scores.max(axis=2, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(scores - m)
    l = p.sum(axis=2, keepdims=True)
    out = np.divide(np.einsum('hts,shd->htd', p, v), l, out=np.zeros((q.shape[1], n_q, q.shape[2])), where=l > 0)
    return out.transpose(1, 0, 2)


def decode_attention(q, k, v, scale: float) -> np.ndarray:
    """Single-query attention: ``q[H, D]`` against ``K/V[S, H, D]``."""
    return attention(_f64(q)[None], k, v, scale)[0]


def silu(x) -> np.ndarray:
    x = _f64(x)
    return x / (1.0 + np.exp(-x))


def elementwise(kind: ElementwiseKind, a, b=None, alpha: float = 1.0) -> np.ndarray:
    a = _f64(a)
    if kind.is_binary:
        b = np.resize(_f64(b).reshape(-1), a.size).reshape(a.shape)
    if kind == ElementwiseKind.ADD:
        return a + b
    if kind == ElementwiseKind.SUB:
        return a - b
    if kind == ElementwiseKind.MUL:
        return a * b
    if kind == ElementwiseKind.DIV:
        return a / b
    if kind == ElementwiseKind.SCALE:
        return a * alpha
    if kind == ElementwiseKind.SILU_GLU:
        return silu(a) * b
    return a.copy()


def rms_norm(x, w, eps: float) -> np.ndarray:
    if eps <= 0:
        raise EpsNonPositive(f"eps must be positive, got {eps}")
    x = _f64(x)
    return x * _f64(w) / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)


def rope(x, pos0: int, theta_base: float) -> np.ndarray:
    """Rotate adjacent pairs of ``x[T, H, D]``; token t sits at position ``pos0 + t``."""
    x = _f64(x)
    n_tokens, _, head_dim = x.shape
    freq = theta_base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    angle = (pos0 + np.arange(n_tokens))[:, None, None] * freq[None, None, :]
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * np.cos(angle) - x1 * np.sin(angle)
    out[..., 1::2] = x0 * np.sin(angle) + x1 * np.cos(angle)
    return out


def softmax(x) -> np.ndarray:
    x = _f64(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
