"""
Micro transformer-block graphs and a float64 reference executor.

The decode block processes one token against a KV cache:
rms_norm -> q/k/v matvec -> rope -> KV store -> flash_decode -> o matvec -> residual add.
The prefill block processes T tokens with matmul projections and causal
flash_tile attention. ``reference_execute`` evaluates any graph on the CPU
in float64 so a device run can be scored with NMSE.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from quantkern.errors import ShapeMismatch, UnsupportedFormatForOp
from quantkern.kernels import oracle
from quantkern.kernels.types import ElementwiseKind, OpKind, TuningParams
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import TensorDesc, roundtrip_tensor
from quantkern.runtime.executor import DEFAULT_EPS, DEFAULT_THETA_BASE, dispatch_values
from quantkern.runtime.graph import OpGraph

# Configure module logger
logger = logging.getLogger(__name__)

PROJECTIONS = ('wq', 'wk', 'wv', 'wo')
PREFILL_WEIGHT_FORMATS = (BlockFormat.F32, BlockFormat.F16)


@dataclass(frozen=True)
class BlockShape:
    """
    Dimensions of a micro block.

    Attributes:
        n_heads: Attention heads
        head_dim: Per-head dimension (64 or 128)
        max_context: KV cache capacity in tokens
    """

    n_heads: int = 4
    head_dim: int = 64
    max_context: int = 4096

    @property
    def dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def cache_shape(self):
        return (self.max_context, self.n_heads, self.head_dim)


def _store_kv(graph: OpGraph, src: str, cache: str, kv_format: BlockFormat, name: str, row0: int) -> str:
    """Append a node writing ``src`` into ``cache`` starting at element ``row0``."""
    out = f"{cache}@{name}"
    desc = graph.tensors[cache]
    if kv_format == BlockFormat.F16:
        graph.add_node(OpKind.ELEMENTWISE, [src], out, desc, name=name, alias_of=cache,
                       elementwise=ElementwiseKind.COPY_CAST, scalars={'dst_offset': row0})
    elif kv_format in (BlockFormat.Q8_0, BlockFormat.Q4_0):
        graph.add_node(OpKind.QUANTIZE_KV, [src], out, desc, name=name, alias_of=cache,
                       scalars={'dst_block_offset': row0 // kv_format.block_len})
    else:
        raise UnsupportedFormatForOp(f"KV cache format must be f16, q8_0 or q4_0, got {kv_format}")
    return out


def build_decode_block(
    shape: BlockShape = BlockShape(),
    weight_format: BlockFormat = BlockFormat.Q8_0,
    kv_format: BlockFormat = BlockFormat.F16,
    position: int = 0,
    splits: int = 1,
    eps: float = DEFAULT_EPS,
    theta_base: float = DEFAULT_THETA_BASE,
) -> OpGraph:
    """
    Single-token block against a KV cache already holding ``position`` tokens.

    Args:
        shape: Block dimensions
        weight_format: Format of the four projection matrices
        kv_format: KV cache format
        position: Position of the new token (tokens already cached)
        splits: flash_decode split count
        eps: rms_norm epsilon
        theta_base: rope base

    Returns:
        The graph; ``out`` is its output tensor
    """
    e, h, d = shape.dim, shape.n_heads, shape.head_dim
    f32 = BlockFormat.F32
    g = OpGraph(f"decode-{weight_format}-{kv_format}")
    g.add_external('x', TensorDesc((1, e), f32))
    g.add_external('attn_norm', TensorDesc((e,), f32))
    for w in PROJECTIONS:
        g.add_external(w, TensorDesc((e, e), weight_format))
    g.add_external('k_cache', TensorDesc(shape.cache_shape, kv_format), kv=True)
    g.add_external('v_cache', TensorDesc(shape.cache_shape, kv_format), kv=True)

    heads = TensorDesc((1, h, d), f32)
    g.add_node(OpKind.RMS_NORM, ['x', 'attn_norm'], 'h', TensorDesc((1, e), f32), name='norm', scalars={'eps': eps})
    g.add_node(OpKind.MATVEC, ['wq', 'h'], 'q', heads, name='q_proj')
    g.add_node(OpKind.MATVEC, ['wk', 'h'], 'k', heads, name='k_proj')
    g.add_node(OpKind.MATVEC, ['wv', 'h'], 'v', heads, name='v_proj')
    g.add_node(OpKind.ROPE, ['q'], 'q_rot', heads, name='q_rope', scalars={'theta_base': theta_base})
    g.add_node(OpKind.ROPE, ['k'], 'k_rot', heads, name='k_rope', scalars={'theta_base': theta_base})
    k_all = _store_kv(g, 'k_rot', 'k_cache', kv_format, 'k_store', 0)
    v_all = _store_kv(g, 'v', 'v_cache', kv_format, 'v_store', 0)
    g.add_node(OpKind.FLASH_DECODE, ['q_rot', k_all, v_all], 'attn', TensorDesc((h, d), f32), name='attention',
               scalars={'splits': splits, 'scale': 1.0 / math.sqrt(d)})
    g.add_node(OpKind.MATVEC, ['wo', 'attn'], 'o', TensorDesc((1, e), f32), name='o_proj')
    g.add_node(OpKind.ELEMENTWISE, ['x', 'o'], 'out', TensorDesc((1, e), f32), name='residual',
               elementwise=ElementwiseKind.ADD)
    set_position(g, position)
    return g


def build_prefill_block(
    shape: BlockShape = BlockShape(),
    n_tokens: int = 512,
    weight_format: BlockFormat = BlockFormat.F16,
    kv_format: BlockFormat = BlockFormat.F16,
    position: int = 0,
    eps: float = DEFAULT_EPS,
    theta_base: float = DEFAULT_THETA_BASE,
) -> OpGraph:
    """
    ``n_tokens``-token causal block appended after ``position`` cached tokens.

    Projections multiply activations ``[T, E]`` by transposed weights
    ``[E, E]``, which matmul reads as its f32/f16 right-hand side.
    """
    if weight_format not in PREFILL_WEIGHT_FORMATS:
        raise UnsupportedFormatForOp(f"Prefill weights must be f32 or f16, got {weight_format}")
    e, h, d = shape.dim, shape.n_heads, shape.head_dim
    f32 = BlockFormat.F32
    g = OpGraph(f"prefill{n_tokens}-{weight_format}-{kv_format}")
    g.add_external('x', TensorDesc((n_tokens, e), f32))
    g.add_external('attn_norm', TensorDesc((e,), f32))
    for w in PROJECTIONS:
        g.add_external(w, TensorDesc((e, e), weight_format))
    g.add_external('k_cache', TensorDesc(shape.cache_shape, kv_format), kv=True)
    g.add_external('v_cache', TensorDesc(shape.cache_shape, kv_format), kv=True)

    heads = TensorDesc((n_tokens, h, d), f32)
    rows = TensorDesc((n_tokens, e), f32)
    g.add_node(OpKind.RMS_NORM, ['x', 'attn_norm'], 'h', rows, name='norm', scalars={'eps': eps})
    g.add_node(OpKind.MATMUL, ['h', 'wq'], 'q', heads, name='q_proj')
    g.add_node(OpKind.MATMUL, ['h', 'wk'], 'k', heads, name='k_proj')
    g.add_node(OpKind.MATMUL, ['h', 'wv'], 'v', heads, name='v_proj')
    g.add_node(OpKind.ROPE, ['q'], 'q_rot', heads, name='q_rope', scalars={'theta_base': theta_base})
    g.add_node(OpKind.ROPE, ['k'], 'k_rot', heads, name='k_rope', scalars={'theta_base': theta_base})
    k_all = _store_kv(g, 'k_rot', 'k_cache', kv_format, 'k_store', 0)
    v_all = _store_kv(g, 'v', 'v_cache', kv_format, 'v_store', 0)
    g.add_node(OpKind.FLASH_TILE, ['q_rot', k_all, v_all], 'attn', rows, name='attention', causal=True,
               scalars={'scale': 1.0 / math.sqrt(d)})
    g.add_node(OpKind.MATMUL, ['attn', 'wo'], 'o', rows, name='o_proj')
    g.add_node(OpKind.ELEMENTWISE, ['x', 'o'], 'out', rows, name='residual', elementwise=ElementwiseKind.ADD)
    set_position(g, position)
    return g


def set_position(graph: OpGraph, position: int) -> None:
    """
    Move a block to a new cache position without rebuilding it.

    The kernels and buffers stay the same; only scalar parameters change.
    """
    n_tokens = graph.tensors['x'].shape[0]
    capacity = graph.tensors['k_cache'].shape[0]
    if position < 0 or position + n_tokens > capacity:
        raise ShapeMismatch(f"Tokens {position}..{position + n_tokens} do not fit a cache of {capacity}")
    row0 = position * graph.tensors['k_cache'].row_len * graph.tensors['k_cache'].shape[1]
    for name in ('q_rope', 'k_rope'):
        graph.node(name).scalars['pos0'] = position
    for name in ('k_store', 'v_store'):
        node = graph.node(name)
        if node.op == OpKind.QUANTIZE_KV:
            node.scalars['dst_block_offset'] = row0 // graph.tensors[node.output].format.block_len
        else:
            node.scalars['dst_offset'] = row0
    attention = graph.node('attention')
    attention.scalars['seq_len'] = position + n_tokens
    if attention.op == OpKind.FLASH_TILE:
        attention.scalars['q_pos0'] = position


def random_inputs(graph: OpGraph, rng: np.random.Generator, kv_fill: int = 0) -> Dict[str, np.ndarray]:
    """
    Random f32 values for every external tensor.

    Weights are scaled by 1/sqrt(fan_in); KV caches hold ``kv_fill`` random
    rows followed by zeros.
    """
    values = {}
    for name in graph.external:
        desc = graph.tensors[name]
        if graph.external[name]:
            cache = np.zeros(desc.shape, dtype=np.float32)
            cache[:kv_fill] = rng.standard_normal((kv_fill,) + desc.shape[1:]).astype(np.float32)
            values[name] = cache
        elif name == 'attn_norm':
            values[name] = (1.0 + 0.1 * rng.standard_normal(desc.shape)).astype(np.float32)
        elif name in PROJECTIONS:
            values[name] = (rng.standard_normal(desc.shape) / math.sqrt(desc.shape[0])).astype(np.float32)
        else:
            values[name] = rng.standard_normal(desc.shape).astype(np.float32)
    return values


def _as_stored(values: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    row = fmt.block_len if fmt.is_quantized else arr.size
    return roundtrip_tensor(arr.reshape(-1, row), fmt).astype(np.float64).reshape(arr.shape)


def reference_execute(graph: OpGraph, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    Evaluate ``graph`` on the CPU in float64.

    External tensors are first rounded through their storage format, so the
    reference sees the same weights and cache contents as the device.

    Args:
        graph: Graph to evaluate
        inputs: f32 values of every external tensor

    Returns:
        {tensor name: float64 array} for every tensor of the graph
    """
    env: Dict[str, np.ndarray] = {}
    for name in graph.external:
        if name not in inputs:
            raise ShapeMismatch(f"No value for external tensor {name!r}")
        env[name] = _as_stored(inputs[name], graph.tensors[name].format).reshape(graph.tensors[name].shape)

    params = TuningParams()
    for node in graph.topological_order():
        values = dispatch_values(graph, node, params)
        x = [env[name] for name in node.inputs]
        out_desc = graph.tensors[node.output]
        op = node.op

        if node.alias_of is not None and not node.in_place:
            root = graph.storage_root(node.output)
            flat = env[root].reshape(-1)
            src = x[0].reshape(-1)
            if op == OpKind.QUANTIZE_KV:
                start = int(values['dst_block_offset']) * out_desc.format.block_len
            else:
                start = int(values['dst_offset'])
                src = src[int(values['src_offset']):int(values['src_offset']) + int(values['n'])]
            flat[start:start + src.size] = _as_stored(src, out_desc.format)
            env[node.output] = env[root]
            continue

        if op == OpKind.MATMUL:
            y = oracle.matmul(x[0], x[1])
        elif op == OpKind.MATVEC:
            y = oracle.matvec(x[0], x[1])
        elif op == OpKind.RMS_NORM:
            y = oracle.rms_norm(x[0].reshape(-1, values['dim']), x[1].reshape(-1), values['eps'])
        elif op == OpKind.SOFTMAX:
            y = oracle.softmax(x[0].reshape(-1, values['dim']))
        elif op == OpKind.ROPE:
            y = oracle.rope(x[0], int(values['pos0']), values['theta_base'])
        elif op == OpKind.ELEMENTWISE:
            n, offset = int(values['n']), int(values['src_offset'])
            a = x[0].reshape(-1)[offset:offset + n]
            b = x[1] if len(x) > 1 else None
            y = oracle.elementwise(node.elementwise, a, b, values['alpha'])
        elif op == OpKind.FLASH_DECODE:
            s = int(values['seq_len'])
            q = x[0].reshape(x[1].shape[1:])
            y = oracle.decode_attention(q, x[1][:s], x[2][:s], values['scale'])
        elif op == OpKind.FLASH_TILE:
            s = int(values['seq_len'])
            y = oracle.attention(x[0], x[1][:s], x[2][:s], values['scale'], causal=node.causal,
                                 q_pos0=int(values['q_pos0']))
        else:
            raise UnsupportedFormatForOp(f"No reference for {op}")

        if out_desc.format != BlockFormat.F32:
            y = _as_stored(y, out_desc.format)
        env[node.output] = np.asarray(y, dtype=np.float64).reshape(out_desc.shape)
        if node.in_place:
            env[graph.storage_root(node.output)] = env[node.output]
    return env

