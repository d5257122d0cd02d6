"""
Kernel library: specialization of shader templates and the pipeline cache.

The runtime hands the library a lightweight OpContext. The library picks a
variant from the device capabilities and operand formats, expands the op's
template with the matching flags and tuning values, and returns a structural
KernelKey together with the final source and a dispatch geometry. Compiled
pipelines are cached per key.
"""
import logging
import math
import re
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from quantkern.errors import (
    CompileError,
    KernelError,
    ShapeMismatch,
    UnsupportedFormatForOp,
    UnsupportedHeadDim,
    UnsupportedKVFormat,
)
from quantkern.kernels.types import (
    HEAD_DIMS,
    KV_FORMATS,
    CompiledKernel,
    DispatchGeometry,
    ElementwiseKind,
    KernelKey,
    OpContext,
    OpKind,
    TuningParams,
)
from quantkern.quant.formats import BlockFormat
from quantkern.shaderpp.preprocessor import (
    DefineSet,
    Resolver,
    load_template,
    package_resolver,
    preprocess_with_origins,
    scan_template,
)

# Configure module logger
logger = logging.getLogger(__name__)

TEMPLATES: Dict[OpKind, str] = {
    OpKind.MATMUL: 'matmul.wgsl',
    OpKind.MATVEC: 'matvec.wgsl',
    OpKind.FLASH_DECODE: 'flash_decode.wgsl',
    OpKind.FLASH_REDUCE: 'flash_reduce.wgsl',
    OpKind.FLASH_TILE: 'flash_tile.wgsl',
    OpKind.ELEMENTWISE: 'elementwise.wgsl',
    OpKind.RMS_NORM: 'rms_norm.wgsl',
    OpKind.ROPE: 'rope.wgsl',
    OpKind.SOFTMAX: 'softmax.wgsl',
    OpKind.QUANTIZE_KV: 'quantize_kv.wgsl',
}

BINDING_RE = re.compile(r'@binding\((\d+)\)\s*var<storage,\s*(read|read_write)>')

SUBGROUP_FLAG = 'USE_SUBGROUPS'
SG_MAT_VARIANT = 'sg_mat'

_ELEMENTWISE_FLAGS = {kind: f"OP_{kind.name}" for kind in ElementwiseKind}
_RHS_FORMATS = (BlockFormat.F32, BlockFormat.F16)
_KV_QUANT_FORMATS = (BlockFormat.Q8_0, BlockFormat.Q4_0)


def format_flag(fmt: BlockFormat) -> str:
    """Caller flag selecting the dequantization fragment for ``fmt``."""
    return f"FMT_{fmt.name}"


@dataclass(frozen=True)
class Specialization:
    """
    Everything the cache needs to build one kernel.

    Attributes:
        key: Structural key
        source: Final shader source
        origins: ``origin:line`` of every source line
        geometry: Dispatch geometry
        metadata: Variant decisions reported back to the runtime
    """

    key: KernelKey
    source: str
    origins: Tuple[str, ...]
    geometry: DispatchGeometry
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def bindings(self) -> Tuple[str, ...]:
        return binding_modes(self.source)


def binding_modes(source: str) -> Tuple[str, ...]:
    """Access mode of every storage binding in binding order."""
    found = sorted((int(n), mode) for n, mode in BINDING_RE.findall(source))
    return tuple(mode for _, mode in found)


def _ceil(a: int, b: int) -> int:
    return max(1, math.ceil(a / b))


def _check_rank(ctx: OpContext, count: int) -> None:
    if len(ctx.operands) != count:
        raise ShapeMismatch(f"{ctx.op} takes {count} operands, got {len(ctx.operands)}")


def _require_formats(ctx: OpContext, index: int, allowed: Sequence[BlockFormat], role: str) -> BlockFormat:
    fmt = ctx.operands[index].format
    if fmt not in allowed:
        raise UnsupportedFormatForOp(f"{ctx.op} {role} must be one of {[str(f) for f in allowed]}, got {fmt}")
    return fmt


def _require_f32_output(ctx: OpContext) -> None:
    if ctx.output.format != BlockFormat.F32:
        raise UnsupportedFormatForOp(f"{ctx.op} writes f32 output, got {ctx.output.format}")


def _head_dim(ctx: OpContext, desc_index: int = 0) -> int:
    head_dim = ctx.operands[desc_index].shape[-1]
    if head_dim not in HEAD_DIMS:
        raise UnsupportedHeadDim(f"{ctx.op} supports head dims {HEAD_DIMS}, got {head_dim}")
    return head_dim


def _kv_format(ctx: OpContext) -> BlockFormat:
    k_fmt, v_fmt = ctx.operands[1].format, ctx.operands[2].format
    if k_fmt not in KV_FORMATS or v_fmt != k_fmt:
        raise UnsupportedKVFormat(
            f"{ctx.op} needs matching K/V formats from {[str(f) for f in KV_FORMATS]}, got {k_fmt}/{v_fmt}"
        )
    return k_fmt


class _Plan:
    """Mutable accumulator for one op's flags, interpolations and dispatch rule."""

    def __init__(self, params: TuningParams):
        self.flags: List[str] = []
        self.values: Dict[str, int] = {}
        self.key_extra: List[Tuple[str, int]] = []
        self.rule = None
        self.fold = False
        self.head_dim = 128
        self.metadata: Dict[str, Any] = {}
        self.params = params


def _plan_matmul(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 2)
    a, b = ctx.operands
    rhs = _require_formats(ctx, 1, _RHS_FORMATS, 'rhs')
    _require_f32_output(ctx)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul operands {a.shape} x {b.shape} do not conform")
    # any row-major view of [M, N] is accepted (e.g. [T, H, D] for attention inputs)
    if ctx.output.shape[0] != a.shape[0] or ctx.output.n_elements != a.shape[0] * b.shape[1]:
        raise ShapeMismatch(f"matmul output {ctx.output.shape}, expected {(a.shape[0], b.shape[1])}")

    p = plan.params
    plan.flags += [format_flag(a.format)] + (['RHS_F16'] if rhs == BlockFormat.F16 else [])
    plan.values.update(p.as_dict())
    plan.values.update(A_TILE_LEN=p.TILE_M * p.TILE_K, B_TILE_LEN=p.TILE_K * p.TILE_N, RT_LEN=p.RT_M * p.RT_N)
    plan.rule = lambda M, N, **_: (_ceil(N, p.TILE_N), _ceil(M, p.TILE_M), 1)
    plan.metadata['variant'] = 'reg_tile'


def _plan_matvec(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 2)
    a, x = ctx.operands
    rhs = _require_formats(ctx, 1, _RHS_FORMATS, 'vector')
    _require_f32_output(ctx)
    if len(a.shape) != 2 or x.n_elements != a.shape[1]:
        raise ShapeMismatch(f"matvec operands {a.shape} x {x.shape} do not conform")
    if ctx.output.n_elements != a.shape[0]:
        raise ShapeMismatch(f"matvec output {ctx.output.shape}, expected {a.shape[0]} elements")

    p = plan.params
    plan.flags += [format_flag(a.format)] + (['RHS_F16'] if rhs == BlockFormat.F16 else [])
    if ctx.use_subgroups:
        plan.flags.append(SUBGROUP_FLAG)
    plan.values.update(WG_SIZE=p.WG_SIZE, ROWS_PER_WG=p.ROWS_PER_WG, VEC=p.VEC)
    plan.rule = lambda M, **_: (_ceil(M, p.ROWS_PER_WG), 1, 1)
    plan.fold = True
    plan.metadata['variant'] = 'subgroup_reduce' if ctx.use_subgroups else 'shared_reduce'


def _plan_flash_decode(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 3)
    q, k, v = ctx.operands
    kv = _kv_format(ctx)
    head_dim = _head_dim(ctx)
    _require_formats(ctx, 0, (BlockFormat.F32,), 'query')
    _require_f32_output(ctx)
    # q may keep a leading token axis of 1 ([1, H, D]) as produced by rope
    heads = q.shape if len(q.shape) == 2 else q.shape[1:] if len(q.shape) == 3 and q.shape[0] == 1 else None
    if heads is None or k.shape != v.shape or len(k.shape) != 3 or k.shape[1:] != tuple(heads):
        raise ShapeMismatch(f"flash_decode expects q[H, D] and K/V[S, H, D], got {q.shape}, {k.shape}, {v.shape}")

    p = plan.params
    plan.head_dim = head_dim
    plan.flags.append(format_flag(kv))
    plan.values.update(HEAD_DIM=head_dim, KV_TILE=p.KV_TILE, K_TILE_LEN=p.KV_TILE * head_dim)
    plan.key_extra.append(('HEAD_DIM', head_dim))
    plan.rule = lambda n_heads, splits, **_: (n_heads, splits, 1)
    plan.metadata.update(variant='split_decode', kv_format=str(kv))


def _plan_flash_reduce(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 1)
    partials = ctx.operands[0]
    _require_formats(ctx, 0, (BlockFormat.F32,), 'partials')
    _require_f32_output(ctx)
    head_dim = ctx.output.shape[-1]
    if head_dim not in HEAD_DIMS:
        raise UnsupportedHeadDim(f"flash_reduce supports head dims {HEAD_DIMS}, got {head_dim}")
    if len(partials.shape) != 3 or partials.shape[-1] != head_dim + 2:
        raise ShapeMismatch(f"flash_reduce partials must be [H, splits, D + 2], got {partials.shape}")

    plan.head_dim = head_dim
    plan.values.update(HEAD_DIM=head_dim)
    plan.key_extra.append(('HEAD_DIM', head_dim))
    plan.rule = lambda n_heads, **_: (n_heads, 1, 1)
    plan.metadata['variant'] = 'lse_merge'


def _plan_flash_tile(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 3)
    q, k, v = ctx.operands
    kv = _kv_format(ctx)
    head_dim = _head_dim(ctx)
    _require_formats(ctx, 0, (BlockFormat.F32,), 'query')
    _require_f32_output(ctx)
    if len(q.shape) != 3 or k.shape != v.shape or len(k.shape) != 3 or k.shape[1:] != q.shape[1:]:
        raise ShapeMismatch(f"flash_tile expects Q[T, H, D] and K/V[S, H, D], got {q.shape}, {k.shape}")
    if ctx.output.shape[0] != q.shape[0] or ctx.output.n_elements != q.n_elements:
        raise ShapeMismatch(f"flash_tile output {ctx.output.shape}, expected {q.shape}")

    p = plan.params
    plan.head_dim = head_dim
    plan.flags.append(format_flag(kv))
    if ctx.causal:
        plan.flags.append('CAUSAL')
    plan.values.update(
        HEAD_DIM=head_dim, Q_TILE=p.Q_TILE, KV_TILE=p.KV_TILE,
        Q_TILE_LEN=p.Q_TILE * head_dim, K_TILE_LEN=p.KV_TILE * head_dim, S_TILE_LEN=p.Q_TILE * p.KV_TILE,
    )
    plan.key_extra.append(('HEAD_DIM', head_dim))
    plan.rule = lambda n_q, n_heads, **_: (_ceil(n_q, p.Q_TILE), n_heads, 1)
    plan.metadata.update(variant='tile', kv_format=str(kv), causal=ctx.causal)


def _plan_elementwise(ctx: OpContext, plan: _Plan) -> None:
    kind = ctx.elementwise
    if kind is None:
        raise KernelError("elementwise op needs an ElementwiseKind")
    _check_rank(ctx, 2 if kind.is_binary else 1)
    a = ctx.operands[0]
    src = _require_formats(ctx, 0, _RHS_FORMATS, 'input')
    dst = ctx.output.format

    if kind == ElementwiseKind.COPY_CAST:
        if dst not in _RHS_FORMATS:
            raise UnsupportedFormatForOp(f"copy_cast writes f32 or f16, got {dst}")
    elif dst != BlockFormat.F32:
        raise UnsupportedFormatForOp(f"{kind} writes f32 output, got {dst}")

    if kind.is_binary:
        b = ctx.operands[1]
        _require_formats(ctx, 1, (BlockFormat.F32,), 'second operand')
        if a.n_elements % b.n_elements:
            raise ShapeMismatch(f"{kind}: operand {b.shape} does not broadcast over {a.shape}")
        plan.flags.append('BINARY')
    if kind != ElementwiseKind.COPY_CAST and ctx.output.n_elements != a.n_elements:
        raise ShapeMismatch(f"{kind}: output {ctx.output.shape} does not match input {a.shape}")
    if ctx.in_place:
        if src != BlockFormat.F32 or dst != BlockFormat.F32:
            raise UnsupportedFormatForOp("in-place elementwise needs f32 input and output")
        plan.flags.append('IN_PLACE')

    plan.flags.append(_ELEMENTWISE_FLAGS[kind])
    if src == BlockFormat.F16:
        plan.flags.append('SRC_F16')
    if dst == BlockFormat.F16:
        plan.flags.append('DST_F16')

    wg = plan.params.WG_SIZE
    plan.values.update(WG_SIZE=wg)
    if dst == BlockFormat.F16:
        plan.rule = lambda n, **_: (_ceil(_ceil(n, 2), wg), 1, 1)
    else:
        plan.rule = lambda n, **_: (_ceil(n, wg), 1, 1)
    plan.fold = True
    plan.metadata.update(variant=str(kind), in_place=ctx.in_place)


def _plan_rows(ctx: OpContext, plan: _Plan) -> None:
    """rms_norm and softmax: one workgroup per row."""
    x = ctx.operands[0]
    _require_formats(ctx, 0, (BlockFormat.F32,), 'input')
    _require_f32_output(ctx)
    if ctx.op == OpKind.RMS_NORM:
        _check_rank(ctx, 2)
        _require_formats(ctx, 1, (BlockFormat.F32,), 'weight')
        if ctx.operands[1].n_elements != x.row_len:
            raise ShapeMismatch(f"rms_norm weight {ctx.operands[1].shape} does not match row length {x.row_len}")
    else:
        _check_rank(ctx, 1)
    if ctx.output.shape != x.shape:
        raise ShapeMismatch(f"{ctx.op} output {ctx.output.shape}, expected {x.shape}")

    plan.values.update(WG_SIZE=plan.params.WG_SIZE)
    plan.rule = lambda rows, **_: (rows, 1, 1)
    plan.fold = True
    plan.metadata['variant'] = 'row_reduce'


def _plan_rope(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 1)
    x = ctx.operands[0]
    _require_formats(ctx, 0, (BlockFormat.F32,), 'input')
    _require_f32_output(ctx)
    if len(x.shape) != 3 or x.shape[-1] % 2:
        raise ShapeMismatch(f"rope expects x[T, H, D] with even D, got {x.shape}")
    if ctx.output.shape != x.shape:
        raise ShapeMismatch(f"rope output {ctx.output.shape}, expected {x.shape}")
    if ctx.in_place:
        plan.flags.append('IN_PLACE')

    wg = plan.params.WG_SIZE
    plan.values.update(WG_SIZE=wg)
    plan.rule = lambda n_tokens, n_heads, head_dim, **_: (_ceil(n_tokens * n_heads * head_dim // 2, wg), 1, 1)
    plan.fold = True
    plan.metadata.update(variant='pairwise', in_place=ctx.in_place)


def _plan_quantize_kv(ctx: OpContext, plan: _Plan) -> None:
    _check_rank(ctx, 1)
    x = ctx.operands[0]
    _require_formats(ctx, 0, (BlockFormat.F32,), 'input')
    dst = ctx.output.format
    if dst not in _KV_QUANT_FORMATS:
        raise UnsupportedFormatForOp(f"quantize_kv writes {[str(f) for f in _KV_QUANT_FORMATS]}, got {dst}")
    if x.row_len % dst.block_len or (x.n_elements // dst.block_len) % 2:
        raise ShapeMismatch(f"quantize_kv needs an even number of {dst.block_len}-element blocks, got {x.shape}")

    wg = plan.params.WG_SIZE
    plan.flags.append(format_flag(dst))
    plan.values.update(WG_SIZE=wg, QBLOCK_BYTES=dst.block_bytes, PAIR_WORDS=dst.block_bytes // 2)
    plan.rule = lambda n_pairs, **_: (_ceil(n_pairs, wg), 1, 1)
    plan.fold = True
    plan.metadata.update(variant='block_pairs', format=str(dst))


_PLANNERS = {
    OpKind.MATMUL: _plan_matmul,
    OpKind.MATVEC: _plan_matvec,
    OpKind.FLASH_DECODE: _plan_flash_decode,
    OpKind.FLASH_REDUCE: _plan_flash_reduce,
    OpKind.FLASH_TILE: _plan_flash_tile,
    OpKind.ELEMENTWISE: _plan_elementwise,
    OpKind.RMS_NORM: _plan_rows,
    OpKind.SOFTMAX: _plan_rows,
    OpKind.ROPE: _plan_rope,
    OpKind.QUANTIZE_KV: _plan_quantize_kv,
}


def _check_variant(ctx: OpContext) -> None:
    if ctx.variant is None:
        return
    if ctx.variant != SG_MAT_VARIANT:
        raise KernelError(f"Unknown kernel variant {ctx.variant!r}")
    if not ctx.caps.sg_matrix:
        raise UnsupportedFormatForOp(f"{SG_MAT_VARIANT} needs subgroup-matrix support, which {ctx.caps.adapter_name} lacks")
    logger.warning(f"{SG_MAT_VARIANT} kernels are not built; {ctx.op} uses the portable variant")


def build(
    ctx: OpContext,
    params: Optional[TuningParams] = None,
    resolver: Optional[Resolver] = None,
) -> Specialization:
    """
    Specialize the op's template for one context.

    Args:
        ctx: Op context from the runtime
        params: Tuning parameters, defaults when omitted
        resolver: Template resolver, the bundled shader tree when omitted

    Returns:
        Specialization with key, source, origins and geometry
    """
    params = params or TuningParams()
    _check_variant(ctx)
    plan = _Plan(params)
    _PLANNERS[ctx.op](ctx, plan)
    params.validate(ctx.caps, ctx.op, plan.head_dim)

    resolver = resolver or package_resolver()
    template = load_template(TEMPLATES[ctx.op], resolver)
    defines = DefineSet(plan.values, flags=plan.flags)
    source, origins = preprocess_with_origins(template, defines, resolver)

    key = KernelKey(
        op=ctx.op,
        formats=ctx.formats,
        flags=tuple(sorted(set(plan.flags))),
        params=params.relevant(ctx.op) + tuple(plan.key_extra),
    )
    geometry = DispatchGeometry(plan.rule, max_per_dim=ctx.caps.max_workgroups_per_dim, fold=plan.fold)
    plan.metadata.update(tuning=dict(params.relevant(ctx.op)))
    logger.debug(f"Specialized {key.label}")
    return Specialization(key, source, tuple(origins), geometry, plan.metadata)


def specialize(
    ctx: OpContext,
    params: Optional[TuningParams] = None,
) -> Tuple[KernelKey, str, DispatchGeometry]:
    """Return (key, final source, dispatch geometry) for ``ctx``."""
    spec = build(ctx, params)
    return spec.key, spec.source, spec.geometry


class KernelCache:
    """
    Pipeline cache keyed by KernelKey.

    Compilation is single-flight: concurrent requests for one key wait on
    the first compilation instead of starting their own.

    Args:
        device: Device providing ``create_pipeline(source, label, origins)``
    """

    def __init__(self, device):
        self.device = device
        self.compile_count = 0
        self._lock = threading.Lock()
        self._entries: Dict[KernelKey, Future] = {}
        self._fallbacks: Dict[KernelKey, KernelKey] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: KernelKey) -> bool:
        return key in self._entries

    def get(self, key: KernelKey) -> Optional[CompiledKernel]:
        entry = self._entries.get(self._fallbacks.get(key, key))
        if entry is None or not entry.done() or entry.exception() is not None:
            return None
        return entry.result()

    def get_or_compile(self, spec: Specialization) -> CompiledKernel:
        """
        Return the cached kernel for ``spec.key``, compiling it at most once.

        Raises:
            CompileError: The device rejected the source
        """
        with self._lock:
            entry = self._entries.get(spec.key)
            owner = entry is None
            if owner:
                entry = Future()
                self._entries[spec.key] = entry
                self.compile_count += 1
        if not owner:
            return entry.result()

        try:
            pipeline = self.device.create_pipeline(spec.source, label=spec.key.label, origins=spec.origins)
        except CompileError as e:
            logger.error(f"Compilation of {spec.key.label} failed: {e}")
            entry.set_exception(e)
            raise
        kernel = CompiledKernel(
            key=spec.key,
            pipeline=pipeline,
            geometry=spec.geometry,
            bindings=spec.bindings,
            metadata=dict(spec.metadata),
            source=spec.source,
        )
        entry.set_result(kernel)
        logger.debug(f"Compiled {spec.key.label} ({self.compile_count} compiles so far)")
        return kernel

    def kernel_for(self, ctx: OpContext, params: Optional[TuningParams] = None) -> CompiledKernel:
        """
        Specialize and compile, falling back to the portable variant when a
        subgroup variant does not compile on this device.
        """
        spec = build(ctx, params)
        fallback = self._fallbacks.get(spec.key)
        if fallback is not None:
            return self._entries[fallback].result()
        try:
            return self.get_or_compile(spec)
        except CompileError:
            if not spec.key.has_flag(SUBGROUP_FLAG):
                raise
        logger.warning(f"Subgroup variant {spec.key.label} did not compile; using the shared-memory reduce")
        portable = build(replace(ctx, force_portable=True), params)
        kernel = self.get_or_compile(portable)
        self._fallbacks[spec.key] = portable.key
        return kernel


def template_params(op: OpKind, resolver: Optional[Resolver] = None):
    """Interpolation names and flags of one op's template closure."""
    resolver = resolver or package_resolver()
    return scan_template(load_template(TEMPLATES[op], resolver), resolver)


def kernel_docs(resolver: Optional[Resolver] = None) -> str:
    """Render per-template parameter documentation as a text table."""
    lines = ['Kernel template parameters', '']
    for op, path in TEMPLATES.items():
        found = template_params(op, resolver)
        lines.append(f"{op} ({path})")
        lines.append(f"  interpolations: {', '.join(sorted(found.interpolations)) or '-'}")
        lines.append(f"  flags:          {', '.join(sorted(found.flags)) or '-'}")
    return '\n'.join(lines) + '\n'
