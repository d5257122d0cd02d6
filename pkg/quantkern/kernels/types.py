"""
Kernel library types: op kinds, specialization context, keys, tuning
parameters and dispatch geometry.
"""
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from quantkern.errors import TuningViolatesDeviceLimits
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import TensorDesc
from quantkern.runtime.caps import DeviceCaps


class OpKind(str, Enum):
    MATMUL = 'matmul'
    MATVEC = 'matvec'
    FLASH_DECODE = 'flash_decode'
    FLASH_REDUCE = 'flash_reduce'
    FLASH_TILE = 'flash_tile'
    ELEMENTWISE = 'elementwise'
    RMS_NORM = 'rms_norm'
    ROPE = 'rope'
    SOFTMAX = 'softmax'
    QUANTIZE_KV = 'quantize_kv'

    @property
    def category(self) -> str:
        """Timing-breakdown category."""
        return _CATEGORIES.get(self, 'other')

    def __str__(self) -> str:
        return self.value


_CATEGORIES = {
    OpKind.MATMUL: 'matmul',
    OpKind.MATVEC: 'matvec',
    OpKind.FLASH_DECODE: 'attention',
    OpKind.FLASH_REDUCE: 'attention',
    OpKind.FLASH_TILE: 'attention',
    OpKind.SOFTMAX: 'attention',
    OpKind.ELEMENTWISE: 'norm/elementwise',
    OpKind.RMS_NORM: 'norm/elementwise',
    OpKind.ROPE: 'norm/elementwise',
}

CATEGORIES = ('matmul', 'matvec', 'attention', 'norm/elementwise', 'other')


class ElementwiseKind(str, Enum):
    ADD = 'add'
    SUB = 'sub'
    MUL = 'mul'
    DIV = 'div'
    SCALE = 'scale'
    SILU_GLU = 'silu_glu'
    COPY_CAST = 'copy_cast'

    @property
    def is_binary(self) -> bool:
        return self in (ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.MUL,
                        ElementwiseKind.DIV, ElementwiseKind.SILU_GLU)

    def __str__(self) -> str:
        return self.value


# Formats a flash kernel accepts for its K/V cache
KV_FORMATS = (BlockFormat.F16, BlockFormat.Q8_0, BlockFormat.Q4_0)
HEAD_DIMS = (64, 128)
MAX_SPLITS = 8


def _is_pow2(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class TuningParams:
    """
    Tunable kernel parameters; every value is a power of two.

    Matmul: TILE_M = WG_Y * RT_M and TILE_N = WG_X * RT_N.
    """

    TILE_M: int = 64
    TILE_N: int = 64
    TILE_K: int = 16
    RT_M: int = 8
    RT_N: int = 4
    WG_X: int = 16
    WG_Y: int = 8
    WG_SIZE: int = 128
    ROWS_PER_WG: int = 1
    VEC: int = 4
    Q_TILE: int = 8
    KV_TILE: int = 32
    SPLITS: int = 1

    @classmethod
    def names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def with_overrides(self, overrides: Optional[Mapping[str, int]]) -> 'TuningParams':
        if not overrides:
            return self
        unknown = set(overrides) - set(self.names())
        if unknown:
            raise TuningViolatesDeviceLimits(f"Unknown tuning parameters: {sorted(unknown)}")
        return replace(self, **{k: int(v) for k, v in overrides.items()})

    def as_dict(self) -> Dict[str, int]:
        return {name: getattr(self, name) for name in self.names()}

    def shared_bytes(self, op: 'OpKind', head_dim: int = 128) -> int:
        """Workgroup memory the op's template declares with these parameters."""
        if op == OpKind.MATMUL:
            return 4 * (self.TILE_M * self.TILE_K + self.TILE_K * self.TILE_N)
        if op == OpKind.MATVEC:
            return 4 * self.WG_SIZE
        if op == OpKind.FLASH_DECODE:
            return 4 * (head_dim + self.KV_TILE * head_dim + self.KV_TILE)
        if op == OpKind.FLASH_TILE:
            return 4 * (self.Q_TILE * head_dim + self.KV_TILE * head_dim + self.Q_TILE * self.KV_TILE)
        if op in (OpKind.RMS_NORM, OpKind.SOFTMAX):
            return 4 * self.WG_SIZE
        return 0

    def validate(self, caps: DeviceCaps, op: 'OpKind', head_dim: int = 128) -> None:
        """Raise TuningViolatesDeviceLimits when the parameters cannot run on ``caps``."""
        for name, value in self.as_dict().items():
            if not _is_pow2(value):
                raise TuningViolatesDeviceLimits(f"{name}={value} is not a power of two")

        if op == OpKind.MATMUL:
            if self.TILE_M != self.WG_Y * self.RT_M or self.TILE_N != self.WG_X * self.RT_N:
                raise TuningViolatesDeviceLimits(
                    f"Matmul tiles must satisfy TILE_M=WG_Y*RT_M and TILE_N=WG_X*RT_N, got {self.as_dict()}"
                )
            threads = self.WG_X * self.WG_Y
            if self.WG_X > caps.max_workgroup_size_x:
                raise TuningViolatesDeviceLimits(f"WG_X={self.WG_X} exceeds {caps.max_workgroup_size_x}")
        elif op in (OpKind.MATVEC, OpKind.RMS_NORM, OpKind.SOFTMAX):
            threads = self.WG_SIZE
            if op == OpKind.MATVEC and self.VEC not in (1, 2, 4):
                raise TuningViolatesDeviceLimits(f"VEC must be 1, 2 or 4, got {self.VEC}")
        elif op in (OpKind.FLASH_DECODE, OpKind.FLASH_TILE):
            threads = head_dim
            if self.KV_TILE > head_dim:
                raise TuningViolatesDeviceLimits(f"KV_TILE={self.KV_TILE} exceeds head dim {head_dim}")
            if self.SPLITS > MAX_SPLITS:
                raise TuningViolatesDeviceLimits(f"SPLITS={self.SPLITS} exceeds {MAX_SPLITS}")
        else:
            threads = self.WG_SIZE

        if threads > caps.max_workgroup_size:
            raise TuningViolatesDeviceLimits(f"{threads} invocations exceed device max {caps.max_workgroup_size}")
        needed = self.shared_bytes(op, head_dim)
        if needed > caps.shared_memory_bytes:
            raise TuningViolatesDeviceLimits(
                f"{op} needs {needed} bytes of workgroup memory, device allows {caps.shared_memory_bytes}"
            )

    def relevant(self, op: 'OpKind') -> Tuple[Tuple[str, int], ...]:
        """The parameters that shape ``op``'s source; only these enter the key."""
        names = _RELEVANT.get(op, ('WG_SIZE',))
        return tuple((name, getattr(self, name)) for name in names)


_RELEVANT = {
    OpKind.MATMUL: ('TILE_M', 'TILE_N', 'TILE_K', 'RT_M', 'RT_N', 'WG_X', 'WG_Y'),
    OpKind.MATVEC: ('WG_SIZE', 'ROWS_PER_WG', 'VEC'),
    OpKind.FLASH_DECODE: ('KV_TILE',),
    OpKind.FLASH_TILE: ('Q_TILE', 'KV_TILE'),
    OpKind.FLASH_REDUCE: (),
    OpKind.RMS_NORM: ('WG_SIZE',),
    OpKind.SOFTMAX: ('WG_SIZE',),
    OpKind.ROPE: ('WG_SIZE',),
    OpKind.ELEMENTWISE: ('WG_SIZE',),
    OpKind.QUANTIZE_KV: ('WG_SIZE',),
}


@dataclass(frozen=True)
class OpContext:
    """
    Lightweight context the runtime passes to the library for one op.

    Attributes:
        op: Op kind
        operands: Input tensor descriptions in the op's operand order
        output: Output tensor description
        caps: Device capabilities
        in_place: Output aliases the first operand
        elementwise: Elementwise kind for ELEMENTWISE ops
        causal: Causal masking for FLASH_TILE
        force_portable: Never select subgroup variants
        variant: Explicit variant request (``sg_mat``), else None
    """

    op: OpKind
    operands: Tuple[TensorDesc, ...]
    output: TensorDesc
    caps: DeviceCaps = field(default_factory=DeviceCaps)
    in_place: bool = False
    elementwise: Optional[ElementwiseKind] = None
    causal: bool = False
    force_portable: bool = False
    variant: Optional[str] = None

    @property
    def formats(self) -> Tuple[BlockFormat, ...]:
        return tuple(d.format for d in self.operands) + (self.output.format,)

    @property
    def use_subgroups(self) -> bool:
        return self.caps.subgroups and not self.force_portable


@dataclass(frozen=True)
class KernelKey:
    """
    Structural specialization identity.

    Two contexts that specialize to the same source produce equal keys.
    """

    op: OpKind
    formats: Tuple[BlockFormat, ...]
    flags: Tuple[str, ...] = ()
    params: Tuple[Tuple[str, int], ...] = ()

    def has_flag(self, flag: str) -> bool:
        return flag in self.flags

    def param(self, name: str, default: int = 0) -> int:
        return dict(self.params).get(name, default)

    @property
    def label(self) -> str:
        fmts = 'x'.join(str(f) for f in self.formats)
        parts = [str(self.op), fmts] + list(self.flags) + [f"{k}={v}" for k, v in self.params]
        return ':'.join(p for p in parts if p)


@dataclass(frozen=True)
class DispatchGeometry:
    """
    Maps problem dimensions to a 3-D workgroup grid.

    Attributes:
        rule: Function of keyword problem dims returning (x, y, z)
        max_per_dim: Device dispatch limit per dimension
        fold: Fold x overflow into y (1-D kernels that rebuild a flat index)
    """

    rule: Callable[..., Tuple[int, int, int]]
    max_per_dim: int = 65535
    fold: bool = False

    def grid(self, **dims: int) -> Tuple[int, int, int]:
        x, y, z = self.rule(**dims)
        if self.fold and x > self.max_per_dim:
            # fold the overflow into y; kernels rebuild the flat index from num_workgroups
            y = y * math.ceil(x / self.max_per_dim)
            x = self.max_per_dim
        return int(x), int(y), int(z)


@dataclass(frozen=True)
class CompiledKernel:
    """
    A compiled pipeline plus what the runtime needs to dispatch it.

    Attributes:
        key: Specialization key
        pipeline: Device pipeline handle
        geometry: Dispatch geometry
        bindings: Access mode per binding after the params uniform (``read`` or ``read_write``)
        metadata: Chosen variant and parameters
        source: Final shader source
    """

    key: KernelKey
    pipeline: Any
    geometry: DispatchGeometry
    bindings: Tuple[str, ...]
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)
    source: str = field(default='', compare=False, repr=False)
