"""
Uniform parameter layouts.

Each layout mirrors the ``Params`` struct written in the op's template; the
fields are 4-byte scalars packed in order and padded to 16 bytes.
"""
import struct
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

from quantkern.kernels.types import OpKind

_CODES = {'u32': 'I', 'i32': 'i', 'f32': 'f'}


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, scalar type) fields of one kernel's uniform block."""

    op: OpKind
    fields: Tuple[Tuple[str, str], ...]

    @property
    def _struct(self) -> struct.Struct:
        codes = ''.join(_CODES[kind] for _, kind in self.fields)
        pad = (-len(self.fields)) % 4
        return struct.Struct('<' + codes + 'I' * pad)

    @property
    def size(self) -> int:
        return self._struct.size

    def pack(self, values: Mapping[str, float]) -> bytes:
        missing = [name for name, _ in self.fields if name not in values]
        if missing:
            raise KeyError(f"{self.op} params missing {missing}")
        out = []
        for name, kind in self.fields:
            value = values[name]
            out.append(float(value) if kind == 'f32' else int(value))
        pad = (-len(self.fields)) % 4
        return self._struct.pack(*out, *([0] * pad))

    def unpack(self, data: bytes) -> Dict[str, float]:
        raw = self._struct.unpack(bytes(data[:self.size]))
        return {name: raw[i] for i, (name, _) in enumerate(self.fields)}


LAYOUTS: Dict[OpKind, ParamLayout] = {
    OpKind.MATMUL: ParamLayout(OpKind.MATMUL, (('M', 'u32'), ('N', 'u32'), ('K', 'u32'))),
    OpKind.MATVEC: ParamLayout(OpKind.MATVEC, (('M', 'u32'), ('K', 'u32'))),
    OpKind.FLASH_DECODE: ParamLayout(OpKind.FLASH_DECODE, (
        ('seq_len', 'u32'), ('n_heads', 'u32'), ('head_dim', 'u32'), ('splits', 'u32'),
        ('scale', 'f32'), ('chunk', 'u32'),
    )),
    OpKind.FLASH_REDUCE: ParamLayout(OpKind.FLASH_REDUCE, (
        ('n_heads', 'u32'), ('head_dim', 'u32'), ('splits', 'u32'),
    )),
    OpKind.FLASH_TILE: ParamLayout(OpKind.FLASH_TILE, (
        ('n_q', 'u32'), ('seq_len', 'u32'), ('n_heads', 'u32'), ('head_dim', 'u32'),
        ('scale', 'f32'), ('q_pos0', 'u32'),
    )),
    OpKind.ELEMENTWISE: ParamLayout(OpKind.ELEMENTWISE, (
        ('n', 'u32'), ('b_len', 'u32'), ('alpha', 'f32'), ('dst_offset', 'u32'), ('src_offset', 'u32'),
    )),
    OpKind.RMS_NORM: ParamLayout(OpKind.RMS_NORM, (('rows', 'u32'), ('dim', 'u32'), ('eps', 'f32'))),
    OpKind.ROPE: ParamLayout(OpKind.ROPE, (
        ('n_tokens', 'u32'), ('n_heads', 'u32'), ('head_dim', 'u32'), ('pos0', 'u32'), ('theta_base', 'f32'),
    )),
    OpKind.SOFTMAX: ParamLayout(OpKind.SOFTMAX, (('rows', 'u32'), ('dim', 'u32'))),
    OpKind.QUANTIZE_KV: ParamLayout(OpKind.QUANTIZE_KV, (('n_pairs', 'u32'), ('dst_block_offset', 'u32'))),
}


def layout_for(op: OpKind) -> ParamLayout:
    return LAYOUTS[op]
