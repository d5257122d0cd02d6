"""
GGUF v3 writer, used for test fixtures and by ``extract``-style tooling.
"""
import io
import logging
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

from quantkern.errors import SizeMismatch, UnknownValueKind
from quantkern.gguf.constants import (
    ALIGNMENT_KEY,
    DEFAULT_ALIGNMENT,
    GGUF_MAGIC,
    GGUF_VERSION,
    HEADER,
    SCALAR_STRUCTS,
    U32,
    U64,
    ValueKind,
    align_up,
)
from quantkern.gguf.model import MetadataValue, TensorInfo

# Configure module logger
logger = logging.getLogger(__name__)

MetadataInput = Mapping[str, Union[MetadataValue, Any]]
TensorInput = Sequence[Tuple[TensorInfo, bytes]]

_INT32_MIN, _INT32_MAX = -(1 << 31), (1 << 31) - 1


def infer_value(value: Any) -> MetadataValue:
    """
    Wrap a plain Python value into a typed metadata value.

    bool maps to BOOL, int to INT32 (INT64 or UINT64 when out of range),
    float to FLOAT64, str to STRING and a list or tuple to an ARRAY whose
    item kind is inferred from its first element (INT32 when empty).
    """
    if isinstance(value, MetadataValue):
        return value
    if isinstance(value, (list, tuple)):
        items = tuple(value)
        if not items:
            return MetadataValue(ValueKind.ARRAY, (), ValueKind.INT32)
        item_kinds = {infer_value(v).kind for v in items}
        if ValueKind.ARRAY in item_kinds:
            raise UnknownValueKind("Metadata arrays of arrays are not supported")
        for widest in (ValueKind.STRING, ValueKind.FLOAT64, ValueKind.UINT64, ValueKind.INT64,
                       ValueKind.INT32, ValueKind.BOOL):
            if widest in item_kinds:
                return MetadataValue(ValueKind.ARRAY, items, widest)
    if isinstance(value, bool):
        return MetadataValue(ValueKind.BOOL, value)
    if isinstance(value, int):
        if _INT32_MIN <= value <= _INT32_MAX:
            return MetadataValue(ValueKind.INT32, value)
        return MetadataValue(ValueKind.INT64 if value < 0 else ValueKind.UINT64, value)
    if isinstance(value, float):
        return MetadataValue(ValueKind.FLOAT64, value)
    if isinstance(value, str):
        return MetadataValue(ValueKind.STRING, value)
    raise UnknownValueKind(f"Cannot store {type(value).__name__} as GGUF metadata")


def _encode_scalar(kind: ValueKind, value: Any) -> bytes:
    if kind == ValueKind.STRING:
        raw = value.encode('utf-8')
        return U64.pack(len(raw)) + raw
    return SCALAR_STRUCTS[kind].pack(value)


def _encode_value(item: MetadataValue) -> bytes:
    out = U32.pack(int(item.kind))
    if item.kind != ValueKind.ARRAY:
        return out + _encode_scalar(item.kind, item.value)
    if item.item_kind is None or item.item_kind == ValueKind.ARRAY:
        raise UnknownValueKind("Metadata array needs a scalar item kind")
    out += U32.pack(int(item.item_kind)) + U64.pack(len(item.value))
    return out + b''.join(_encode_scalar(item.item_kind, v) for v in item.value)


def normalize_metadata(metadata: MetadataInput) -> Dict[str, MetadataValue]:
    typed = {key: infer_value(value) for key, value in metadata.items()}
    if ALIGNMENT_KEY in typed and typed[ALIGNMENT_KEY].kind != ValueKind.UINT32:
        typed[ALIGNMENT_KEY] = MetadataValue(ValueKind.UINT32, int(typed[ALIGNMENT_KEY].value))
    # Arrays are held as tuples so values compare equal after a read
    return {
        key: MetadataValue(v.kind, tuple(v.value), v.item_kind) if v.kind == ValueKind.ARRAY else v
        for key, v in typed.items()
    }


def layout_tensors(infos: Sequence[TensorInfo], alignment: int = DEFAULT_ALIGNMENT) -> List[TensorInfo]:
    """Assign sequential aligned offsets in index order."""
    placed = []
    offset = 0
    for info in infos:
        offset = align_up(offset, alignment)
        placed.append(TensorInfo(name=info.name, dims=info.dims, format=info.format, offset=offset))
        offset += info.nbytes
    return placed


def write_gguf(metadata: MetadataInput, tensors: TensorInput) -> bytes:
    """
    Serialize a GGUF v3 file.

    Tensor offsets are reassigned sequentially with the file's alignment, so
    writing a file that was just read reproduces it byte for byte.

    Args:
        metadata: Key to typed value (or plain Python value)
        tensors: (TensorInfo, payload) pairs in index order

    Returns:
        The complete file as bytes
    """
    typed = normalize_metadata(metadata)
    alignment = int(typed[ALIGNMENT_KEY].value) if ALIGNMENT_KEY in typed else DEFAULT_ALIGNMENT

    for info, payload in tensors:
        if len(payload) != info.nbytes:
            raise SizeMismatch(f"Tensor {info.name!r} payload is {len(payload)} bytes, needs {info.nbytes}")

    placed = layout_tensors([info for info, _ in tensors], alignment)

    out = io.BytesIO()
    out.write(HEADER.pack(GGUF_MAGIC, GGUF_VERSION, len(placed), len(typed)))
    for key, item in typed.items():
        out.write(_encode_scalar(ValueKind.STRING, key))
        out.write(_encode_value(item))
    for info in placed:
        out.write(_encode_scalar(ValueKind.STRING, info.name))
        out.write(U32.pack(len(info.dims)))
        for d in info.dims:
            out.write(U64.pack(d))
        out.write(U32.pack(info.format.ggml_type))
        out.write(U64.pack(info.offset))

    data_start = align_up(out.tell(), alignment)
    for info, (_, payload) in zip(placed, tensors):
        out.write(b'\x00' * (data_start + info.offset - out.tell()))
        out.write(payload)

    logger.debug(f"Wrote GGUF with {len(placed)} tensors, {out.tell()} bytes")
    return out.getvalue()


def write_gguf_file(path: str, metadata: MetadataInput, tensors: TensorInput) -> int:
    """Write a GGUF file to ``path`` and return its size in bytes."""
    data = write_gguf(metadata, tensors)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info(f"Wrote {path} ({len(data)} bytes, {len(tensors)} tensors)")
    return len(data)
