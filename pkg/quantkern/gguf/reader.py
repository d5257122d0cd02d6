"""
GGUF v3 header reader.

Only the header is parsed: metadata, tensor index and the placement of the
data region. Tensor payloads are read separately (``read_tensor_bytes``) or
streamed (``quantkern.gguf.streamer``).
"""
import logging
from typing import BinaryIO, Dict, List, Optional

from quantkern.errors import (
    BadMagic,
    BadTensorInfo,
    CodecError,
    DuplicateTensorName,
    MisalignedOffset,
    ShortRead,
    SizeMismatch,
    TruncatedHeader,
    UnknownValueKind,
    UnsupportedVersion,
)
from quantkern.gguf.constants import (
    ALIGNMENT_KEY,
    DEFAULT_ALIGNMENT,
    GGUF_MAGIC,
    GGUF_VERSION,
    HEADER,
    MAX_DIMS,
    SCALAR_STRUCTS,
    U32,
    U64,
    ValueKind,
    align_up,
)
from quantkern.gguf.model import GgufModel, MetadataValue, TensorInfo
from quantkern.quant.formats import BlockFormat

# Configure module logger
logger = logging.getLogger(__name__)


class _HeaderCursor:
    """Sequential little-endian reads that turn EOF into TruncatedHeader."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.consumed = 0

    def take(self, n: int) -> bytes:
        data = self.stream.read(n)
        if data is None or len(data) < n:
            raise TruncatedHeader(f"Header ended after {self.consumed + len(data or b'')} bytes, needed {n} more")
        self.consumed += n
        return data

    def u32(self) -> int:
        return U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return U64.unpack(self.take(8))[0]

    def string(self) -> str:
        length = self.u64()
        raw = self.take(length)
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise TruncatedHeader(f"Invalid UTF-8 string at header byte {self.consumed - length}") from e

    def kind(self) -> ValueKind:
        raw = self.u32()
        try:
            return ValueKind(raw)
        except ValueError:
            raise UnknownValueKind(f"Unknown metadata value kind {raw}") from None

    def scalar(self, kind: ValueKind):
        if kind == ValueKind.STRING:
            return self.string()
        codec = SCALAR_STRUCTS[kind]
        return codec.unpack(self.take(codec.size))[0]

    def value(self) -> MetadataValue:
        kind = self.kind()
        if kind != ValueKind.ARRAY:
            return MetadataValue(kind, self.scalar(kind))
        item_kind = self.kind()
        if item_kind == ValueKind.ARRAY:
            raise UnknownValueKind("Metadata arrays of arrays are not supported")
        count = self.u64()
        return MetadataValue(kind, tuple(self.scalar(item_kind) for _ in range(count)), item_kind)


def read_header(stream: BinaryIO) -> GgufModel:
    """
    Parse a GGUF v3 header from a binary stream positioned at the magic.

    Args:
        stream: Readable binary stream

    Returns:
        Fully populated GgufModel; no payload bytes are read
    """
    cur = _HeaderCursor(stream)
    magic = cur.take(4)
    if magic != GGUF_MAGIC:
        raise BadMagic(f"Not a GGUF file: magic {magic!r}")
    version = cur.u32()
    if version != GGUF_VERSION:
        raise UnsupportedVersion(f"GGUF version {version} is not supported (need {GGUF_VERSION})")
    n_tensors = cur.u64()
    n_kv = cur.u64()
    logger.debug(f"GGUF v{version}: {n_tensors} tensors, {n_kv} metadata entries")

    metadata: Dict[str, MetadataValue] = {}
    for _ in range(n_kv):
        key = cur.string()
        metadata[key] = cur.value()

    alignment = _alignment_from(metadata)

    tensors: List[TensorInfo] = []
    seen = set()
    for _ in range(n_tensors):
        name = cur.string()
        if name in seen:
            raise DuplicateTensorName(f"Tensor {name!r} appears twice in the index")
        seen.add(name)
        n_dims = cur.u32()
        if not 1 <= n_dims <= MAX_DIMS:
            raise TruncatedHeader(f"Tensor {name!r} has {n_dims} dimensions")
        dims = tuple(cur.u64() for _ in range(n_dims))
        type_id = cur.u32()
        offset = cur.u64()
        try:
            fmt = BlockFormat.from_ggml_type(type_id)
        except CodecError as e:
            raise BadTensorInfo(f"Tensor {name!r}: {e}") from None
        if offset % alignment != 0:
            raise MisalignedOffset(f"Tensor {name!r} offset {offset} is not a multiple of {alignment}")
        tensors.append(TensorInfo(name=name, dims=dims, format=fmt, offset=offset))

    _check_regions(tensors)
    model = GgufModel(
        version=version,
        metadata=metadata,
        tensors=tensors,
        alignment=alignment,
        data_start=align_up(cur.consumed, alignment),
    )
    logger.info(f"Read GGUF header: {len(tensors)} tensors, data starts at byte {model.data_start}")
    return model


def _alignment_from(metadata: Dict[str, MetadataValue]) -> int:
    item = metadata.get(ALIGNMENT_KEY)
    if item is None:
        return DEFAULT_ALIGNMENT
    if item.kind == ValueKind.ARRAY or not isinstance(item.value, int) or isinstance(item.value, bool) \
            or item.value <= 0:
        raise MisalignedOffset(f"{ALIGNMENT_KEY} must be a positive integer, got {item.value!r}")
    return item.value


def _check_regions(tensors: List[TensorInfo]) -> None:
    """Every tensor must have whole blocks and tensors must not overlap."""
    spans = []
    for info in tensors:
        try:
            size = info.nbytes
        except CodecError as e:
            raise BadTensorInfo(f"Tensor {info.name!r}: {e}") from None
        spans.append((info.offset, info.offset + size, info.name))
    spans.sort()
    for (_, end, name), (start, _, other) in zip(spans, spans[1:]):
        if start < end:
            raise MisalignedOffset(f"Tensor {other!r} overlaps {name!r}")


def data_end(model: GgufModel) -> int:
    """Absolute file offset just past the last tensor payload."""
    if not model.tensors:
        return model.data_start
    return model.data_start + max(info.offset + info.nbytes for info in model.tensors)


def check_in_bounds(model: GgufModel, file_size: int) -> None:
    """Raise SizeMismatch when a tensor region runs past the end of the file."""
    end = data_end(model)
    if model.tensors and end > file_size:
        raise SizeMismatch(f"Tensor data needs {end} bytes, file has {file_size}")


def read_tensor_bytes(stream: BinaryIO, model: GgufModel, info: TensorInfo,
                      size: Optional[int] = None) -> bytes:
    """
    One-shot read of a tensor payload.

    Args:
        stream: Seekable binary stream of the same file
        model: Parsed header
        info: Tensor to read
        size: Override for the byte count (defaults to the tensor size)

    Returns:
        The payload bytes
    """
    nbytes = info.nbytes if size is None else size
    stream.seek(model.data_start + info.offset)
    data = stream.read(nbytes)
    if len(data) != nbytes:
        raise ShortRead(f"Tensor {info.name!r}: expected {nbytes} bytes, read {len(data)}")
    return data


def read_gguf_file(path: str) -> GgufModel:
    """Read a header from a file path and check that payloads are in bounds."""
    with open(path, 'rb') as f:
        model = read_header(f)
        f.seek(0, 2)
        check_in_bounds(model, f.tell())
    return model
