"""
In-memory GGUF index: metadata, tensor infos and data-region placement.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from quantkern.gguf.constants import DEFAULT_ALIGNMENT, GGUF_VERSION, ValueKind
from quantkern.quant.formats import BlockFormat, tensor_nbytes


@dataclass(frozen=True)
class MetadataValue:
    """
    A typed metadata value.

    Attributes:
        kind: Stored value kind
        value: Python value (list for arrays)
        item_kind: Element kind when ``kind`` is ARRAY
    """

    kind: ValueKind
    value: Any
    item_kind: Optional[ValueKind] = None


@dataclass(frozen=True)
class TensorInfo:
    """
    One entry of the tensor index.

    ``dims`` is stored innermost-first, as on disk; ``shape`` gives the
    row-major view used everywhere else.
    """

    name: str
    dims: Tuple[int, ...]
    format: BlockFormat
    offset: int = 0

    @classmethod
    def from_shape(cls, name: str, shape, fmt: BlockFormat, offset: int = 0) -> 'TensorInfo':
        return cls(name=name, dims=tuple(int(d) for d in reversed(tuple(shape))), format=fmt, offset=offset)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(reversed(self.dims))

    @property
    def n_elements(self) -> int:
        count = 1
        for d in self.dims:
            count *= d
        return count

    @property
    def nbytes(self) -> int:
        return tensor_nbytes(self.shape, self.format)


@dataclass
class GgufModel:
    """Parsed GGUF header."""

    version: int = GGUF_VERSION
    metadata: Dict[str, MetadataValue] = field(default_factory=dict)
    tensors: List[TensorInfo] = field(default_factory=list)
    alignment: int = DEFAULT_ALIGNMENT
    data_start: int = 0

    def tensor(self, name: str) -> TensorInfo:
        for info in self.tensors:
            if info.name == name:
                return info
        raise KeyError(name)

    def tensor_names(self) -> List[str]:
        return [info.name for info in self.tensors]

    def value(self, key: str, default: Any = None) -> Any:
        item = self.metadata.get(key)
        return default if item is None else item.value

    def index_equals(self, other: 'GgufModel') -> bool:
        """Compare everything the header carries (used by writer/reader roundtrips)."""
        return (
            self.version == other.version
            and self.metadata == other.metadata
            and self.tensors == other.tensors
            and self.alignment == other.alignment
        )

    def describe(self) -> Dict[str, Any]:
        return {
            'version': self.version,
            'alignment': self.alignment,
            'n_tensors': len(self.tensors),
            'n_metadata': len(self.metadata),
            'data_start': self.data_start,
        }
