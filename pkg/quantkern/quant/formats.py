"""
Block format descriptors shared by the codecs, the GGUF layer and the kernels.
"""
import math
from enum import Enum
from typing import Sequence

from quantkern.errors import IndivisibleRow, UnsupportedFormat


class BlockFormat(Enum):
    """
    Element format of a tensor.

    Each member carries ``(block_len, block_bytes, ggml_type, symmetric)``.
    F32 and F16 are plain element formats with a block length of one.
    """

    F32 = (1, 4, 0, True)
    F16 = (1, 2, 1, True)
    Q4_0 = (32, 18, 2, True)
    Q4_1 = (32, 20, 3, False)
    Q5_0 = (32, 22, 6, True)
    Q5_1 = (32, 24, 7, False)
    Q8_0 = (32, 34, 8, True)
    Q2_K = (256, 84, 10, False)
    Q4_K = (256, 144, 12, False)
    Q6_K = (256, 210, 14, True)
    IQ4_NL = (32, 18, 20, True)
    # Provisional type id: no upstream id is fixed for the 1-bit format yet
    Q1_0 = (128, 18, 40, True)

    def __init__(self, block_len: int, block_bytes: int, ggml_type: int, symmetric: bool):
        self.block_len = block_len
        self.block_bytes = block_bytes
        self.ggml_type = ggml_type
        self.symmetric = symmetric

    @property
    def is_quantized(self) -> bool:
        return self not in (BlockFormat.F32, BlockFormat.F16)

    @property
    def is_k_quant(self) -> bool:
        return self.block_len == 256

    @property
    def bits_per_weight(self) -> float:
        return 8.0 * self.block_bytes / self.block_len

    @classmethod
    def from_name(cls, name: str) -> 'BlockFormat':
        """Look a format up by case-insensitive name (``q4_k``, ``Q4_K``)."""
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise UnsupportedFormat(f"Unknown block format: {name}") from None

    @classmethod
    def from_ggml_type(cls, type_id: int) -> 'BlockFormat':
        for fmt in cls:
            if fmt.ggml_type == type_id:
                return fmt
        raise UnsupportedFormat(f"Unsupported GGML tensor type id: {type_id}")

    def __str__(self) -> str:
        return self.name.lower()


def tensor_nbytes(shape: Sequence[int], fmt: BlockFormat) -> int:
    """
    Encoded size of a row-major tensor.

    Args:
        shape: Row-major shape, innermost dimension last
        fmt: Element format

    Returns:
        Size in bytes; raises IndivisibleRow when the innermost dimension
        does not split into whole blocks
    """
    if not shape:
        shape = (1,)
    row_len = int(shape[-1])
    if row_len % fmt.block_len != 0:
        raise IndivisibleRow(row_len, fmt.block_len)
    n_elements = math.prod(int(d) for d in shape)
    return n_elements // fmt.block_len * fmt.block_bytes
