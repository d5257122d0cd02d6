"""
Tensor-level codec plumbing: blockwise application of the block codecs along
the innermost dimension of a row-major tensor.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from quantkern.errors import IndivisibleRow, MalformedBlock
from quantkern.quant.codec import dequantize_blocks, quantize_blocks
from quantkern.quant.formats import BlockFormat, tensor_nbytes

# Configure module logger
logger = logging.getLogger(__name__)


def contiguous_strides(shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    strides = []
    step = 1
    for dim in reversed(shape):
        strides.append(step)
        step *= dim
    return tuple(reversed(strides))


@dataclass(frozen=True)
class TensorDesc:
    """
    Logical tensor description.

    Attributes:
        shape: Row-major shape, innermost dimension last
        format: Element format
        strides: Element strides; contiguous row-major when omitted
        binding: Name of the device buffer the tensor lives in, if placed
        byte_offset: Offset of the first byte inside that buffer
    """

    shape: Tuple[int, ...]
    format: BlockFormat = BlockFormat.F32
    strides: Tuple[int, ...] = field(default=())
    binding: Optional[str] = None
    byte_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'shape', tuple(int(d) for d in self.shape))
        if any(d <= 0 for d in self.shape):
            raise ValueError(f"Tensor dimensions must be positive, got {self.shape}")
        if not self.strides:
            object.__setattr__(self, 'strides', contiguous_strides(self.shape))
        if self.shape and self.shape[-1] % self.format.block_len != 0:
            raise IndivisibleRow(self.shape[-1], self.format.block_len)

    @property
    def n_elements(self) -> int:
        return math.prod(self.shape)

    @property
    def row_len(self) -> int:
        return self.shape[-1]

    @property
    def n_rows(self) -> int:
        return self.n_elements // self.row_len

    @property
    def nbytes(self) -> int:
        return tensor_nbytes(self.shape, self.format)

    def placed(self, binding: str, byte_offset: int) -> 'TensorDesc':
        return replace(self, binding=binding, byte_offset=byte_offset)


def quantize_tensor(data: np.ndarray, fmt: BlockFormat) -> Tuple[bytes, TensorDesc]:
    """
    Encode a row-major f32 tensor blockwise along its innermost dimension.

    Args:
        data: Row-major tensor (any float dtype)
        fmt: Target format, including the F32/F16 pass-through formats

    Returns:
        Encoded bytes and the tensor description
    """
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] % fmt.block_len != 0:
        raise IndivisibleRow(arr.shape[-1], fmt.block_len)
    desc = TensorDesc(shape=arr.shape, format=fmt)

    if fmt == BlockFormat.F32:
        payload = arr.astype('<f4').tobytes()
    elif fmt == BlockFormat.F16:
        payload = arr.astype('<f2').tobytes()
    else:
        payload = quantize_blocks(arr.reshape(-1, fmt.block_len), fmt).tobytes()

    logger.debug(f"Quantized tensor {arr.shape} to {fmt}: {len(payload)} bytes")
    return payload, desc


def dequantize_tensor(payload: bytes, desc: TensorDesc) -> np.ndarray:
    """
    Decode encoded bytes back into a row-major f32 tensor of ``desc.shape``.

    Args:
        payload: Encoded bytes (bytes, bytearray, memoryview or uint8 array)
        desc: Tensor description

    Returns:
        f32 numpy array shaped like the description
    """
    if isinstance(payload, np.ndarray):
        raw = np.ascontiguousarray(payload).view(np.uint8).reshape(-1)
    else:
        raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size != desc.nbytes:
        raise MalformedBlock(raw.size, desc.nbytes)

    fmt = desc.format
    if fmt == BlockFormat.F32:
        values = raw.view('<f4').astype(np.float32)
    elif fmt == BlockFormat.F16:
        values = raw.view('<f2').astype(np.float32)
    else:
        values = dequantize_blocks(raw.reshape(-1, fmt.block_bytes), fmt)
    return values.reshape(desc.shape)


def roundtrip_tensor(data: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Values as they read back after storage in ``fmt`` (same shape, f32)."""
    arr = np.asarray(data, dtype=np.float32)
    payload, desc = quantize_tensor(arr, fmt)
    return dequantize_tensor(payload, desc).reshape(arr.shape)
