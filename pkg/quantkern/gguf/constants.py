"""
GGUF v3 wire constants.
"""
import struct
from enum import IntEnum

GGUF_MAGIC = b'GGUF'
GGUF_VERSION = 3
DEFAULT_ALIGNMENT = 32
ALIGNMENT_KEY = 'general.alignment'
MAX_DIMS = 4


class ValueKind(IntEnum):
    """Metadata value type ids as stored on disk."""

    UINT8 = 0
    INT8 = 1
    UINT16 = 2
    INT16 = 3
    UINT32 = 4
    INT32 = 5
    FLOAT32 = 6
    BOOL = 7
    STRING = 8
    ARRAY = 9
    UINT64 = 10
    INT64 = 11
    FLOAT64 = 12


# Fixed-size scalar kinds and their little-endian struct codes
SCALAR_STRUCTS = {
    ValueKind.UINT8: struct.Struct('<B'),
    ValueKind.INT8: struct.Struct('<b'),
    ValueKind.UINT16: struct.Struct('<H'),
    ValueKind.INT16: struct.Struct('<h'),
    ValueKind.UINT32: struct.Struct('<I'),
    ValueKind.INT32: struct.Struct('<i'),
    ValueKind.FLOAT32: struct.Struct('<f'),
    ValueKind.BOOL: struct.Struct('<?'),
    ValueKind.UINT64: struct.Struct('<Q'),
    ValueKind.INT64: struct.Struct('<q'),
    ValueKind.FLOAT64: struct.Struct('<d'),
}

U32 = struct.Struct('<I')
U64 = struct.Struct('<Q')
HEADER = struct.Struct('<4sIQQ')


def align_up(value: int, alignment: int) -> int:
    return (value + alignment - 1) // alignment * alignment
