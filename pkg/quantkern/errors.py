"""
Exception hierarchy for quantkern.

Each module raises errors from its own family so callers can catch a whole
area (``except GgufError``) or one precise condition (``except BadMagic``).
"""
from typing import Optional, Sequence


class QuantKernError(Exception):
    """Base class for every error raised by quantkern."""


# ---------------------------------------------------------------------------
# quant
# ---------------------------------------------------------------------------

class CodecError(QuantKernError):
    """Errors raised by the block codecs."""


class WrongBlockLen(CodecError, ValueError):
    def __init__(self, got: int, expected: int):
        super().__init__(f"Block needs {expected} values, got {got}")
        self.got = got
        self.expected = expected


class NonFiniteInput(CodecError, ValueError):
    """Raised when quantization input contains NaN or infinity."""


class UnsupportedFormat(CodecError, ValueError):
    """Raised when a format cannot be block-coded (F32/F16) or is unknown."""


class MalformedBlock(CodecError, ValueError):
    def __init__(self, got: int, expected: int):
        super().__init__(f"Encoded block is {got} bytes, format needs {expected}")
        self.got = got
        self.expected = expected


class ScaleOverflow(CodecError, ValueError):
    def __init__(self, value: float):
        super().__init__(f"Stored scale {value:g} does not fit in f16 (largest finite 65504)")
        self.value = value


class IndivisibleRow(CodecError, ValueError):
    def __init__(self, row_len: int, block_len: int):
        super().__init__(f"Innermost dimension {row_len} is not divisible by block length {block_len}")
        self.row_len = row_len
        self.block_len = block_len


class LengthMismatch(CodecError, ValueError):
    """Raised when two sequences that must align have different lengths."""


class EmptyInput(CodecError, ValueError):
    """Raised when a metric is asked for on empty input."""


# ---------------------------------------------------------------------------
# gguf
# ---------------------------------------------------------------------------

class GgufError(QuantKernError):
    """Errors raised while reading, writing or streaming GGUF data."""


class BadMagic(GgufError):
    pass


class UnsupportedVersion(GgufError):
    pass


class TruncatedHeader(GgufError):
    pass


class DuplicateTensorName(GgufError):
    pass


class MisalignedOffset(GgufError):
    pass


class UnknownValueKind(GgufError):
    pass


class BadTensorInfo(GgufError, ValueError):
    """A tensor index entry names an unknown type or a shape that is not whole blocks."""


class SizeMismatch(GgufError, ValueError):
    pass


class ShortRead(GgufError):
    pass


class SinkWriteFailed(GgufError):
    pass


# ---------------------------------------------------------------------------
# shaderpp
# ---------------------------------------------------------------------------

class PreprocessError(QuantKernError):
    """Errors raised by the shader template preprocessor."""


class UnbalancedConditional(PreprocessError):
    def __init__(self, location: str, detail: str):
        super().__init__(f"{location}: {detail}")
        self.location = location


class IncludeCycle(PreprocessError):
    def __init__(self, chain: Sequence[str]):
        super().__init__("Include cycle: " + " -> ".join(chain))
        self.chain = tuple(chain)


class IncludeNotFound(PreprocessError, LookupError):
    def __init__(self, path: str, location: str):
        super().__init__(f"{location}: include not found: {path}")
        self.path = path
        self.location = location


class UnresolvedInterpolation(PreprocessError):
    def __init__(self, name: str, location: str):
        super().__init__(f"{location}: no value for {{{{{name}}}}}")
        self.name = name
        self.location = location


class MalformedDirective(PreprocessError):
    def __init__(self, location: str, line: str):
        super().__init__(f"{location}: malformed directive: {line.strip()}")
        self.location = location


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

class KernelError(QuantKernError):
    """Errors raised by the kernel library."""


class UnsupportedFormatForOp(KernelError, ValueError):
    pass


class TuningViolatesDeviceLimits(KernelError, ValueError):
    pass


class ShapeMismatch(KernelError, ValueError):
    pass


class UnsupportedHeadDim(KernelError, ValueError):
    pass


class UnsupportedKVFormat(KernelError, ValueError):
    pass


class EpsNonPositive(KernelError, ValueError):
    pass


class CompileError(KernelError):
    def __init__(self, diagnostics: str, origins: Optional[Sequence[str]] = None):
        self.diagnostics = diagnostics
        self.origins = tuple(origins or ())
        where = f" at {', '.join(self.origins)}" if self.origins else ""
        super().__init__(f"Shader compilation failed{where}: {diagnostics}")


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

class RuntimeFault(QuantKernError):
    """Errors raised by the device layer, planner, arena and executor."""


class NoAdapter(RuntimeFault):
    pass


class FeatureUnavailable(RuntimeFault):
    def __init__(self, feature: str):
        super().__init__(f"Adapter does not support requested feature: {feature}")
        self.feature = feature


class ExceedsDeviceLimit(RuntimeFault):
    def __init__(self, total: int, limit: int):
        super().__init__(f"Plan needs {total} bytes, device max buffer size is {limit}")
        self.total = total
        self.limit = limit


class CyclicGraph(RuntimeFault):
    pass


class ParamsTooLarge(RuntimeFault, ValueError):
    pass


class WouldBlock(RuntimeFault):
    pass


class PipelineMissing(RuntimeFault):
    pass


class DeviceLost(RuntimeFault):
    pass


class MapFailed(RuntimeFault):
    pass


class UnknownTensor(RuntimeFault, LookupError):
    pass


class BindingOutOfRange(RuntimeFault):
    pass


class ConfigError(RuntimeFault, ValueError):
    pass


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

class BenchError(QuantKernError):
    """Errors raised by benchmarking, tuning and clustering."""


class NoFeasibleConfig(BenchError):
    pass


class KTooLarge(BenchError, ValueError):
    pass


class EmptyColumn(BenchError, ValueError):
    pass
