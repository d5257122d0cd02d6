"""
Error metrics used to validate kernels against their CPU oracles.
"""
import math
from typing import Sequence, Union

import numpy as np

from quantkern.errors import EmptyInput, LengthMismatch
from quantkern.quant.formats import BlockFormat

ArrayLike = Union[Sequence[float], np.ndarray]

# Validation thresholds: f32 operands, and any f16 operand
NMSE_F32 = 1e-7
NMSE_F16 = 1e-6


def nmse(reference: ArrayLike, candidate: ArrayLike) -> float:
    """
    Normalized mean squared error, sum((a - b)^2) / sum(a^2).

    Args:
        reference: Oracle values
        candidate: Values under test

    Returns:
        The error as a float; 0.0 when both are all zero, ``math.inf`` when
        only the reference is all zero
    """
    a = np.asarray(reference, dtype=np.float64).reshape(-1)
    b = np.asarray(candidate, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"Reference has {a.size} values, candidate has {b.size}")
    if a.size == 0:
        raise EmptyInput("nmse needs at least one value")

    denom = float(np.dot(a, a))
    num = float(np.dot(a - b, a - b))
    if denom == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / denom


def threshold_for(*formats) -> float:
    """Pick the validation threshold for a set of operand formats."""
    return NMSE_F16 if any(f == BlockFormat.F16 for f in formats) else NMSE_F32
