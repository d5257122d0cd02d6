"""
Benchmark reports: per-repeat measurements, summary statistics and the CSV schema.
"""
import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import pandas as pd

from quantkern.errors import BenchError
from quantkern.kernels.types import CATEGORIES

# Configure module logger
logger = logging.getLogger(__name__)

MIN_REPEATS = 3

# One row per (device, workload, config, repeat); column order is stable
CSV_COLUMNS = (
    'device', 'workload', 'config', 'repeat', 'iterations', 'tokens', 'seconds', 'throughput',
)


@dataclass
class BenchReport:
    """
    Result of one benchmark workload on one device.

    Attributes:
        device: Adapter label
        workload: Workload descriptor (preset, format, kv_depth, ...)
        config: Tuning configuration label
        seconds: Wall time of each measured repeat (warmup excluded)
        iterations: Graph executions per repeat
        tokens: Tokens processed per execution
        kernel_keys: Labels of the kernels the workload dispatched
        breakdown: Per-category time percentages
        coarse: The breakdown comes from wall time rather than device timestamps
    """

    device: str
    workload: Dict[str, object]
    config: str
    seconds: List[float]
    iterations: int
    tokens: int
    kernel_keys: List[str] = field(default_factory=list)
    breakdown: Dict[str, float] = field(default_factory=dict)
    coarse: bool = False

    def __post_init__(self):
        if len(self.seconds) < MIN_REPEATS:
            raise BenchError(f"A report needs at least {MIN_REPEATS} repeats, got {len(self.seconds)}")
        if any(s <= 0 for s in self.seconds):
            raise BenchError("Repeat durations must be positive")

    @property
    def workload_label(self) -> str:
        return '/'.join(f"{k}={v}" for k, v in self.workload.items())

    @property
    def throughputs(self) -> List[float]:
        """Tokens per second of every repeat."""
        return [self.iterations * self.tokens / s for s in self.seconds]

    @property
    def mean(self) -> float:
        return sum(self.throughputs) / len(self.throughputs)

    @property
    def min(self) -> float:
        return min(self.throughputs)

    @property
    def max(self) -> float:
        return max(self.throughputs)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, (seconds, throughput) in enumerate(zip(self.seconds, self.throughputs)):
            rows.append({
                'device': self.device,
                'workload': self.workload_label,
                'config': self.config,
                'repeat': i,
                'iterations': self.iterations,
                'tokens': self.tokens,
                'seconds': seconds,
                'throughput': throughput,
            })
        return pd.DataFrame(rows, columns=list(CSV_COLUMNS))

    def breakdown_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'category': list(CATEGORIES),
            'percent': [self.breakdown.get(c, 0.0) for c in CATEGORIES],
        })

    def table(self) -> str:
        """Human-readable summary."""
        lines = [
            f"Device:     {self.device}",
            f"Workload:   {self.workload_label}",
            f"Config:     {self.config}",
            f"Repeats:    {len(self.seconds)} x {self.iterations} iterations",
            f"Throughput: mean {self.mean:.2f}  min {self.min:.2f}  max {self.max:.2f} tokens/s",
        ]
        if self.breakdown:
            note = ' (coarse: wall time per submission)' if self.coarse else ''
            lines.append(f"Breakdown{note}:")
            for category in CATEGORIES:
                lines.append(f"  {category:<18} {self.breakdown.get(category, 0.0):6.1f}%")
        if self.kernel_keys:
            lines.append("Kernels:")
            lines.extend(f"  {key}" for key in self.kernel_keys)
        return '\n'.join(lines)


def reports_frame(reports: Sequence[BenchReport]) -> pd.DataFrame:
    """Concatenate the per-repeat rows of several reports."""
    if not reports:
        return pd.DataFrame(columns=list(CSV_COLUMNS))
    return pd.concat([r.to_frame() for r in reports], ignore_index=True)


def write_csv(frame: pd.DataFrame, path: str, append: bool = True) -> None:
    """
    Write rows in the CSV schema, appending to an existing file when asked.

    Args:
        frame: Rows with the CSV_COLUMNS columns
        path: Output file
        append: Append without a header when the file exists
    """
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise BenchError(f"Rows are missing CSV columns {missing}")
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    exists = os.path.exists(path)
    frame = frame[list(CSV_COLUMNS)]
    if append and exists:
        frame.to_csv(path, mode='a', header=False, index=False)
    else:
        frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def read_csv(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise BenchError(f"{path} is missing CSV columns {missing}")
    return frame
