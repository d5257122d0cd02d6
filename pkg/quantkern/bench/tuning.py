"""
Tuning-parameter sweeps and portable configuration selection.

A sweep is the cartesian product of power-of-two candidate values for the
parameters that shape one op's kernel, filtered by the device limits. The
portable configuration is chosen over a devices x configs throughput
matrix: every device's row is normalized by its best configuration, configs
whose worst normalized value falls below ``1 - slowdown_cap`` are dropped,
and the survivor with the highest geometric mean wins.
"""
import logging
import itertools
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from quantkern.errors import BenchError, NoFeasibleConfig, TuningViolatesDeviceLimits
from quantkern.kernels.types import OpKind, TuningParams
from quantkern.runtime.caps import DeviceCaps

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_SLOWDOWN_CAP = 0.25
MAX_SWEEP_POINTS = 512

# Candidate values per op; matmul TILE_M/TILE_N follow from the workgroup and register tiles
SWEEP_SPACE: Dict[OpKind, 'OrderedDict[str, List[int]]'] = {
    OpKind.MATMUL: OrderedDict(
        TILE_K=[8, 16, 32], RT_M=[2, 4, 8], RT_N=[2, 4, 8], WG_X=[8, 16], WG_Y=[8, 16],
    ),
    OpKind.MATVEC: OrderedDict(WG_SIZE=[32, 64, 128, 256], ROWS_PER_WG=[1, 2, 4], VEC=[1, 2, 4]),
    OpKind.FLASH_DECODE: OrderedDict(KV_TILE=[8, 16, 32, 64], SPLITS=[1, 2, 4, 8]),
    OpKind.FLASH_TILE: OrderedDict(Q_TILE=[4, 8, 16], KV_TILE=[16, 32, 64]),
}
_DEFAULT_SPACE = OrderedDict(WG_SIZE=[64, 128, 256])


def config_label(params: TuningParams, op: OpKind) -> str:
    """Stable label of the parameters that matter for ``op``."""
    names = list(SWEEP_SPACE.get(op, _DEFAULT_SPACE))
    if op == OpKind.MATMUL:
        names = ['TILE_M', 'TILE_N'] + names
    return ','.join(f"{name}={getattr(params, name)}" for name in names)


def sweep_grid(
    op: OpKind,
    caps: DeviceCaps,
    head_dim: int = 128,
    limit: int = MAX_SWEEP_POINTS,
    base: Optional[TuningParams] = None,
) -> List[TuningParams]:
    """
    Power-of-two configurations for ``op`` that pass the device-limit checks.

    Args:
        op: Op kind
        caps: Device capabilities
        head_dim: Head dim used for attention limits
        limit: Maximum number of points returned
        base: Values for parameters outside the sweep space

    Returns:
        At most ``limit`` configurations in deterministic order
    """
    base = base or TuningParams()
    space = SWEEP_SPACE.get(op, _DEFAULT_SPACE)
    grid = []
    for combo in itertools.product(*space.values()):
        values = dict(zip(space.keys(), combo))
        if op == OpKind.MATMUL:
            values['TILE_M'] = values['WG_Y'] * values['RT_M']
            values['TILE_N'] = values['WG_X'] * values['RT_N']
        params = base.with_overrides(values)
        try:
            params.validate(caps, op, head_dim)
        except TuningViolatesDeviceLimits:
            continue
        grid.append(params)
        if len(grid) == limit:
            logger.info(f"Sweep for {op} capped at {limit} points")
            break
    logger.info(f"Sweep for {op}: {len(grid)} feasible configurations")
    return grid


class ThroughputMatrix:
    """
    Devices x labels throughput table; missing cells are NaN.

    Args:
        frame: DataFrame indexed by device label with one column per config or workload
    """

    def __init__(self, frame: pd.DataFrame):
        frame = frame.astype(float)
        present = frame.to_numpy()[~np.isnan(frame.to_numpy())]
        if (present <= 0).any():
            raise BenchError("Throughput cells must be positive")
        self.frame = frame

    @classmethod
    def from_records(cls, records: Iterable[Tuple[str, str, float]]) -> 'ThroughputMatrix':
        """Build from (device, label, throughput) triples; repeats are averaged."""
        df = pd.DataFrame(list(records), columns=['device', 'label', 'throughput'])
        return cls(df.pivot_table(index='device', columns='label', values='throughput', aggfunc='mean'))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, label_column: str = 'config') -> 'ThroughputMatrix':
        """Build from rows in the benchmark CSV schema."""
        return cls(df.pivot_table(index='device', columns=label_column, values='throughput', aggfunc='mean'))

    @property
    def devices(self) -> List[str]:
        return [str(d) for d in self.frame.index]

    @property
    def labels(self) -> List[str]:
        return [str(c) for c in self.frame.columns]

    def normalized(self) -> pd.DataFrame:
        """Each device's row divided by its best value."""
        return self.frame.div(self.frame.max(axis=1), axis=0)

    def scaled(self, factors: Dict[str, float]) -> 'ThroughputMatrix':
        return ThroughputMatrix(self.frame.mul(pd.Series(factors).reindex(self.frame.index).fillna(1.0), axis=0))


def portable_scores(matrix: ThroughputMatrix, slowdown_cap: float = DEFAULT_SLOWDOWN_CAP) -> pd.DataFrame:
    """
    Worst-case and geometric-mean normalized throughput per config.

    A config missing on any device is infeasible.
    """
    norm = matrix.normalized()
    scores = pd.DataFrame({
        'worst': norm.min(axis=0, skipna=False),
        'geomean': np.exp(np.log(norm).mean(axis=0, skipna=False)),
    })
    scores['feasible'] = scores['worst'].notna() & (scores['worst'] >= 1.0 - slowdown_cap - 1e-12)
    return scores


def select_portable(matrix: ThroughputMatrix, slowdown_cap: float = DEFAULT_SLOWDOWN_CAP) -> str:
    """
    Choose the configuration that runs well on every device.

    Args:
        matrix: Devices x configs throughput
        slowdown_cap: Largest tolerated slowdown against each device's best config

    Returns:
        The winning config label; ties go to the lexicographically smallest label

    Raises:
        NoFeasibleConfig: Every config is too slow somewhere
    """
    if not 0 <= slowdown_cap < 1:
        raise BenchError(f"slowdown_cap must be in [0, 1), got {slowdown_cap}")
    scores = portable_scores(matrix, slowdown_cap)
    feasible = scores[scores['feasible']]
    if feasible.empty:
        raise NoFeasibleConfig(f"No config stays within {slowdown_cap:.0%} of the best on every device")
    # rounding keeps ties stable under per-device rescaling
    ranked = sorted((-round(float(g), 12), str(label)) for label, g in feasible['geomean'].items())
    winner = ranked[0][1]
    logger.info(f"Portable config {winner}: geomean {feasible.loc[winner, 'geomean']:.3f}, "
                f"worst {feasible.loc[winner, 'worst']:.3f} over {len(matrix.devices)} devices")
    return winner
