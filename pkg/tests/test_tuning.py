"""
Tests for tuning sweeps and portable configuration selection.
"""
import pandas as pd
import pytest

from quantkern.bench.tuning import (
    ThroughputMatrix,
    config_label,
    portable_scores,
    select_portable,
    sweep_grid,
)
from quantkern.errors import BenchError, NoFeasibleConfig
from quantkern.kernels.types import OpKind, TuningParams
from quantkern.runtime.caps import DeviceCaps


def _matrix(rows):
    return ThroughputMatrix.from_records(rows)


AB = [('gpu0', 'A', 1.0), ('gpu0', 'B', 0.8), ('gpu1', 'A', 0.5), ('gpu1', 'B', 0.9)]


def test_worst_case_cap_rules_out_the_fastest_config():
    scores = portable_scores(_matrix(AB), slowdown_cap=0.4)
    assert not scores.loc['A', 'feasible']
    assert scores.loc['B', 'feasible']
    assert select_portable(_matrix(AB), slowdown_cap=0.4) == 'B'


def test_selection_is_invariant_under_device_rescaling():
    rows = [('d0', 'x', 10.0), ('d0', 'y', 9.0), ('d0', 'z', 4.0),
            ('d1', 'x', 3.0), ('d1', 'y', 5.0), ('d1', 'z', 5.5),
            ('d2', 'x', 7.0), ('d2', 'y', 6.5), ('d2', 'z', 2.0)]
    matrix = _matrix(rows)
    winner = select_portable(matrix, slowdown_cap=0.5)
    assert select_portable(matrix.scaled({'d0': 1000.0, 'd2': 0.003}), slowdown_cap=0.5) == winner


def test_single_config():
    assert select_portable(_matrix([('only', 'cfg', 12.5)])) == 'cfg'


def test_ties_go_to_the_smallest_label():
    matrix = _matrix([('d0', 'b', 2.0), ('d0', 'a', 2.0)])
    assert select_portable(matrix) == 'a'


def test_no_feasible_config():
    matrix = _matrix([('d0', 'A', 1.0), ('d0', 'B', 0.1), ('d1', 'A', 0.1), ('d1', 'B', 1.0)])
    with pytest.raises(NoFeasibleConfig):
        select_portable(matrix, slowdown_cap=0.5)


def test_config_missing_on_a_device_is_infeasible():
    matrix = _matrix([('d0', 'A', 1.0), ('d0', 'B', 1.0), ('d1', 'B', 1.0)])
    assert select_portable(matrix, slowdown_cap=0.1) == 'B'


def test_invalid_inputs():
    with pytest.raises(BenchError):
        select_portable(_matrix(AB), slowdown_cap=1.0)
    with pytest.raises(BenchError):
        ThroughputMatrix(pd.DataFrame({'A': [1.0, -2.0]}, index=['d0', 'd1']))


def test_matrix_from_bench_rows_averages_repeats():
    df = pd.DataFrame({'device': ['d0', 'd0', 'd1'], 'config': ['c', 'c', 'c'], 'throughput': [2.0, 4.0, 5.0]})
    matrix = ThroughputMatrix.from_frame(df)
    assert matrix.devices == ['d0', 'd1']
    assert matrix.frame.loc['d0', 'c'] == 3.0


def test_sweep_respects_device_limits():
    caps = DeviceCaps(max_workgroup_size=128)
    grid = sweep_grid(OpKind.MATVEC, caps)
    assert grid
    assert all(p.WG_SIZE <= 128 for p in grid)
    assert len({config_label(p, OpKind.MATVEC) for p in grid}) == len(grid)


def test_matmul_sweep_keeps_tiles_consistent():
    for params in sweep_grid(OpKind.MATMUL, DeviceCaps(), limit=40):
        assert params.TILE_M == params.WG_Y * params.RT_M
        assert params.TILE_N == params.WG_X * params.RT_N


def test_split_sweep_is_capped():
    grid = sweep_grid(OpKind.FLASH_DECODE, DeviceCaps(), head_dim=64)
    assert {p.SPLITS for p in grid} == {1, 2, 4, 8}
    assert max(p.KV_TILE for p in grid) <= 64
    assert config_label(TuningParams(), OpKind.FLASH_DECODE) == 'KV_TILE=32,SPLITS=1'
