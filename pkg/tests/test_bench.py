"""
Tests for benchmark workloads, reports and the CSV schema.
"""
import pandas as pd
import pytest

from quantkern.bench.report import CSV_COLUMNS, BenchReport, read_csv, reports_frame, write_csv
from quantkern.bench.runner import breakdown_by_depth, run_bench, run_tune, tuning_label
from quantkern.errors import BenchError
from quantkern.kernels.types import CATEGORIES, OpKind
from quantkern.quant.formats import BlockFormat
from quantkern.runtime.blocks import BlockShape
from quantkern.runtime.config import RuntimeConfig

SMALL = BlockShape(n_heads=2, head_dim=64, max_context=64)


def _report(seconds=(1.0, 2.0, 4.0), **kwargs):
    return BenchReport(device='dev', workload={'preset': 'decode', 'kv_depth': 0}, config='default',
                       seconds=list(seconds), iterations=8, tokens=1, **kwargs)


def test_decode_bench_on_host(host_runtime):
    report = run_bench(host_runtime, 'decode', BlockFormat.Q4_0, kv_depth=8, repeats=3, iterations=4, warmup=1,
                       shape=SMALL)
    assert len(report.seconds) == 3
    assert report.min <= report.mean <= report.max
    assert report.workload['format'] == 'q4_0'
    assert set(report.breakdown) == set(CATEGORIES)
    assert sum(report.breakdown.values()) == pytest.approx(100.0, abs=0.1)
    assert report.breakdown['matvec'] > 0
    assert report.breakdown['attention'] > 0
    assert any(key.startswith('flash_decode') for key in report.kernel_keys)


def test_prefill_bench_uses_f16_weights_for_quantized_formats(host_runtime):
    shape = BlockShape(n_heads=2, head_dim=64, max_context=512)
    report = run_bench(host_runtime, 'prefill512', BlockFormat.Q8_0, repeats=3, warmup=0, shape=shape)
    assert report.workload['format'] == 'f16'
    assert report.tokens == 512
    assert report.breakdown['matmul'] > 0


def test_bench_rejects_bad_requests(host_runtime):
    with pytest.raises(BenchError):
        run_bench(host_runtime, 'decode', repeats=2, shape=SMALL)
    with pytest.raises(BenchError):
        run_bench(host_runtime, 'decode', kv_depth=60, iterations=8, shape=SMALL)
    with pytest.raises(BenchError):
        run_bench(host_runtime, 'prefill1024', shape=SMALL)


def test_tune_sweeps_matvec_configs(host_runtime):
    reports = run_tune(host_runtime, OpKind.MATVEC, limit=3, iterations=2, warmup=0, shape=SMALL)
    assert len(reports) == 3
    assert len({r.config for r in reports}) == 3
    assert all(r.config.startswith('WG_SIZE=') for r in reports)
    with pytest.raises(BenchError):
        run_tune(host_runtime, OpKind.SOFTMAX, shape=SMALL)


def test_breakdown_by_depth(host_runtime):
    frame = breakdown_by_depth(host_runtime, depths=(0, 32), runs=1, shape=SMALL)
    assert frame['kv_depth'].tolist() == [0, 32]
    assert list(frame.columns) == ['kv_depth', *CATEGORIES, 'coarse']
    assert frame[list(CATEGORIES)].sum(axis=1).round(6).tolist() == [100.0, 100.0]


def test_report_statistics():
    report = _report()
    assert report.throughputs == [8.0, 4.0, 2.0]
    assert report.mean == pytest.approx(14 / 3)
    assert 'Throughput' in report.table()
    with pytest.raises(BenchError):
        _report(seconds=(1.0, 1.0))
    with pytest.raises(BenchError):
        _report(seconds=(1.0, 0.0, 1.0))


def test_csv_schema_and_append(tmp_path):
    path = str(tmp_path / 'out' / 'bench.csv')
    rows = reports_frame([_report(), _report(seconds=(2.0, 2.0, 2.0))])
    assert tuple(rows.columns) == CSV_COLUMNS
    write_csv(rows, path)
    write_csv(rows, path)
    frame = read_csv(path)
    assert len(frame) == 12
    assert frame['workload'].iloc[0] == 'preset=decode/kv_depth=0'

    with pytest.raises(BenchError):
        write_csv(pd.DataFrame({'device': ['x']}), path)
    reports_frame([]).to_csv(tmp_path / 'empty.csv', index=False)
    assert read_csv(str(tmp_path / 'empty.csv')).empty


def test_tuning_label():
    assert tuning_label(RuntimeConfig()) == 'default'
    config = RuntimeConfig(tuning={'matvec': {'WG_SIZE': 64, 'VEC': 2}})
    assert tuning_label(config) == 'matvec:VEC=2,WG_SIZE=64'
