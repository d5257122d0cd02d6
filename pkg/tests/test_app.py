"""
Tests for the command-line surface.
"""
import os

import numpy as np
import pandas as pd
import pytest

from quantkern.app import extract_tensor, main
from quantkern.bench.report import CSV_COLUMNS
from quantkern.errors import BenchError
from quantkern.gguf.model import TensorInfo
from quantkern.gguf.writer import write_gguf_file
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import quantize_tensor, roundtrip_tensor


@pytest.fixture
def gguf_path(tmp_path, rng):
    values = rng.standard_normal((4, 64)).astype(np.float32)
    payload, _ = quantize_tensor(values, BlockFormat.Q4_0)
    norm = np.ones(64, dtype=np.float32)
    tensors = [
        (TensorInfo.from_shape('blk.0.attn_q.weight', (4, 64), BlockFormat.Q4_0), payload),
        (TensorInfo.from_shape('blk.0.attn_norm.weight', (64,), BlockFormat.F32), norm.tobytes()),
    ]
    path = tmp_path / 'micro.gguf'
    write_gguf_file(str(path), {'general.architecture': 'micro', 'micro.block_count': 1}, tensors)
    return str(path), values


def test_verify_passes_on_host():
    assert main(['--backend', 'host', 'verify', '--filter', 'matvec', '--shapes', '3']) == 0


def test_verify_fails_when_results_are_perturbed(tmp_path):
    out = tmp_path / 'verify.csv'
    code = main(['--backend', 'host', 'verify', '--filter', 'matvec', '--shapes', '3', '--perturb', '0.01',
                 '--csv', str(out)])
    assert code == 1
    assert not pd.read_csv(out)['passed'].all()


def test_unknown_suite_is_an_error():
    assert main(['--backend', 'host', 'verify', '--filter', 'conv2d']) == 1


def test_no_command_prints_help():
    assert main([]) == 2


def test_inspect_lists_tensors(gguf_path, tmp_path, capsys):
    path, _ = gguf_path
    index = tmp_path / 'index.csv'
    assert main(['inspect', path, '--csv', str(index)]) == 0
    printed = capsys.readouterr().out
    assert 'blk.0.attn_q.weight' in printed
    assert 'general.architecture' in printed
    frame = pd.read_csv(index)
    assert frame['name'].tolist() == ['blk.0.attn_q.weight', 'blk.0.attn_norm.weight']
    assert frame['format'].tolist() == ['q4_0', 'f32']
    assert frame['bytes'].tolist() == [4 * 2 * 18, 64 * 4]


def test_extract_dequantized_matches_roundtrip(gguf_path, tmp_path):
    path, values = gguf_path
    out = tmp_path / 'attn_q.npy'
    assert main(['extract', path, 'blk.0.attn_q.weight', '--dequant', '--output', str(out)]) == 0
    assert np.array_equal(np.load(out), roundtrip_tensor(values, BlockFormat.Q4_0))


def test_extract_raw_bytes(gguf_path):
    path, _ = gguf_path
    assert extract_tensor(path, 'blk.0.attn_norm.weight') == np.ones(64, dtype=np.float32).tobytes()


def test_extract_unknown_tensor(gguf_path):
    path, _ = gguf_path
    with pytest.raises(BenchError):
        extract_tensor(path, 'blk.9.ffn_up.weight')
    assert main(['extract', path, 'blk.9.ffn_up.weight']) == 1


def test_cluster_command(tmp_path, rng):
    rows = []
    for device, scale in [('a0', 1000), ('a1', 1100), ('b0', 10), ('b1', 12)]:
        for workload in ('decode/0', 'decode/2048', 'prefill512/0'):
            for repeat in range(3):
                rows.append({'device': device, 'workload': workload, 'config': 'default', 'repeat': repeat,
                             'iterations': 1, 'tokens': 1, 'seconds': 1.0,
                             'throughput': scale * rng.uniform(0.9, 1.1)})
    data = tmp_path / 'bench.csv'
    pd.DataFrame(rows, columns=list(CSV_COLUMNS)).to_csv(data, index=False)
    out = tmp_path / 'clusters.csv'
    plots = tmp_path / 'plots'

    assert main(['cluster', str(data), '--k', '2', '--output', str(out), '--plots-dir', str(plots)]) == 0
    assignment = pd.read_csv(out).set_index('device')['cluster']
    assert assignment['a0'] == assignment['a1'] == 0
    assert assignment['b0'] == assignment['b1'] == 1
    assert os.listdir(plots)


def test_bench_command_writes_outputs(tmp_path):
    csv = tmp_path / 'bench.csv'
    xlsx = tmp_path / 'bench.xlsx'
    code = main(['--backend', 'host', 'bench', '--format', 'q4_0', '--repeats', '3', '--iterations', '2',
                 '--warmup', '0', '--csv', str(csv), '--xlsx', str(xlsx)])
    assert code == 0
    frame = pd.read_csv(csv)
    assert tuple(frame.columns) == CSV_COLUMNS
    assert len(frame) == 3
    assert set(pd.ExcelFile(xlsx).sheet_names) == {'Repeats', 'Breakdown', 'Kernels'}


def test_kernels_command_documents_every_template(tmp_path):
    out = tmp_path / 'kernels.txt'
    assert main(['kernels', '--output', str(out)]) == 0
    text = out.read_text(encoding='utf-8')
    assert 'matmul (matmul.wgsl)' in text
    assert 'quantize_kv (quantize_kv.wgsl)' in text
    assert 'TILE_K' in text
