"""
Tests for kernel specialization, the kernel cache and the host kernels.
"""
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from quantkern.bench.verify import DEFAULT_SHAPES, QUANTIZE_KV_SUITE, SUITES, run_verify, single_op_graph
from quantkern.errors import (
    CompileError,
    ShapeMismatch,
    TuningViolatesDeviceLimits,
    UnsupportedFormatForOp,
    UnsupportedHeadDim,
    UnsupportedKVFormat,
)
from quantkern.kernels import host
from quantkern.kernels.library import SUBGROUP_FLAG, KernelCache, build, format_flag
from quantkern.kernels.types import OpContext, OpKind, TuningParams
from quantkern.quant.codec import quantize_blocks
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import TensorDesc
from quantkern.runtime.caps import DeviceCaps
from quantkern.runtime.device import HostPipeline, init_device, lint_source
from quantkern.runtime.graph import OpGraph


def _matvec_ctx(fmt=BlockFormat.Q4_0, rows=64, cols=256, caps=None, **kwargs):
    return OpContext(OpKind.MATVEC, (TensorDesc((rows, cols), fmt), TensorDesc((cols,))), TensorDesc((rows,)),
                     caps=caps or DeviceCaps(), **kwargs)


def _decode_ctx(head_dim=64, kv=BlockFormat.F16, v_fmt=None):
    kv_desc = TensorDesc((16, 2, head_dim), kv)
    v_desc = TensorDesc((16, 2, head_dim), v_fmt or kv)
    return OpContext(OpKind.FLASH_DECODE, (TensorDesc((2, head_dim)), kv_desc, v_desc), TensorDesc((2, head_dim)))


class CountingDevice:
    """Pipeline factory that counts compilations and can reject subgroup sources."""

    def __init__(self, delay=0.0, reject_subgroups=False):
        self.delay = delay
        self.reject_subgroups = reject_subgroups
        self.compiles = 0
        self._lock = threading.Lock()

    def create_pipeline(self, source, label='', origins=()):
        with self._lock:
            self.compiles += 1
        time.sleep(self.delay)
        if self.reject_subgroups and SUBGROUP_FLAG in label:
            raise CompileError("subgroupAdd is not supported", origins[:1])
        return HostPipeline(label, source)


@pytest.mark.parametrize('suite', list(SUITES) + [QUANTIZE_KV_SUITE])
def test_device_matches_oracle(any_runtime, suite):
    report = run_verify(any_runtime, filter_text=suite, n_shapes=4)
    assert report.results
    assert report.passed, report.frame()[['case', 'value', 'threshold', 'error']].to_string()


def test_full_randomized_sweep_on_host(host_runtime):
    report = run_verify(host_runtime)
    counts = report.frame().groupby('suite').size()
    for suite in ('matmul', 'matvec', 'elementwise', 'rms_norm', 'softmax', 'rope'):
        assert counts[suite] >= DEFAULT_SHAPES, suite
    assert report.passed, report.failures()[:5]


def test_perturbed_results_fail_verification(host_runtime):
    report = run_verify(host_runtime, filter_text='matvec', n_shapes=3, perturb=0.01)
    assert not report.passed
    assert report.exit_code == 1


def test_subgroup_flag_enters_the_key():
    portable = build(_matvec_ctx())
    subgroup = build(_matvec_ctx(caps=DeviceCaps(subgroups=True)))
    forced = build(_matvec_ctx(caps=DeviceCaps(subgroups=True), force_portable=True))
    assert subgroup.key.has_flag(SUBGROUP_FLAG)
    assert not portable.key.has_flag(SUBGROUP_FLAG)
    assert subgroup.key != portable.key
    assert forced.key == portable.key
    assert subgroup.metadata['variant'] == 'subgroup_reduce'


def test_matmul_q4_k_specialization():
    params = TuningParams(TILE_K=32)
    ctx = OpContext(OpKind.MATMUL, (TensorDesc((128, 512), BlockFormat.Q4_K), TensorDesc((512, 64))),
                    TensorDesc((128, 64)))
    spec = build(ctx, params)
    assert spec.key.has_flag(format_flag(BlockFormat.Q4_K))
    assert spec.key.param('TILE_K') == 32
    assert '{{' not in spec.source
    assert spec.geometry.grid(M=128, N=64) == (1, 2, 1)
    assert len(spec.origins) == len(spec.source.splitlines())


def test_equal_contexts_give_equal_keys():
    assert build(_matvec_ctx()).key == build(_matvec_ctx()).key
    assert build(_matvec_ctx(rows=128)).key == build(_matvec_ctx(rows=64)).key
    assert build(_matvec_ctx(BlockFormat.Q8_0)).key != build(_matvec_ctx()).key


def test_rejects_quantized_rhs():
    ctx = OpContext(OpKind.MATMUL, (TensorDesc((32, 64)), TensorDesc((64, 32), BlockFormat.Q4_0)),
                    TensorDesc((32, 32)))
    with pytest.raises(UnsupportedFormatForOp):
        build(ctx)


def test_rejects_nonconforming_shapes():
    ctx = OpContext(OpKind.MATMUL, (TensorDesc((32, 64)), TensorDesc((32, 32))), TensorDesc((32, 32)))
    with pytest.raises(ShapeMismatch):
        build(ctx)
    with pytest.raises(ShapeMismatch):
        build(OpContext(OpKind.MATVEC, (TensorDesc((8, 64)), TensorDesc((32,))), TensorDesc((8,))))


def test_rejects_inconsistent_tiles():
    ctx = OpContext(OpKind.MATMUL, (TensorDesc((64, 64)), TensorDesc((64, 64))), TensorDesc((64, 64)))
    with pytest.raises(TuningViolatesDeviceLimits):
        build(ctx, TuningParams(TILE_M=32))
    with pytest.raises(TuningViolatesDeviceLimits):
        build(_matvec_ctx(), TuningParams(WG_SIZE=96))
    with pytest.raises(TuningViolatesDeviceLimits):
        build(_matvec_ctx(), TuningParams(WG_SIZE=512))


def test_rejects_unsupported_attention_layouts():
    with pytest.raises(UnsupportedHeadDim):
        build(_decode_ctx(head_dim=96))
    with pytest.raises(UnsupportedKVFormat):
        build(_decode_ctx(kv=BlockFormat.Q4_1))
    with pytest.raises(UnsupportedKVFormat):
        build(_decode_ctx(kv=BlockFormat.Q8_0, v_fmt=BlockFormat.F16))


def test_sg_mat_needs_device_support():
    with pytest.raises(UnsupportedFormatForOp):
        build(_matvec_ctx(variant='sg_mat'))


def test_cache_compiles_each_key_once():
    cache = KernelCache(CountingDevice())
    first = cache.kernel_for(_matvec_ctx())
    second = cache.kernel_for(_matvec_ctx(rows=128))
    assert first is second
    assert cache.compile_count == 1

    cache.kernel_for(_matvec_ctx(), TuningParams(VEC=2))
    assert cache.compile_count == 2
    assert len(cache) == 2


def test_concurrent_requests_share_one_compilation():
    device = CountingDevice(delay=0.05)
    cache = KernelCache(device)
    spec = build(_matvec_ctx())
    with ThreadPoolExecutor(max_workers=8) as pool:
        kernels = list(pool.map(lambda _: cache.get_or_compile(spec), range(8)))
    assert device.compiles == 1
    assert cache.compile_count == 1
    assert all(k is kernels[0] for k in kernels)


def test_subgroup_variant_falls_back_to_portable():
    device = CountingDevice(reject_subgroups=True)
    cache = KernelCache(device)
    ctx = _matvec_ctx(caps=DeviceCaps(subgroups=True))
    kernel = cache.kernel_for(ctx)
    assert not kernel.key.has_flag(SUBGROUP_FLAG)
    assert cache.kernel_for(ctx) is kernel
    assert device.compiles == 2


def test_lint_reports_origin_of_bad_line():
    source = "@compute fn main() {\n  let x = 1);\n}\n"
    with pytest.raises(CompileError) as info:
        lint_source(source, ['m.wgsl:1', 'm.wgsl:7', 'm.wgsl:9'])
    assert info.value.origins == ('m.wgsl:7',)


def test_cache_surfaces_compile_errors():
    cache = KernelCache(init_device('host'))
    spec = build(_matvec_ctx())
    broken = replace(spec, source=spec.source.replace('@compute', ''))
    with pytest.raises(CompileError) as info:
        cache.get_or_compile(broken)
    assert info.value.origins
    assert cache.get(spec.key) is None


def _run(runtime, graph, inputs, output='out'):
    runtime.upload(graph, inputs)
    runtime.execute(graph)
    return runtime.readback((graph, output))


def test_matmul_identity(host_runtime, rng):
    b = rng.standard_normal((16, 8)).astype(np.float32)
    graph = single_op_graph(OpKind.MATMUL, [TensorDesc((16, 16)), TensorDesc((16, 8))], TensorDesc((16, 8)))
    got = _run(host_runtime, graph, {'in0': np.eye(16, dtype=np.float32), 'in1': b})
    assert np.array_equal(got, b)


def test_matmul_single_element(host_runtime):
    graph = single_op_graph(OpKind.MATMUL, [TensorDesc((1, 1)), TensorDesc((1, 1))], TensorDesc((1, 1)))
    got = _run(host_runtime, graph, {'in0': np.array([[2.0]]), 'in1': np.array([[3.0]])})
    assert got.reshape(-1).tolist() == [6.0]


def _decode_graph(seq_len, head_dim=64, n_heads=2, splits=1):
    kv = TensorDesc((seq_len, n_heads, head_dim), BlockFormat.F32)
    return single_op_graph(OpKind.FLASH_DECODE, [TensorDesc((n_heads, head_dim)), kv, kv],
                           TensorDesc((n_heads, head_dim)), name=f"decode-{splits}",
                           scalars={'splits': splits})


def test_decode_single_position_returns_value_row(host_runtime, rng):
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in [(2, 64), (1, 2, 64), (1, 2, 64)])
    got = _run(host_runtime, _decode_graph(1), {'in0': q, 'in1': k, 'in2': v})
    assert np.allclose(got, v[0], atol=1e-6)


def test_decode_identical_keys_average_values(host_runtime, rng):
    q = rng.standard_normal((2, 64)).astype(np.float32)
    k = np.broadcast_to(rng.standard_normal((1, 2, 64)), (40, 2, 64)).astype(np.float32)
    v = rng.standard_normal((40, 2, 64)).astype(np.float32)
    got = _run(host_runtime, _decode_graph(40), {'in0': q, 'in1': k, 'in2': v})
    assert np.allclose(got, v.mean(axis=0), atol=1e-5)


def test_decode_result_is_split_invariant(host_runtime, rng):
    inputs = {'in0': rng.standard_normal((2, 64)).astype(np.float32),
              'in1': rng.standard_normal((517, 2, 64)).astype(np.float32),
              'in2': rng.standard_normal((517, 2, 64)).astype(np.float32)}
    results = [_run(host_runtime, _decode_graph(517, splits=splits), inputs) for splits in (1, 2, 4)]
    for other in results[1:]:
        assert np.allclose(other, results[0], atol=1e-5)


@pytest.mark.parametrize('fmt', [BlockFormat.Q8_0, BlockFormat.Q4_0], ids=str)
def test_quantize_kv_constant_rows(host_runtime, fmt):
    cache = TensorDesc((4, 2, 64), fmt)
    graph = OpGraph('store')
    graph.add_external('src', TensorDesc((2, 2, 64)))
    graph.add_external('cache', cache, kv=True)
    graph.add_node(OpKind.QUANTIZE_KV, ['src'], 'cache@store', cache, alias_of='cache',
                   scalars={'dst_block_offset': 2 * 2 * 64 // fmt.block_len})
    src = np.full((2, 2, 64), 0.75, dtype=np.float32)
    got = _run(host_runtime, graph, {'src': src, 'cache': np.zeros(cache.shape, dtype=np.float32)}, 'cache')
    assert np.array_equal(got[:2], np.zeros((2, 2, 64)))
    assert np.allclose(got[2:], 0.75, atol=1e-3)


def test_f16_bit_conversion_matches_numpy(rng):
    edges = [0.0, -0.0, 1.0, 65504.0, 65520.0, 1e6, -1e6, 2.0 ** -14, 2.0 ** -24, 2.0 ** -25,
             3 * 2.0 ** -26, 2.0 ** -26, 1.0 + 2.0 ** -11, 1.0 + 3 * 2.0 ** -11]
    values = np.concatenate([rng.standard_normal(5000) * 10.0 ** rng.integers(-9, 5, 5000), edges]).astype(np.float32)
    with np.errstate(over='ignore'):
        want = values.astype('<f2').view(np.uint16)
    assert np.array_equal(host.f32_to_f16_bits(values).astype(np.uint16), want)


def test_host_round_away_breaks_ties_away_from_zero():
    v = np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49999997, 8388607.5], dtype=np.float32)
    assert host.round_away(v).tolist() == [1.0, 2.0, 3.0, -1.0, -3.0, 0.0, 8388608.0]


@pytest.mark.parametrize('fmt', [BlockFormat.Q8_0, BlockFormat.Q4_0], ids=str)
def test_host_quantize_kv_bytes_match_the_codec(host_runtime, rng, fmt):
    cache = TensorDesc((4, 2, 64), fmt)
    graph = OpGraph('store-bytes')
    graph.add_external('src', TensorDesc((4, 2, 64)))
    graph.add_external('cache', cache, kv=True)
    graph.add_node(OpKind.QUANTIZE_KV, ['src'], 'cache@store', cache, alias_of='cache',
                   scalars={'dst_block_offset': 0})
    # one row per magnitude regime: normal, subnormal scale, below the f16 range, zero
    src = rng.standard_normal((4, 2, 64)).astype(np.float32)
    src *= np.array([3.0, 2e-4, 1e-9, 0.0], dtype=np.float32)[:, None, None]
    host_runtime.upload(graph, {'src': src, 'cache': np.zeros(cache.shape, dtype=np.float32)})
    host_runtime.execute(graph)
    got = np.frombuffer(host_runtime.read_bytes(graph, 'cache'), dtype=np.uint8)
    want = quantize_blocks(src.reshape(-1, 32), fmt).reshape(-1)
    assert np.array_equal(got[:want.size], want)


def test_host_matvec_reduces_like_the_shader(host_runtime, rng):
    a = rng.standard_normal((3, 1000)).astype(np.float32)
    x = rng.standard_normal(1000).astype(np.float32)
    graph = single_op_graph(OpKind.MATVEC, [TensorDesc((3, 1000)), TensorDesc((1000,))], TensorDesc((3,)))
    got = _run(host_runtime, graph, {'in0': a, 'in1': x})

    lanes = np.zeros((3, 2 * 512), dtype=np.float32)
    lanes[:, :1000] = a * x
    lanes = lanes.reshape(3, 2, 128, 4)
    acc = np.zeros((3, 128), dtype=np.float32)
    for t in range(2):
        for v in range(4):
            acc += lanes[:, t, :, v]
    while acc.shape[1] > 1:
        half = acc.shape[1] // 2
        acc = acc[:, :half] + acc[:, half:]
    assert np.array_equal(got, acc[:, 0])
    assert np.allclose(got, a.astype(np.float64) @ x, atol=1e-3)
