"""
Tests for the batched executor, readback and the timing breakdown.
"""
from dataclasses import replace

import numpy as np
import pytest

from quantkern.errors import ShapeMismatch, UnknownTensor
from quantkern.kernels.types import CATEGORIES, ElementwiseKind, OpKind
from quantkern.quant.formats import BlockFormat
from quantkern.quant.metrics import nmse
from quantkern.quant.tensor import TensorDesc
from quantkern.runtime.blocks import BlockShape, build_decode_block, random_inputs, reference_execute, set_position
from quantkern.runtime.executor import Runtime, timing_breakdown
from quantkern.runtime.graph import OpGraph

SMALL = BlockShape(n_heads=2, head_dim=64, max_context=64)


def _scale_chain(length, n=256):
    graph = OpGraph('chain')
    graph.add_external('x', TensorDesc((n,)))
    prev = 'x'
    for i in range(length):
        graph.add_node(OpKind.ELEMENTWISE, [prev], f"t{i}", TensorDesc((n,)), elementwise=ElementwiseKind.SCALE,
                       scalars={'alpha': 2.0})
        prev = f"t{i}"
    return graph


def _matvec_graph(n_nodes, rows=256, cols=256):
    graph = OpGraph('matvecs')
    graph.add_external('w', TensorDesc((rows, cols), BlockFormat.Q8_0))
    graph.add_external('x', TensorDesc((cols,)))
    for i in range(n_nodes):
        graph.add_node(OpKind.MATVEC, ['w', 'x'], f"y{i}", TensorDesc((rows,)))
    return graph


def test_empty_graph_makes_no_submissions(host_runtime):
    result = host_runtime.execute(OpGraph('empty'))
    assert result.outputs == {}
    assert result.stats.submissions == 0
    assert result.stats.dispatches == 0


def test_chain_is_grouped_into_passes(host_runtime, rng):
    graph = _scale_chain(5)
    x = rng.standard_normal(256).astype(np.float32)
    host_runtime.upload(graph, {'x': x})
    stats = host_runtime.execute(graph, ops_per_pass=2, passes_per_submit=2).stats
    assert stats.dispatches == 5
    assert stats.passes == 3
    assert stats.submissions == 2
    assert np.array_equal(host_runtime.readback((graph, 't4')), x * 32)


def test_steady_state_makes_no_allocations(host_runtime, rng):
    graph = build_decode_block(SMALL, position=3, splits=2)
    host_runtime.upload(graph, random_inputs(graph, rng, kv_fill=3))
    host_runtime.execute(graph)
    before = host_runtime.device.allocations
    for _ in range(100):
        assert host_runtime.execute(graph).stats.allocations == 0
    assert host_runtime.device.allocations == before


@pytest.mark.parametrize('kv', [BlockFormat.F16, BlockFormat.Q8_0], ids=str)
def test_outputs_do_not_depend_on_batching(host_runtime, rng, kv):
    graph = build_decode_block(SMALL, kv_format=kv, position=9, splits=4)
    inputs = random_inputs(graph, rng, kv_fill=9)
    results = []
    for ops_per_pass, passes_per_submit in [(1, 1), (8, 4), (64, 1)]:
        host_runtime.upload(graph, inputs)
        host_runtime.execute(graph, ops_per_pass=ops_per_pass, passes_per_submit=passes_per_submit)
        results.append(host_runtime.readback((graph, 'out')))
    for other in results[1:]:
        assert np.array_equal(other, results[0])


def test_arena_wraps_with_small_slot_count(host_config, rng):
    runtime = Runtime(replace(host_config, slot_count=4))
    try:
        graph = _scale_chain(10)
        x = rng.standard_normal(256).astype(np.float32)
        runtime.upload(graph, {'x': x})
        stats = runtime.execute(graph, ops_per_pass=8, passes_per_submit=4).stats
        assert stats.flushes > 0
        assert np.array_equal(runtime.readback((graph, 't9')), x * 1024)
    finally:
        runtime.close()


def test_decode_block_matches_reference(any_runtime, rng):
    graph = build_decode_block(SMALL, weight_format=BlockFormat.Q4_0, position=17, splits=2)
    inputs = random_inputs(graph, rng, kv_fill=17)
    any_runtime.upload(graph, inputs)
    any_runtime.execute(graph)
    expected = reference_execute(graph, inputs)['out']
    assert nmse(expected, any_runtime.readback((graph, 'out'))) <= 1e-5
    any_runtime.release(graph)


def test_position_moves_without_new_kernels(host_runtime, rng):
    graph = build_decode_block(SMALL, position=4)
    inputs = random_inputs(graph, rng, kv_fill=8)
    host_runtime.upload(graph, inputs)
    host_runtime.execute(graph)
    compiled = host_runtime.cache.compile_count

    set_position(graph, 8)
    host_runtime.upload(graph, inputs)
    host_runtime.execute(graph)
    assert host_runtime.cache.compile_count == compiled
    expected = reference_execute(graph, inputs)['out']
    assert nmse(expected, host_runtime.readback((graph, 'out'))) <= 1e-5


def test_write_then_read_identity(host_runtime, rng):
    graph = _scale_chain(1)
    x = rng.standard_normal(256).astype(np.float32)
    host_runtime.write_tensor(graph, 'x', x)
    assert np.array_equal(host_runtime.readback((graph, 'x')), x)
    assert host_runtime.read_bytes(graph, 'x') == x.tobytes()


def test_unknown_tensors(host_runtime):
    graph = _scale_chain(1)
    with pytest.raises(UnknownTensor):
        host_runtime.readback((graph, 't0'))
    host_runtime.execute(graph)
    with pytest.raises(UnknownTensor):
        host_runtime.readback((graph, 'missing'))
    with pytest.raises(UnknownTensor):
        host_runtime.write_tensor(graph, 't0', np.zeros(256))
    with pytest.raises(ShapeMismatch):
        host_runtime.write_tensor(graph, 'x', bytes(12))


def test_matvec_only_graph_is_all_matvec(host_runtime, rng):
    graph = _matvec_graph(4)
    host_runtime.upload(graph, {'w': rng.standard_normal((256, 256)), 'x': rng.standard_normal(256)})
    stats = host_runtime.execute(graph, timed=True).stats
    assert stats.passes == 4
    assert not stats.coarse
    breakdown = timing_breakdown(stats)
    assert set(breakdown) == set(CATEGORIES)
    assert breakdown['matvec'] == pytest.approx(100.0)
    assert sum(breakdown.values()) == pytest.approx(100.0, abs=0.1)


def test_empty_graph_breakdown_is_zero(host_runtime):
    stats = host_runtime.execute(OpGraph('empty'), timed=True).stats
    assert timing_breakdown(stats) == {name: 0.0 for name in CATEGORIES}
