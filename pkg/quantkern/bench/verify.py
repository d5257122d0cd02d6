"""
Oracle-parity sweeps over the kernel corpus.

Every case is a small op graph with random inputs. It runs on the runtime's
device and is scored against the float64 reference executor with NMSE. The
threshold is 1e-7 for f32 operands and 1e-6 when any operand is f16.
Attention and whole-block cases use the looser bounds their KV formats
allow. ``perturb`` adds a constant to every device result before scoring
so the failure path can be exercised on demand.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from quantkern.errors import BenchError, QuantKernError
from quantkern.kernels.types import HEAD_DIMS, KV_FORMATS, ElementwiseKind, OpKind
from quantkern.quant.codec import dequantize_blocks
from quantkern.quant.formats import BlockFormat
from quantkern.quant.metrics import NMSE_F16, nmse, threshold_for
from quantkern.quant.tensor import TensorDesc, quantize_tensor
from quantkern.runtime.blocks import BlockShape, build_decode_block, build_prefill_block, random_inputs, reference_execute
from quantkern.runtime.executor import Runtime
from quantkern.runtime.graph import OpGraph

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_SHAPES = 50
BLOCK_NMSE = 1e-5
ATTENTION_SEQ_LENS = (1, 32, 257, 512)
ATTENTION_SPLITS = (1, 2, 4, 8)
ATTENTION_HEADS = 2
ALL_FORMATS = tuple(BlockFormat)
RHS_FORMATS = (BlockFormat.F32, BlockFormat.F16)


@dataclass
class Case:
    """
    One verification case.

    Attributes:
        suite: Suite name (the op, or ``block``)
        name: Case label
        graph: Graph to execute
        inputs: f32 values of every external tensor
        output: Tensor scored against the reference
        threshold: Largest passing NMSE
    """

    suite: str
    name: str
    graph: OpGraph
    inputs: Dict[str, np.ndarray]
    output: str
    threshold: float


@dataclass
class CaseResult:
    suite: str
    case: str
    metric: str
    value: float
    threshold: float
    passed: bool
    error: str = ''


@dataclass
class VerifyReport:
    """Results of a verification run."""

    results: List[CaseResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def failures(self) -> List[CaseResult]:
        return [r for r in self.results if not r.passed]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.results],
                            columns=['suite', 'case', 'metric', 'value', 'threshold', 'passed', 'error'])

    def summary(self) -> pd.DataFrame:
        """Per-suite case count, failures and worst metric value."""
        df = self.frame()
        if df.empty:
            return pd.DataFrame(columns=['suite', 'cases', 'failed', 'worst'])
        grouped = df.groupby('suite', sort=False).agg(
            cases=('case', 'count'),
            failed=('passed', lambda s: int((~s.astype(bool)).sum())),
            worst=('value', 'max'),
        )
        return grouped.reset_index()


def single_op_graph(
    op: OpKind,
    operands: Sequence[TensorDesc],
    output: TensorDesc,
    name: Optional[str] = None,
    **node_kwargs,
) -> OpGraph:
    """Graph with one node reading externals ``in0``, ``in1``, ... and writing ``out``."""
    graph = OpGraph(name or str(op))
    names = [graph.add_external(f"in{i}", desc) for i, desc in enumerate(operands)]
    graph.add_node(op, names, 'out', output, name=str(op), **node_kwargs)
    return graph


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape).astype(np.float32)


def _inputs(graph: OpGraph, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {name: _normal(rng, graph.tensors[name].shape) for name in graph.external}


def _inner_dim(rng: np.random.Generator, fmt: BlockFormat, small: int = 96) -> int:
    if fmt.is_quantized:
        return fmt.block_len * int(rng.integers(1, 4 if fmt.is_k_quant else 5))
    return int(rng.integers(1, small + 1))


def matmul_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for i in range(n_shapes):
        fmt = ALL_FORMATS[i % len(ALL_FORMATS)]
        rhs = RHS_FORMATS[(i // len(ALL_FORMATS)) % 2]
        m, n, k = int(rng.integers(1, 65)), int(rng.integers(1, 65)), _inner_dim(rng, fmt)
        graph = single_op_graph(OpKind.MATMUL, [TensorDesc((m, k), fmt), TensorDesc((k, n), rhs)],
                                TensorDesc((m, n)), name=f"matmul-{fmt}-{rhs}")
        yield Case('matmul', f"{fmt}x{rhs} M={m} N={n} K={k}", graph, _inputs(graph, rng), 'out',
                   threshold_for(fmt, rhs))


def matvec_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for i in range(n_shapes):
        fmt = ALL_FORMATS[i % len(ALL_FORMATS)]
        rhs = RHS_FORMATS[(i // len(ALL_FORMATS)) % 2]
        m, k = int(rng.integers(1, 129)), _inner_dim(rng, fmt, small=256)
        graph = single_op_graph(OpKind.MATVEC, [TensorDesc((m, k), fmt), TensorDesc((k,), rhs)],
                                TensorDesc((m,)), name=f"matvec-{fmt}-{rhs}")
        yield Case('matvec', f"{fmt}x{rhs} M={m} K={k}", graph, _inputs(graph, rng), 'out',
                   threshold_for(fmt, rhs))


def _attention_graph(op: OpKind, seq_len: int, head_dim: int, kv: BlockFormat, n_q: int,
                     **node_kwargs) -> OpGraph:
    h = ATTENTION_HEADS
    q_shape = (h, head_dim) if op == OpKind.FLASH_DECODE else (n_q, h, head_dim)
    cache = TensorDesc((seq_len, h, head_dim), kv)
    return single_op_graph(op, [TensorDesc(q_shape), cache, cache], TensorDesc(q_shape),
                           name=f"{op}-{kv}-{seq_len}x{head_dim}", **node_kwargs)


def flash_decode_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    """Full grid of sequence length, head dim, KV format and split count."""
    for seq_len in ATTENTION_SEQ_LENS:
        for head_dim in HEAD_DIMS:
            for kv in KV_FORMATS:
                for splits in ATTENTION_SPLITS:
                    graph = _attention_graph(OpKind.FLASH_DECODE, seq_len, head_dim, kv, 1,
                                             scalars={'splits': splits, 'scale': 1.0 / math.sqrt(head_dim)})
                    yield Case('flash_decode', f"S={seq_len} D={head_dim} kv={kv} splits={splits}", graph,
                               _inputs(graph, rng), 'out', NMSE_F16)


def flash_tile_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for seq_len in ATTENTION_SEQ_LENS:
        for head_dim in HEAD_DIMS:
            for kv in KV_FORMATS:
                for causal in (False, True):
                    n_q = min(seq_len, 24)
                    graph = _attention_graph(OpKind.FLASH_TILE, seq_len, head_dim, kv, n_q, causal=causal,
                                             scalars={'scale': 1.0 / math.sqrt(head_dim)})
                    yield Case('flash_tile', f"S={seq_len} D={head_dim} kv={kv} T={n_q} causal={causal}",
                               graph, _inputs(graph, rng), 'out', NMSE_F16)


def elementwise_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    kinds = list(ElementwiseKind)
    for i in range(n_shapes):
        kind = kinds[i % len(kinds)]
        src = RHS_FORMATS[(i // len(kinds)) % 2]
        b_len = int(rng.integers(1, 33))
        n = b_len * int(rng.integers(1, 65))
        dst = RHS_FORMATS[(i // 2) % 2] if kind == ElementwiseKind.COPY_CAST else BlockFormat.F32
        in_place = kind.is_binary and src == BlockFormat.F32 and i % 3 == 0
        operands = [TensorDesc((n,), src)] + ([TensorDesc((b_len,))] if kind.is_binary else [])
        scalars = {'alpha': float(rng.uniform(-2, 2))} if kind == ElementwiseKind.SCALE else {}
        graph = single_op_graph(OpKind.ELEMENTWISE, operands, TensorDesc((n,), dst), name=f"elementwise-{kind}",
                                elementwise=kind, in_place=in_place, scalars=scalars)
        inputs = _inputs(graph, rng)
        if kind == ElementwiseKind.DIV:
            b = inputs['in1']
            inputs['in1'] = np.sign(b + 1e-3) * (0.5 + np.abs(b))
        label = f"{kind} {src}->{dst} n={n} b_len={b_len}" + (' in_place' if in_place else '')
        yield Case('elementwise', label, graph, inputs, 'out', threshold_for(src, dst))


def rms_norm_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for _ in range(n_shapes):
        rows, dim = int(rng.integers(1, 17)), int(rng.integers(1, 513))
        eps = float(10.0 ** rng.uniform(-6, -4))
        graph = single_op_graph(OpKind.RMS_NORM, [TensorDesc((rows, dim)), TensorDesc((dim,))],
                                TensorDesc((rows, dim)), scalars={'eps': eps})
        yield Case('rms_norm', f"rows={rows} dim={dim} eps={eps:.1e}", graph, _inputs(graph, rng), 'out',
                   threshold_for(BlockFormat.F32))


def softmax_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for _ in range(n_shapes):
        rows, dim = int(rng.integers(1, 17)), int(rng.integers(1, 1025))
        graph = single_op_graph(OpKind.SOFTMAX, [TensorDesc((rows, dim))], TensorDesc((rows, dim)))
        inputs = {'in0': 4.0 * _normal(rng, (rows, dim))}
        yield Case('softmax', f"rows={rows} dim={dim}", graph, inputs, 'out', threshold_for(BlockFormat.F32))


def rope_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    for i in range(n_shapes):
        t, h = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        d = 2 * int(rng.integers(1, 65))
        pos0 = int(rng.integers(0, 64))
        theta = (10000.0, 500000.0)[i % 2]
        shape = TensorDesc((t, h, d))
        graph = single_op_graph(OpKind.ROPE, [shape], shape, scalars={'pos0': pos0, 'theta_base': theta},
                                in_place=i % 4 == 0)
        yield Case('rope', f"T={t} H={h} D={d} pos0={pos0} theta={theta:g}", graph, _inputs(graph, rng), 'out',
                   threshold_for(BlockFormat.F32))


def block_cases(rng: np.random.Generator, n_shapes: int = DEFAULT_SHAPES) -> Iterator[Case]:
    """Decode and prefill micro blocks against the float64 reference."""
    shape = BlockShape(n_heads=4, head_dim=64, max_context=256)
    combos = [
        (BlockFormat.F16, BlockFormat.F16, 1),
        (BlockFormat.Q8_0, BlockFormat.F16, 2),
        (BlockFormat.Q4_0, BlockFormat.Q8_0, 4),
        (BlockFormat.Q4_K, BlockFormat.Q4_0, 8),
    ]
    for weights, kv, splits in combos:
        position = int(rng.integers(0, 200))
        graph = build_decode_block(shape, weights, kv, position=position, splits=splits)
        yield Case('block', f"decode w={weights} kv={kv} pos={position} splits={splits}", graph,
                   random_inputs(graph, rng, kv_fill=position), 'out', BLOCK_NMSE)
    for kv in (BlockFormat.F16, BlockFormat.Q8_0):
        position = int(rng.integers(0, 64))
        graph = build_prefill_block(shape, n_tokens=32, kv_format=kv, position=position)
        yield Case('block', f"prefill T=32 kv={kv} pos={position}", graph,
                   random_inputs(graph, rng, kv_fill=position), 'out', BLOCK_NMSE)


SUITES: Dict[str, Callable[[np.random.Generator, int], Iterator[Case]]] = {
    'matmul': matmul_cases,
    'matvec': matvec_cases,
    'flash_decode': flash_decode_cases,
    'flash_tile': flash_tile_cases,
    'elementwise': elementwise_cases,
    'rms_norm': rms_norm_cases,
    'softmax': softmax_cases,
    'rope': rope_cases,
    'block': block_cases,
}
QUANTIZE_KV_SUITE = 'quantize_kv'


def suite_names(filter_text: Optional[str] = None) -> List[str]:
    """
    Suites selected by a comma-separated list of name fragments.

    Raises:
        BenchError: Nothing matches the filter
    """
    names = list(SUITES) + [QUANTIZE_KV_SUITE]
    if not filter_text:
        return names
    parts = [p.strip() for p in filter_text.split(',') if p.strip()]
    chosen = [name for name in names if any(p in name for p in parts)]
    if not chosen:
        raise BenchError(f"No verification suite matches {filter_text!r}; known suites: {names}")
    return chosen


def run_case(runtime: Runtime, case: Case, perturb: float = 0.0) -> CaseResult:
    """Execute one case and score it; runtime errors count as failures."""
    try:
        runtime.upload(case.graph, case.inputs)
        runtime.execute(case.graph)
        got = runtime.readback((case.graph, case.output)) + np.float32(perturb)
        expected = reference_execute(case.graph, case.inputs)[case.output]
        value = nmse(expected, got)
        passed = value <= case.threshold
        result = CaseResult(case.suite, case.name, 'nmse', value, case.threshold, passed)
    except QuantKernError as e:
        logger.error(f"{case.suite} {case.name}: {e}")
        result = CaseResult(case.suite, case.name, 'nmse', math.inf, case.threshold, False, str(e))
    finally:
        runtime.release(case.graph)
    if not result.passed and not result.error:
        logger.warning(f"{case.suite} {case.name}: NMSE {result.value:.3e} above {case.threshold:.0e}")
    return result


def quantize_kv_cases(runtime: Runtime, rng: np.random.Generator, perturb: float = 0.0,
                      n_shapes: int = DEFAULT_SHAPES) -> Iterator[CaseResult]:
    """
    Device-side KV quantization against the reference codec.

    Block scales must match bit for bit and every decoded element must lie
    within one quantization step of the reference.
    """
    for i in range(n_shapes):
        fmt = (BlockFormat.Q8_0, BlockFormat.Q4_0)[i % 2]
        h, d = int(rng.integers(1, 5)), HEAD_DIMS[(i // 2) % 2]
        rows, capacity = int(rng.integers(1, 9)), 16
        row0 = int(rng.integers(0, capacity - rows + 1))
        cache = TensorDesc((capacity, h, d), fmt)
        graph = OpGraph(f"quantize_kv-{fmt}")
        graph.add_external('src', TensorDesc((rows, h, d)))
        graph.add_external('cache', cache, kv=True)
        block0 = row0 * h * d // fmt.block_len
        graph.add_node(OpKind.QUANTIZE_KV, ['src'], 'cache@store', cache, name='store', alias_of='cache',
                       scalars={'dst_block_offset': block0})
        name = f"{fmt} rows={rows} H={h} D={d} row0={row0}"
        src = _normal(rng, (rows, h, d))
        try:
            runtime.upload(graph, {'src': src, 'cache': np.zeros(cache.shape, dtype=np.float32)})
            runtime.execute(graph)
            raw = np.frombuffer(runtime.read_bytes(graph, 'cache'), dtype=np.uint8).reshape(-1, fmt.block_bytes)
            n_blocks = src.size // fmt.block_len
            got = raw[block0:block0 + n_blocks]
            want = np.frombuffer(quantize_tensor(src, fmt)[0], dtype=np.uint8).reshape(-1, fmt.block_bytes)
            untouched = np.delete(raw, np.arange(block0, block0 + n_blocks), axis=0)

            empty_block = np.frombuffer(quantize_tensor(np.zeros(fmt.block_len), fmt)[0], dtype=np.uint8)
            scales_equal = np.array_equal(got[:, :2], want[:, :2]) and bool((untouched == empty_block).all())
            d_step = np.abs(want[:, :2].copy().view('<f2').astype(np.float32))
            diff = np.abs(dequantize_blocks(got, fmt) + np.float32(perturb) - dequantize_blocks(want, fmt))
            steps = np.divide(diff, d_step, out=np.where(diff > 0, np.inf, 0.0).astype(np.float32),
                              where=d_step > 0)
            worst = float(steps.max()) if scales_equal else math.inf
            yield CaseResult(QUANTIZE_KV_SUITE, name, 'code_step', worst, 1.0, worst <= 1.0)
        except QuantKernError as e:
            logger.error(f"{QUANTIZE_KV_SUITE} {name}: {e}")
            yield CaseResult(QUANTIZE_KV_SUITE, name, 'code_step', math.inf, 1.0, False, str(e))
        finally:
            runtime.release(graph)


def run_verify(
    runtime: Runtime,
    filter_text: Optional[str] = None,
    seed: int = 0,
    perturb: float = 0.0,
    n_shapes: int = DEFAULT_SHAPES,
) -> VerifyReport:
    """
    Run the selected parity suites.

    Args:
        runtime: Runtime whose device is verified
        filter_text: Comma-separated suite name fragments; every suite when empty
        seed: Seed of the random shapes and values
        perturb: Constant added to every device result (fault injection)
        n_shapes: Random cases per non-grid suite

    Returns:
        VerifyReport whose ``exit_code`` is 0 iff every case passed
    """
    report = VerifyReport()
    for name in suite_names(filter_text):
        rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
        before = len(report.results)
        if name == QUANTIZE_KV_SUITE:
            report.results.extend(quantize_kv_cases(runtime, rng, perturb, n_shapes))
        else:
            for case in SUITES[name](rng, n_shapes):
                report.results.append(run_case(runtime, case, perturb))
        ran = report.results[before:]
        failed = sum(not r.passed for r in ran)
        logger.info(f"Suite {name}: {len(ran)} cases, {failed} failed")
    logger.info(f"Verification on {runtime.caps.adapter_name}: "
                f"{'PASS' if report.passed else 'FAIL'} ({len(report.results)} cases)")
    return report
