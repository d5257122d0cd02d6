"""
Benchmark workloads over the micro transformer block.

The decode preset generates tokens one at a time from a KV cache already
holding ``kv_depth`` tokens (matvec + flash_decode). The prefill preset pushes
a 512-token prompt through the block after ``kv_depth`` cached tokens
(matmul + flash_tile). Warmup executions never enter the statistics.
"""
import time
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from quantkern.bench.report import MIN_REPEATS, BenchReport
from quantkern.bench.tuning import SWEEP_SPACE, config_label, sweep_grid
from quantkern.errors import BenchError
from quantkern.kernels.types import CATEGORIES, OpKind
from quantkern.quant.formats import BlockFormat
from quantkern.runtime.blocks import (
    PREFILL_WEIGHT_FORMATS,
    BlockShape,
    build_decode_block,
    build_prefill_block,
    random_inputs,
    set_position,
)
from quantkern.runtime.config import RuntimeConfig
from quantkern.runtime.executor import ExecutionStats, Runtime, timing_breakdown
from quantkern.runtime.graph import OpGraph

# Configure module logger
logger = logging.getLogger(__name__)

PRESETS = ('decode', 'prefill512')
PREFILL_TOKENS = 512
DECODE_TOKENS = 128
BREAKDOWN_DEPTHS = (0, 512, 2048)
DEFAULT_SHAPE = BlockShape(n_heads=8, head_dim=128)

# Ops tuned on each preset
TUNE_PRESET = {
    OpKind.MATVEC: 'decode',
    OpKind.FLASH_DECODE: 'decode',
    OpKind.MATMUL: 'prefill512',
    OpKind.FLASH_TILE: 'prefill512',
}


def tuning_label(config: RuntimeConfig) -> str:
    """Label of a configuration's tuning overrides."""
    if not config.tuning:
        return 'default'
    return ';'.join(f"{op}:" + ','.join(f"{k}={v}" for k, v in sorted(params.items()))
                    for op, params in sorted(config.tuning.items()))


def build_workload(
    runtime: Runtime,
    preset: str,
    fmt: BlockFormat,
    kv_depth: int,
    shape: Optional[BlockShape] = None,
) -> OpGraph:
    """
    The block graph a preset runs.

    Prefill projections read f32/f16 weights; a quantized ``fmt`` falls back
    to f16 weights for prefill.
    """
    if preset not in PRESETS:
        raise BenchError(f"Unknown preset {preset!r}; expected one of {PRESETS}")
    shape = shape or replace(DEFAULT_SHAPE, max_context=runtime.config.max_context)
    if preset == 'decode':
        splits = runtime.config.tuning_for(OpKind.FLASH_DECODE).SPLITS
        return build_decode_block(shape, weight_format=fmt, position=kv_depth, splits=splits)
    if fmt not in PREFILL_WEIGHT_FORMATS:
        logger.warning(f"Prefill weights must be f32 or f16; benchmarking prefill with f16 instead of {fmt}")
        fmt = BlockFormat.F16
    return build_prefill_block(shape, n_tokens=PREFILL_TOKENS, weight_format=fmt, position=kv_depth)


def _run_iterations(runtime: Runtime, graph: OpGraph, kv_depth: int, iterations: int, decode: bool) -> float:
    """Wall time of ``iterations`` executions, decode advancing one position each."""
    started = time.perf_counter()
    for i in range(iterations):
        if decode:
            set_position(graph, kv_depth + i)
        runtime.execute(graph)
    runtime.device.wait_idle()
    elapsed = time.perf_counter() - started
    if decode:
        set_position(graph, kv_depth)
    return elapsed


def measure_breakdown(runtime: Runtime, graph: OpGraph, runs: int = 3) -> ExecutionStats:
    """Timings of ``runs`` timed executions merged into one stats record."""
    merged = ExecutionStats()
    for _ in range(runs):
        stats = runtime.execute(graph, timed=True).stats
        merged.timings.extend(stats.timings)
        merged.dispatches += stats.dispatches
        merged.coarse = merged.coarse or stats.coarse
    return merged


def run_bench(
    runtime: Runtime,
    preset: str = 'decode',
    fmt: BlockFormat = BlockFormat.Q8_0,
    kv_depth: int = 0,
    repeats: int = 5,
    iterations: Optional[int] = None,
    warmup: int = 2,
    seed: int = 0,
    shape: Optional[BlockShape] = None,
) -> BenchReport:
    """
    Benchmark one preset on the runtime's device.

    Args:
        runtime: Runtime to benchmark
        preset: ``decode`` or ``prefill512``
        fmt: Weight format
        kv_depth: Tokens already in the KV cache
        repeats: Measured repeats (at least 3)
        iterations: Executions per repeat; 128 for decode, 1 for prefill when omitted
        warmup: Unmeasured executions before the first repeat
        seed: Seed of the random weights and cache
        shape: Block dimensions

    Returns:
        BenchReport with throughput in tokens per second
    """
    if repeats < MIN_REPEATS:
        raise BenchError(f"At least {MIN_REPEATS} repeats are needed, got {repeats}")
    graph = build_workload(runtime, preset, fmt, kv_depth, shape)
    decode = preset == 'decode'
    iterations = iterations or (DECODE_TOKENS if decode else 1)
    tokens = 1 if decode else PREFILL_TOKENS
    capacity = graph.tensors['k_cache'].shape[0]
    if kv_depth + (iterations if decode else tokens) > capacity:
        raise BenchError(f"kv_depth {kv_depth} plus the generated tokens exceeds the cache of {capacity}")

    rng = np.random.default_rng(seed)
    try:
        runtime.upload(graph, random_inputs(graph, rng, kv_fill=kv_depth))
        for _ in range(warmup):
            runtime.execute(graph)
        runtime.device.wait_idle()

        seconds = []
        for r in range(repeats):
            elapsed = _run_iterations(runtime, graph, kv_depth, iterations, decode)
            logger.debug(f"{preset} repeat {r}: {elapsed:.4f}s for {iterations} iterations")
            seconds.append(elapsed)

        timed = measure_breakdown(runtime, graph)
        keys = list(dict.fromkeys(step.kernel.key.label for step in runtime.session(graph).steps))
    finally:
        runtime.release(graph)

    used = graph.tensors['wq'].format
    report = BenchReport(
        device=runtime.caps.adapter_name,
        workload={'preset': preset, 'format': str(used), 'kv_depth': kv_depth,
                  'heads': graph.tensors['k_cache'].shape[1], 'head_dim': graph.tensors['k_cache'].shape[2]},
        config=tuning_label(runtime.config),
        seconds=seconds,
        iterations=iterations,
        tokens=tokens,
        kernel_keys=keys,
        breakdown=timing_breakdown(timed),
        coarse=timed.coarse,
    )
    logger.info(f"{preset} {used} kv_depth={kv_depth}: {report.mean:.2f} tokens/s "
                f"(min {report.min:.2f}, max {report.max:.2f})")
    return report


def run_tune(
    runtime: Runtime,
    op: OpKind,
    fmt: BlockFormat = BlockFormat.Q8_0,
    kv_depth: int = 0,
    limit: Optional[int] = None,
    repeats: int = MIN_REPEATS,
    iterations: Optional[int] = None,
    warmup: int = 1,
    seed: int = 0,
    shape: Optional[BlockShape] = None,
) -> List[BenchReport]:
    """
    Benchmark every feasible configuration of ``op`` on the current device.

    Each candidate runs the preset that exercises ``op`` with only that op's
    parameters overridden. The device and the kernel cache are shared across
    candidates.

    Returns:
        One report per configuration; ``config`` holds the sweep label
    """
    if op not in TUNE_PRESET:
        raise BenchError(f"No tuning workload for {op}; tunable ops: {[str(o) for o in TUNE_PRESET]}")
    shape = shape or replace(DEFAULT_SHAPE, max_context=runtime.config.max_context)
    grid = sweep_grid(op, runtime.caps, head_dim=shape.head_dim, **({'limit': limit} if limit else {}))
    reports = []
    for i, params in enumerate(grid):
        overrides = dict(runtime.config.tuning)
        overrides[str(op)] = {**dict(params.relevant(op)), **{name: getattr(params, name) for name in SWEEP_SPACE[op]}}
        candidate = Runtime(replace(runtime.config, tuning=overrides), device=runtime.device, cache=runtime.cache)
        report = run_bench(candidate, TUNE_PRESET[op], fmt, kv_depth, repeats=repeats, iterations=iterations,
                           warmup=warmup, seed=seed, shape=shape)
        report.config = config_label(params, op)
        reports.append(report)
        logger.info(f"[{i + 1}/{len(grid)}] {report.config}: {report.mean:.2f} tokens/s")
    return reports


def breakdown_by_depth(
    runtime: Runtime,
    fmt: BlockFormat = BlockFormat.Q8_0,
    depths: Sequence[int] = BREAKDOWN_DEPTHS,
    runs: int = 3,
    warmup: int = 1,
    seed: int = 0,
    shape: Optional[BlockShape] = None,
) -> pd.DataFrame:
    """
    Per-category decode time share at several KV depths.

    Returns:
        One row per depth with a percentage column per category and a
        ``coarse`` flag
    """
    rows: List[Dict[str, object]] = []
    for depth in depths:
        graph = build_workload(runtime, 'decode', fmt, depth, shape)
        try:
            runtime.upload(graph, random_inputs(graph, np.random.default_rng(seed), kv_fill=depth))
            for _ in range(warmup):
                runtime.execute(graph)
            stats = measure_breakdown(runtime, graph, runs)
        finally:
            runtime.release(graph)
        shares = timing_breakdown(stats)
        rows.append({'kv_depth': depth, **shares, 'coarse': stats.coarse})
        logger.info(f"kv_depth={depth}: attention {shares['attention']:.1f}%")
    frame = pd.DataFrame(rows, columns=['kv_depth', *CATEGORIES, 'coarse'])
    attention = frame['attention'].tolist()
    if any(b < a for a, b in zip(attention, attention[1:])):
        logger.warning("Attention share does not grow with KV depth on this device")
    return frame
