"""
Command-line surface: verification, benchmarks, tuning, clustering and GGUF tools.
"""
import os
import sys
import logging
import argparse
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from quantkern.bench.clustering import DEFAULT_SEED, cluster_devices, elbow_table
from quantkern.bench.report import read_csv, reports_frame, write_csv
from quantkern.bench.runner import PRESETS, BREAKDOWN_DEPTHS, breakdown_by_depth, run_bench, run_tune
from quantkern.bench.tuning import DEFAULT_SLOWDOWN_CAP, ThroughputMatrix, portable_scores, select_portable
from quantkern.bench.verify import DEFAULT_SHAPES, run_verify
from quantkern.errors import BenchError, QuantKernError
from quantkern.gguf.reader import read_gguf_file, read_header
from quantkern.gguf.streamer import MemorySink, StagingAllocator, stream_tensor
from quantkern.kernels.library import kernel_docs
from quantkern.kernels.types import OpKind
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import TensorDesc, dequantize_tensor
from quantkern.runtime.config import BACKENDS, load_config
from quantkern.runtime.executor import Runtime
from quantkern.utils.logger import configure_root_logger
from quantkern.visualization.plotter import BenchPlotter

# Module logger
logger = logging.getLogger(__name__)


def make_runtime(args: argparse.Namespace) -> Runtime:
    """Runtime from ``--config`` plus the ``--backend`` override."""
    config = load_config(getattr(args, 'config', None))
    backend = getattr(args, 'backend', None)
    if backend:
        config = replace(config, backend=backend)
    runtime = Runtime(config)
    logger.info(f"Device: {runtime.caps.adapter_name} ({runtime.caps.backend})")
    return runtime


def write_xlsx(path: str, sheets: Dict[str, pd.DataFrame]) -> None:
    """Save frames to one Excel workbook, one sheet each."""
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    with pd.ExcelWriter(path) as writer:
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name[:31], index=False)  # Excel sheet names limited to 31 chars
    logger.info(f"Wrote {len(sheets)} sheets to {path}")


def cmd_verify(args: argparse.Namespace) -> int:
    """Run the oracle-parity suites; exit code 0 iff every case passed."""
    runtime = make_runtime(args)
    try:
        report = run_verify(runtime, args.filter, seed=args.seed, perturb=args.perturb, n_shapes=args.shapes)
    finally:
        runtime.close()
    print(report.summary().to_string(index=False))
    for failure in report.failures()[:20]:
        print(f"FAIL {failure.suite}: {failure.case} {failure.metric}={failure.value:.3e} "
              f"(limit {failure.threshold:.0e}) {failure.error}")
    if args.csv:
        report.frame().to_csv(args.csv, index=False)
        logger.info(f"Wrote verification results to {args.csv}")
    print('PASS' if report.passed else 'FAIL')
    return report.exit_code


def cmd_bench(args: argparse.Namespace) -> int:
    """Benchmark presets at one or more KV depths."""
    runtime = make_runtime(args)
    fmt = BlockFormat.from_name(args.format)
    reports = []
    try:
        for preset in args.preset:
            for depth in args.kv_depth:
                report = run_bench(runtime, preset, fmt, depth, repeats=args.repeats, iterations=args.iterations,
                                   warmup=args.warmup, seed=args.seed)
                print(report.table())
                print()
                reports.append(report)
    finally:
        runtime.close()

    rows = reports_frame(reports)
    if args.csv:
        write_csv(rows, args.csv)
    breakdown = pd.DataFrame([{'workload': r.workload_label, 'kv_depth': r.workload['kv_depth'], **r.breakdown,
                               'coarse': r.coarse} for r in reports])
    if args.xlsx:
        write_xlsx(args.xlsx, {'Repeats': rows, 'Breakdown': breakdown,
                               'Kernels': pd.DataFrame([{'workload': r.workload_label, 'kernel': k}
                                                        for r in reports for k in r.kernel_keys])})
    if args.plots_dir:
        BenchPlotter(args.plots_dir).plot_all(rows, breakdown)
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    """Sweep one op's tuning grid, then pick the portable configuration."""
    op = OpKind(args.op)
    runtime = make_runtime(args)
    try:
        reports = run_tune(runtime, op, BlockFormat.from_name(args.format), args.kv_depth, limit=args.limit,
                           repeats=args.repeats, iterations=args.iterations, seed=args.seed)
    finally:
        runtime.close()
    if not reports:
        raise BenchError(f"No feasible {op} configuration on this device")

    rows = reports_frame(reports)
    if args.csv:
        write_csv(rows, args.csv)
        rows = read_csv(args.csv)
    workload = reports[0].workload_label
    rows = rows[rows['workload'] == workload]
    matrix = ThroughputMatrix.from_frame(rows, label_column='config')
    scores = portable_scores(matrix, args.slowdown_cap)
    winner = select_portable(matrix, args.slowdown_cap)

    print(scores.sort_values('geomean', ascending=False).head(10).to_string())
    print(f"\nPortable {op} configuration over {len(matrix.devices)} device(s): {winner}")
    print("Config file lines:")
    for item in winner.split(','):
        name, value = item.split('=')
        print(f"  {op}.{name} = {value}")
    if args.plots_dir:
        BenchPlotter(args.plots_dir).plot_tuning(rows)
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    """Cluster devices by their throughput profile across workloads."""
    rows = read_csv(args.input)
    matrix = ThroughputMatrix.from_frame(rows, label_column='workload')
    result = cluster_devices(matrix, args.k, seed=args.seed)
    elbow = elbow_table(matrix, seed=args.seed)

    assignment = result.frame()
    print(assignment.to_string(index=False))
    print(f"\nInertia: {result.inertia:.4f}")
    print(elbow.to_string(index=False))
    if args.output:
        assignment.to_csv(args.output, index=False)
        logger.info(f"Wrote cluster assignment to {args.output}")
    if args.xlsx:
        write_xlsx(args.xlsx, {'Clusters': assignment, 'Elbow': elbow,
                               'Features': result.features.reset_index()})
    if args.plots_dir:
        plotter = BenchPlotter(args.plots_dir)
        plotter.plot_elbow(elbow)
        plotter.plot_clusters(result.features, result.labels, result.names)
    return 0


def cmd_breakdown(args: argparse.Namespace) -> int:
    """Per-category decode time at several KV depths."""
    runtime = make_runtime(args)
    try:
        frame = breakdown_by_depth(runtime, BlockFormat.from_name(args.format), args.kv_depth, runs=args.runs,
                                   seed=args.seed)
    finally:
        runtime.close()
    print(frame.to_string(index=False, float_format=lambda v: f"{v:6.1f}"))
    if frame['coarse'].any():
        print("(coarse: submission-bracketed wall time, no device timestamps)")
    if args.csv:
        frame.to_csv(args.csv, index=False)
    if args.plots_dir:
        BenchPlotter(args.plots_dir).plot_breakdown(frame)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    """Print the metadata and tensor index of a GGUF file."""
    model = read_gguf_file(args.path)
    for key, value in model.describe().items():
        print(f"{key}: {value}")
    print("\nMetadata:")
    for key, item in model.metadata.items():
        shown = item.value if not isinstance(item.value, list) else f"[{len(item.value)} x {item.item_kind.name}]"
        print(f"  {key} ({item.kind.name}) = {shown}")
    index = pd.DataFrame([{'name': t.name, 'format': str(t.format), 'shape': 'x'.join(map(str, t.shape)),
                           'bytes': t.nbytes, 'offset': t.offset} for t in model.tensors],
                         columns=['name', 'format', 'shape', 'bytes', 'offset'])
    print("\nTensors:")
    print(index.to_string(index=False) if not index.empty else '  (none)')
    if args.csv:
        index.to_csv(args.csv, index=False)
    return 0


def cmd_kernels(args: argparse.Namespace) -> int:
    """Print the parameters each kernel template reads."""
    text = kernel_docs()
    if args.output:
        with open(args.output, 'w', encoding='utf-8') as f:
            f.write(text)
    else:
        print(text, end='')
    return 0


def extract_tensor(path: str, name: str, dequant: bool = False):
    """
    Stream one tensor out of a GGUF file.

    Returns:
        Raw payload bytes, or f32 values shaped like the tensor when ``dequant``
    """
    with open(path, 'rb') as f:
        model = read_header(f)
        try:
            info = model.tensor(name)
        except KeyError:
            raise BenchError(f"No tensor named {name!r} in {path}; it has {len(model.tensors)} tensors") from None
        allocator = StagingAllocator()
        with MemorySink(info.nbytes) as sink:
            stream_tensor(f, info, sink, data_start=model.data_start, allocator=allocator)
            payload = bytes(sink.data)
    logger.info(f"Extracted {name}: {len(payload)} bytes, peak staging {allocator.peak_bytes} bytes")
    if dequant:
        return dequantize_tensor(payload, TensorDesc(info.shape, info.format))
    return payload


def cmd_extract(args: argparse.Namespace) -> int:
    """Dump one tensor as raw bytes or dequantized f32 (``.npy``)."""
    data = extract_tensor(args.path, args.tensor, args.dequant)
    if isinstance(data, np.ndarray):
        print(f"{args.tensor}: shape {data.shape}, mean {data.mean():.6f}, std {data.std():.6f}, "
              f"min {data.min():.6f}, max {data.max():.6f}")
        if args.output:
            np.save(args.output, data)
    else:
        print(f"{args.tensor}: {len(data)} bytes")
        if args.output:
            with open(args.output, 'wb') as f:
                f.write(data)
    if args.output:
        logger.info(f"Wrote {args.tensor} to {args.output}")
    return 0


def _ints(text: str) -> List[int]:
    return [int(part) for part in text.split(',') if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Quantized kernel verification, benchmarking and tuning')
    parser.add_argument('--config', type=str, default=None, help='Runtime config file (key = value lines)')
    parser.add_argument('--backend', choices=BACKENDS, default=None, help='Override the configured backend')
    parser.add_argument('--log-level', type=str, default=None, help='Logging level (QUANTKERN_LOG_LEVEL)')
    parser.add_argument('--log-file', type=str, default=None, help='Also log to this file')
    subparsers = parser.add_subparsers(dest='mode', help='Command to run')

    verify = subparsers.add_parser('verify', help='Compare every kernel against its CPU oracle')
    verify.add_argument('--filter', type=str, default=None, help='Comma-separated suite names (e.g. matvec)')
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--shapes', type=int, default=DEFAULT_SHAPES, help='Random cases per suite')
    verify.add_argument('--perturb', type=float, default=0.0, help='Add this to every device result')
    verify.add_argument('--csv', type=str, default=None, help='Write per-case results')
    verify.set_defaults(handler=cmd_verify)

    bench = subparsers.add_parser('bench', help='Throughput of the micro block')
    bench.add_argument('--preset', choices=PRESETS, nargs='+', default=['decode'])
    bench.add_argument('--format', type=str, default='q8_0', help='Weight format')
    bench.add_argument('--kv-depth', type=_ints, default=[0], help='Comma-separated KV depths (e.g. 0,2048)')
    bench.add_argument('--repeats', type=int, default=5)
    bench.add_argument('--iterations', type=int, default=None)
    bench.add_argument('--warmup', type=int, default=2)
    bench.add_argument('--seed', type=int, default=0)
    bench.add_argument('--csv', type=str, default=None, help='Append rows to this CSV')
    bench.add_argument('--xlsx', type=str, default=None, help='Write an Excel workbook')
    bench.add_argument('--plots-dir', type=str, default=None)
    bench.set_defaults(handler=cmd_bench)

    tune = subparsers.add_parser('tune', help='Sweep tuning parameters and select a portable configuration')
    tune.add_argument('--op', choices=[str(op) for op in (OpKind.MATVEC, OpKind.MATMUL, OpKind.FLASH_DECODE,
                                                         OpKind.FLASH_TILE)], default='matvec')
    tune.add_argument('--format', type=str, default='q8_0')
    tune.add_argument('--kv-depth', type=int, default=0)
    tune.add_argument('--limit', type=int, default=None, help='Maximum sweep points')
    tune.add_argument('--repeats', type=int, default=3)
    tune.add_argument('--iterations', type=int, default=None)
    tune.add_argument('--seed', type=int, default=0)
    tune.add_argument('--slowdown-cap', type=float, default=DEFAULT_SLOWDOWN_CAP)
    tune.add_argument('--csv', type=str, default=None, help='Append rows here; selection uses every device in it')
    tune.add_argument('--plots-dir', type=str, default=None)
    tune.set_defaults(handler=cmd_tune)

    cluster = subparsers.add_parser('cluster', help='K-means over per-device throughput profiles')
    cluster.add_argument('input', type=str, help='Benchmark CSV with rows from several devices')
    cluster.add_argument('--k', type=int, default=3)
    cluster.add_argument('--seed', type=int, default=DEFAULT_SEED)
    cluster.add_argument('--output', type=str, default=None, help='Write the assignment CSV')
    cluster.add_argument('--xlsx', type=str, default=None)
    cluster.add_argument('--plots-dir', type=str, default=None)
    cluster.set_defaults(handler=cmd_cluster)

    breakdown = subparsers.add_parser('breakdown', help='Kernel-category time shares at several KV depths')
    breakdown.add_argument('--format', type=str, default='q8_0')
    breakdown.add_argument('--kv-depth', type=_ints, default=list(BREAKDOWN_DEPTHS))
    breakdown.add_argument('--runs', type=int, default=3)
    breakdown.add_argument('--seed', type=int, default=0)
    breakdown.add_argument('--csv', type=str, default=None)
    breakdown.add_argument('--plots-dir', type=str, default=None)
    breakdown.set_defaults(handler=cmd_breakdown)

    inspect = subparsers.add_parser('inspect', help='List the metadata and tensors of a GGUF file')
    inspect.add_argument('path', type=str)
    inspect.add_argument('--csv', type=str, default=None, help='Write the tensor index')
    inspect.set_defaults(handler=cmd_inspect)

    extract = subparsers.add_parser('extract', help='Dump one tensor of a GGUF file')
    extract.add_argument('path', type=str)
    extract.add_argument('tensor', type=str)
    extract.add_argument('--dequant', action='store_true', help='Decode to f32 (.npy output)')
    extract.add_argument('--output', type=str, default=None)
    extract.set_defaults(handler=cmd_extract)

    kernels = subparsers.add_parser('kernels', help='Document the parameters of every kernel template')
    kernels.add_argument('--output', type=str, default=None)
    kernels.set_defaults(handler=cmd_kernels)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run one command.

    Returns:
        0 on success, 1 for library errors or failed verification, 2 for unexpected errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_root_logger(level=args.log_level, log_file=args.log_file)
    if not getattr(args, 'handler', None):
        parser.print_help()
        return 2
    try:
        return args.handler(args)
    except QuantKernError as e:
        logger.error(f"{args.mode} failed: {e}")
        return 1
    except Exception as e:
        logger.error(f"Unexpected error in {args.mode}: {e}", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
