"""
Graph execution.

``Runtime`` bundles the device, the kernel cache and the parameter arena.
Executing a graph against a memory plan creates a session once (every
buffer the plan sizes, every pipeline the graph needs); later executions
only write parameters and record dispatches, so steady state allocates
nothing. Dispatches are grouped ``ops_per_pass`` per compute pass and
``passes_per_submit`` passes per queue submission; the host only waits on
the device when a parameter slot it needs is still in flight or when a
result is read back.
"""
import logging
import math
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from quantkern.errors import (
    DeviceLost,
    EpsNonPositive,
    PipelineMissing,
    RuntimeFault,
    ShapeMismatch,
    UnknownTensor,
)
from quantkern.kernels.library import KernelCache
from quantkern.kernels.params import layout_for
from quantkern.kernels.types import CATEGORIES, CompiledKernel, OpContext, OpKind, TuningParams
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import TensorDesc, dequantize_tensor, quantize_tensor
from quantkern.runtime.arena import ParamArena
from quantkern.runtime.config import RuntimeConfig, load_config
from quantkern.runtime.device import Binding, Device, PassTiming, align4, init_device
from quantkern.runtime.graph import Node, OpGraph
from quantkern.runtime.planner import PLAN_ALIGNMENT, MemoryPlan, plan_memory

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_THETA_BASE = 10000.0
DEFAULT_EPS = 1e-6


@dataclass
class ExecutionStats:
    """
    Counters for one execute call.

    Attributes:
        dispatches: Kernel dispatches recorded
        passes: Compute passes recorded
        submissions: Queue submissions made
        allocations: Device buffers created during the call
        arena_waits: Parameter writes that waited on an in-flight slot
        flushes: Early submissions forced by the parameter arena
        wall_seconds: Host wall time of the call
        timings: Per-pass (or per-dispatch) durations of a timed run
        coarse: Timings are submission-bracketed wall time, not device timestamps
    """

    dispatches: int = 0
    passes: int = 0
    submissions: int = 0
    allocations: int = 0
    arena_waits: int = 0
    flushes: int = 0
    wall_seconds: float = 0.0
    timings: List[PassTiming] = field(default_factory=list)
    coarse: bool = False

    def category_seconds(self) -> Dict[str, float]:
        totals = {name: 0.0 for name in CATEGORIES}
        for timing in self.timings:
            totals[timing.tag if timing.tag in totals else 'other'] += timing.seconds
        return totals


def timing_breakdown(stats: ExecutionStats) -> Dict[str, float]:
    """
    Percentage of measured time per kernel category.

    Returns:
        {category: percent}; the values sum to 100, or are all zero when
        nothing was measured
    """
    totals = stats.category_seconds()
    grand = sum(totals.values())
    if grand <= 0:
        return {name: 0.0 for name in CATEGORIES}
    return {name: 100.0 * seconds / grand for name, seconds in totals.items()}


@dataclass(frozen=True)
class TensorHandle:
    """A tensor of an executed graph that can be read back."""

    graph: str
    name: str
    desc: TensorDesc
    session: 'Session' = field(repr=False, compare=False)


@dataclass
class ExecutionResult:
    outputs: Dict[str, TensorHandle]
    stats: ExecutionStats


@dataclass
class _Step:
    node: Node
    kernel: CompiledKernel
    bindings: Tuple[Binding, ...]
    stage: str = 'main'


def _head_shape(desc: TensorDesc) -> Tuple[int, int]:
    return desc.shape[-2], desc.shape[-1]


def dispatch_values(graph: OpGraph, node: Node, params: TuningParams) -> Dict[str, float]:
    """
    Kernel parameter values for one node from its tensor shapes and scalars.

    The same mapping fills the uniform block and drives the dispatch geometry.

    Raises:
        ShapeMismatch: A scalar is out of range for the tensor shapes
        EpsNonPositive: rms_norm eps is not positive
    """
    t = graph.tensors
    ins = [t[name] for name in node.inputs]
    s = node.scalars
    op = node.op

    if op == OpKind.MATMUL:
        return {'M': ins[0].shape[0], 'N': ins[1].shape[1], 'K': ins[0].shape[1]}
    if op == OpKind.MATVEC:
        return {'M': ins[0].shape[0], 'K': ins[0].shape[1]}
    if op in (OpKind.FLASH_DECODE, OpKind.FLASH_TILE):
        capacity = ins[1].shape[0]
        n_heads, head_dim = _head_shape(ins[1])
        seq_len = int(s.get('seq_len', capacity))
        if not 1 <= seq_len <= capacity:
            raise ShapeMismatch(f"{node.name}: seq_len {seq_len} outside KV capacity {capacity}")
        scale = float(s.get('scale', 1.0 / math.sqrt(head_dim)))
        if op == OpKind.FLASH_DECODE:
            splits = int(s.get('splits', params.SPLITS))
            return {'seq_len': seq_len, 'n_heads': n_heads, 'head_dim': head_dim, 'splits': splits,
                    'scale': scale, 'chunk': math.ceil(seq_len / splits)}
        n_q = ins[0].shape[0]
        q_pos0 = int(s.get('q_pos0', seq_len - n_q))
        if q_pos0 < 0 or q_pos0 + n_q > capacity:
            raise ShapeMismatch(f"{node.name}: queries at {q_pos0}..{q_pos0 + n_q} outside KV capacity {capacity}")
        return {'n_q': n_q, 'seq_len': seq_len, 'n_heads': n_heads, 'head_dim': head_dim,
                'scale': scale, 'q_pos0': q_pos0}
    if op == OpKind.ELEMENTWISE:
        n = int(s.get('n', ins[0].n_elements))
        return {'n': n, 'b_len': ins[1].n_elements if len(ins) > 1 else 1, 'alpha': float(s.get('alpha', 1.0)),
                'dst_offset': int(s.get('dst_offset', 0)), 'src_offset': int(s.get('src_offset', 0))}
    if op == OpKind.RMS_NORM:
        eps = float(s.get('eps', DEFAULT_EPS))
        if eps <= 0:
            raise EpsNonPositive(f"{node.name}: eps must be positive, got {eps}")
        return {'rows': ins[0].n_rows, 'dim': ins[0].row_len, 'eps': eps}
    if op == OpKind.SOFTMAX:
        return {'rows': ins[0].n_rows, 'dim': ins[0].row_len}
    if op == OpKind.ROPE:
        n_tokens, n_heads, head_dim = ins[0].shape
        return {'n_tokens': n_tokens, 'n_heads': n_heads, 'head_dim': head_dim,
                'pos0': int(s.get('pos0', 0)), 'theta_base': float(s.get('theta_base', DEFAULT_THETA_BASE))}
    if op == OpKind.QUANTIZE_KV:
        fmt = t[node.output].format
        return {'n_pairs': ins[0].n_elements // fmt.block_len // 2,
                'dst_block_offset': int(s.get('dst_block_offset', 0))}
    if op == OpKind.FLASH_REDUCE:
        n_heads, splits, width = ins[0].shape
        return {'n_heads': n_heads, 'head_dim': width - 2, 'splits': splits}
    raise RuntimeFault(f"No dispatch values for {op}")


class Session:
    """
    Device buffers and pipelines of one (graph, plan) pair.

    Everything is created here; ``Runtime.execute`` never allocates.
    """

    def __init__(self, runtime: 'Runtime', graph: OpGraph, plan: MemoryPlan):
        if set(plan.order) != {node.name for node in graph.nodes}:
            raise RuntimeFault(f"Memory plan does not match graph {graph.name!r}")
        device = runtime.device
        self.runtime = runtime
        self.graph = graph
        self.plan = plan
        self.intermediates = (device.create_buffer(plan.total_bytes, label=f"{graph.name}/intermediates")
                              if plan.total_bytes else None)
        self.external = {name: device.create_buffer(nbytes, label=f"{graph.name}/{name}")
                         for name, nbytes in plan.external_bytes.items()}
        self.partials = (device.create_buffer(plan.partials_bytes, label=f"{graph.name}/partials")
                         if plan.partials_bytes else None)
        self.steps: List[_Step] = []
        self._prepared: Dict[str, Tuple[TuningParams, int]] = {}
        self.prepare()

    def location(self, tensor: str) -> Binding:
        """Buffer range holding ``tensor``'s storage."""
        if tensor not in self.graph.tensors:
            raise UnknownTensor(f"Tensor {tensor!r} is not part of graph {self.graph.name!r}")
        root = self.graph.storage_root(tensor)
        size = align4(self.graph.tensors[root].nbytes)
        if root in self.external:
            return Binding(self.external[root], 0, size)
        if root not in self.plan.offsets:
            raise UnknownTensor(f"Tensor {tensor!r} has no planned storage")
        return Binding(self.intermediates, self.plan.offsets[root], size)

    def _params(self, node: Node) -> TuningParams:
        params = self.runtime.config.tuning_for(node.op)
        if node.op == OpKind.FLASH_DECODE and 'splits' in node.scalars:
            params = params.with_overrides({'SPLITS': int(node.scalars['splits'])})
        return params

    def _kernel(self, ctx: OpContext, params: TuningParams) -> CompiledKernel:
        return self.runtime.cache.kernel_for(ctx, params)

    def prepare(self) -> None:
        """Compile every pipeline and resolve every binding of the graph."""
        graph, caps = self.graph, self.runtime.device.caps
        portable = self.runtime.config.force_portable
        steps = []
        for node in graph.topological_order():
            params = self._params(node)
            ins = [self.location(name) for name in node.inputs]
            out = [] if node.in_place else [self.location(node.output)]
            ctx = graph.context(node, caps, force_portable=portable)
            splits = params.SPLITS if node.op == OpKind.FLASH_DECODE else 1

            if splits > 1:
                n_heads, head_dim = _head_shape(graph.tensors[node.inputs[1]])
                partials_desc = TensorDesc((n_heads, splits, head_dim + 2), BlockFormat.F32)
                partials = Binding(self.partials, 0, partials_desc.nbytes)
                decode_ctx = OpContext(op=OpKind.FLASH_DECODE, operands=ctx.operands, output=partials_desc,
                                       caps=caps, force_portable=portable)
                reduce_ctx = OpContext(op=OpKind.FLASH_REDUCE, operands=(partials_desc,), output=ctx.output,
                                       caps=caps, force_portable=portable)
                steps.append(_Step(node, self._kernel(decode_ctx, params), tuple(ins) + (partials,), 'split'))
                steps.append(_Step(node, self._kernel(reduce_ctx, params), (partials,) + tuple(out), 'reduce'))
            else:
                steps.append(_Step(node, self._kernel(ctx, params), tuple(ins + out)))
            self._prepared[node.name] = (params, splits)
        self.steps = steps
        logger.info(f"Prepared {graph.name}: {len(graph)} nodes, {len(steps)} dispatches")

    def step_values(self, step: _Step) -> Dict[str, float]:
        if step.node.name not in self._prepared:
            raise PipelineMissing(f"Node {step.node.name!r} was added after the session was prepared")
        params, splits = self._prepared[step.node.name]
        values = dispatch_values(self.graph, step.node, params)
        if step.node.op == OpKind.FLASH_DECODE and int(values['splits']) != splits:
            raise PipelineMissing(f"{step.node.name}: split count changed from {splits} to {values['splits']}")
        if step.stage == 'reduce':
            return {'n_heads': values['n_heads'], 'head_dim': values['head_dim'], 'splits': values['splits']}
        return values


def _to_bytes(data: Union[bytes, bytearray, np.ndarray], desc: TensorDesc) -> bytes:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return bytes(data)
    arr = np.asarray(data)
    if arr.size != desc.n_elements:
        raise ShapeMismatch(f"Expected {desc.n_elements} elements for {desc.shape}, got {arr.size}")
    payload, _ = quantize_tensor(arr.reshape(desc.shape), desc.format)
    return payload


class Runtime:
    """
    Device, kernel cache and parameter arena with per-graph sessions.

    Args:
        config: Runtime configuration, loaded from file/environment when omitted
        device: Existing device, initialized from ``config`` when omitted
        cache: Kernel cache to share with another runtime on the same device
    """

    def __init__(
        self,
        config: Optional[RuntimeConfig] = None,
        device: Optional[Device] = None,
        cache: Optional[KernelCache] = None,
    ):
        self.config = config or load_config()
        self.device = device or init_device(
            backend=self.config.backend,
            request_f16=self.config.request_f16,
            request_subgroups=self.config.request_subgroups,
            request_timestamps=self.config.request_timestamps,
            validation=self.config.validation,
        )
        self.cache = cache or KernelCache(self.device)
        self.arena = ParamArena(self.device, self.config.slot_bytes, self.config.slot_count)
        self._sessions: Dict[Tuple[int, int], Session] = {}
        self._current: Dict[int, Session] = {}

    @property
    def caps(self):
        return self.device.caps

    def plan(self, graph: OpGraph) -> MemoryPlan:
        alignment = max(PLAN_ALIGNMENT, self.device.caps.storage_offset_alignment)
        return plan_memory(graph, max_buffer_size=self.device.caps.max_buffer_size, alignment=alignment)

    def session(self, graph: OpGraph, plan: Optional[MemoryPlan] = None) -> Session:
        """The session for ``graph`` (and ``plan``), created on first use."""
        if plan is None:
            current = self._current.get(id(graph))
            if current is not None:
                return current
            plan = self.plan(graph)
        key = (id(graph), id(plan))
        session = self._sessions.get(key)
        if session is None:
            session = Session(self, graph, plan)
            self._sessions[key] = session
        self._current[id(graph)] = session
        return session

    def release(self, graph: OpGraph) -> None:
        """Drop every session of ``graph`` and the buffers they own."""
        self._current.pop(id(graph), None)
        for key in [key for key in self._sessions if key[0] == id(graph)]:
            del self._sessions[key]

    def write_tensor(self, graph: OpGraph, name: str, data, plan: Optional[MemoryPlan] = None) -> None:
        """
        Upload an external tensor.

        Args:
            graph: Graph declaring the tensor
            name: External tensor name
            data: Raw encoded bytes, or float values encoded to the tensor's format
        """
        if name not in graph.external:
            raise UnknownTensor(f"{name!r} is not an external tensor of {graph.name!r}")
        session = self.session(graph, plan)
        desc = graph.tensors[name]
        payload = _to_bytes(data, desc)
        if len(payload) != desc.nbytes:
            raise ShapeMismatch(f"{name}: expected {desc.nbytes} bytes, got {len(payload)}")
        self.device.write_buffer(session.external[name], 0, payload)

    def upload(self, graph: OpGraph, tensors: Mapping[str, object], plan: Optional[MemoryPlan] = None) -> None:
        for name, data in tensors.items():
            self.write_tensor(graph, name, data, plan)

    def handle(self, graph: OpGraph, name: str) -> TensorHandle:
        session = self._current.get(id(graph))
        if session is None or name not in graph.tensors:
            raise UnknownTensor(f"Tensor {name!r} of {graph.name!r} has no storage")
        session.location(name)
        return TensorHandle(graph.name, name, graph.tensors[name], session)

    def execute(
        self,
        graph: OpGraph,
        plan: Optional[MemoryPlan] = None,
        ops_per_pass: Optional[int] = None,
        passes_per_submit: Optional[int] = None,
        timed: bool = False,
    ) -> ExecutionResult:
        """
        Dispatch every node in topological order.

        Args:
            graph: Graph to run
            plan: Memory plan, planned on first use when omitted
            ops_per_pass: Dispatches per compute pass (config default)
            passes_per_submit: Passes per queue submission (config default)
            timed: Record per-dispatch timings; forces one dispatch per pass

        Returns:
            Handles of the graph outputs and the execution statistics

        Raises:
            PipelineMissing: A node has no compiled pipeline in the session
            DeviceLost: The device failed during submission
        """
        ops_per_pass = 1 if timed else (ops_per_pass or self.config.ops_per_pass)
        passes_per_submit = passes_per_submit or self.config.passes_per_submit
        if ops_per_pass < 1 or passes_per_submit < 1:
            raise ValueError("ops_per_pass and passes_per_submit must be positive")

        session = self.session(graph, plan)
        device, arena = self.device, self.arena
        precise = device.caps.timestamps
        if timed and not precise:
            passes_per_submit = 1
        stats = ExecutionStats(coarse=timed and not precise)
        allocations0, waits0, timings0 = device.allocations, arena.waits, len(device.timings)
        started = time.perf_counter()

        encoder = None
        ops_in_pass = 0

        def flush() -> None:
            nonlocal encoder, ops_in_pass
            if encoder is None:
                return
            if ops_in_pass:
                encoder.end_pass()
            submitted = time.perf_counter()
            try:
                fence = device.submit(encoder)
            except DeviceLost:
                arena.discard_staged()
                raise
            arena.attach(fence)
            if stats.coarse:
                fence.wait()
                stats.timings.append(PassTiming(last_tag, time.perf_counter() - submitted))
            stats.submissions += 1
            stats.passes += encoder.passes
            stats.dispatches += encoder.dispatches
            encoder, ops_in_pass = None, 0

        last_tag = 'other'
        for step in session.steps:
            values = session.step_values(step)
            if session.runtime.cache.get(step.kernel.key) is None:
                raise PipelineMissing(f"No pipeline for {step.kernel.key.label}")
            if arena.needs_flush():
                flush()
                stats.flushes += 1
            _, offset = arena.write(layout_for(step.kernel.key.op).pack(values))
            if encoder is None:
                encoder = device.encoder(timed=timed)
            if ops_in_pass == 0:
                encoder.begin_pass()
            last_tag = step.node.category
            encoder.dispatch(step.kernel, arena.buffer, offset, step.bindings,
                             step.kernel.geometry.grid(**values), tag=last_tag)
            ops_in_pass += 1
            if ops_in_pass == ops_per_pass:
                encoder.end_pass()
                ops_in_pass = 0
                if encoder.passes == passes_per_submit:
                    flush()
        flush()

        stats.wall_seconds = time.perf_counter() - started
        stats.allocations = device.allocations - allocations0
        stats.arena_waits = arena.waits - waits0
        if timed and precise:
            stats.timings = device.timings[timings0:]
        consumed = {name for node in graph.nodes for name in node.inputs}
        outputs = {node.output: TensorHandle(graph.name, node.output, graph.tensors[node.output], session)
                   for node in graph.nodes if node.output not in consumed}
        logger.debug(f"Executed {graph.name}: {stats.dispatches} dispatches, {stats.passes} passes, "
                     f"{stats.submissions} submissions")
        return ExecutionResult(outputs, stats)

    def readback_async(self, handle: TensorHandle) -> Future:
        """Map-read a tensor; the future resolves to its f32 values."""
        location = handle.session.location(handle.name)
        desc = handle.session.graph.tensors[handle.session.graph.storage_root(handle.name)]
        raw = self.device.read_buffer_async(location.buffer, location.offset, desc.nbytes)
        decoded: Future = Future()

        def done(f: Future) -> None:
            try:
                decoded.set_result(dequantize_tensor(f.result(), desc))
            except Exception as e:
                decoded.set_exception(e)

        raw.add_done_callback(done)
        return decoded

    def readback(self, handle: Union[TensorHandle, Tuple[OpGraph, str]]) -> np.ndarray:
        if isinstance(handle, tuple):
            handle = self.handle(*handle)
        return self.readback_async(handle).result()

    def read_bytes(self, graph: OpGraph, name: str) -> bytes:
        """Raw device bytes of a tensor's storage."""
        location = self.handle(graph, name).session.location(name)
        return self.device.read_buffer(location.buffer, location.offset, graph.tensors[graph.storage_root(name)].nbytes)

    def close(self) -> None:
        self.device.close()
