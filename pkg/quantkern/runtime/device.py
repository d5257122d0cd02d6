"""
Device layer: buffers, pipelines, command recording, fences and readback.

Two implementations share one interface:

- ``WgpuDevice`` drives a real WebGPU adapter through wgpu-py.
- ``HostDevice`` keeps buffers in host memory and executes the host
  emulation of each kernel at submission time. It still lints every
  generated shader and decodes kernel parameters from the arena buffer, so
  the whole runtime path is exercised without a GPU.

Every device counts buffer allocations so the runtime can prove that steady
state execution allocates nothing.
"""
import logging
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from quantkern.errors import (
    BindingOutOfRange,
    CompileError,
    DeviceLost,
    FeatureUnavailable,
    MapFailed,
    NoAdapter,
)
from quantkern.kernels.host import run_host_kernel
from quantkern.kernels.library import binding_modes
from quantkern.kernels.params import LAYOUTS, layout_for
from quantkern.kernels.types import CompiledKernel
from quantkern.runtime.caps import DeviceCaps

try:
    import wgpu
except ImportError:  # host backend only
    wgpu = None

# Configure module logger
logger = logging.getLogger(__name__)

STORAGE = 'storage'
UNIFORM = 'uniform'

MAX_TIMED_PASSES = 256

_NAGA_LINE_RE = re.compile(r'wgsl:(\d+):\d+')


def align4(n: int) -> int:
    return (n + 3) & ~3


class Fence:
    """
    Completion signal of one queue submission.

    ``waiter`` is called by ``wait`` when the fence has not resolved yet; it
    must eventually resolve the fence. Resolution may happen on any thread.
    """

    def __init__(self, serial: int, waiter: Optional[Callable[['Fence'], None]] = None):
        self.serial = serial
        self._event = threading.Event()
        self._waiter = waiter

    @property
    def resolved(self) -> bool:
        return self._event.is_set()

    def resolve(self) -> None:
        self._event.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        if not self._event.is_set() and self._waiter is not None:
            self._waiter(self)
        return self._event.wait(timeout)

    def __repr__(self) -> str:
        return f"Fence({self.serial}, resolved={self.resolved})"


@dataclass(frozen=True)
class Binding:
    """A byte range of a buffer bound to one shader binding."""

    buffer: Any
    offset: int
    size: int


@dataclass
class PassTiming:
    """Measured duration of one compute pass or dispatch."""

    tag: str
    seconds: float


@dataclass
class _RecordedPass:
    dispatches: List[Tuple[CompiledKernel, Any, int, Tuple[Binding, ...], Tuple[int, int, int], str]] = field(
        default_factory=list)


class CommandEncoder(ABC):
    """Records compute passes for one queue submission."""

    def __init__(self, timed: bool = False):
        self.timed = timed
        self.passes = 0
        self.dispatches = 0
        self._open = False

    def begin_pass(self) -> None:
        if self._open:
            raise RuntimeError("Compute pass already open")
        self._open = True
        self.passes += 1
        self._begin_pass()

    def end_pass(self) -> None:
        if not self._open:
            raise RuntimeError("No compute pass open")
        self._open = False
        self._end_pass()

    def dispatch(
        self,
        kernel: CompiledKernel,
        params_buffer: Any,
        params_offset: int,
        bindings: Sequence[Binding],
        grid: Tuple[int, int, int],
        tag: str = 'other',
    ) -> None:
        if not self._open:
            raise RuntimeError("Dispatch outside a compute pass")
        self.dispatches += 1
        self._dispatch(kernel, params_buffer, params_offset, tuple(bindings), grid, tag)

    @abstractmethod
    def _begin_pass(self) -> None:
        ...

    @abstractmethod
    def _end_pass(self) -> None:
        ...

    @abstractmethod
    def _dispatch(self, kernel, params_buffer, params_offset, bindings, grid, tag) -> None:
        ...


class Device(ABC):
    """
    Common device interface.

    Attributes:
        caps: Negotiated capabilities
        allocations: Number of buffers created so far
        allocated_bytes: Bytes of buffers created so far
        timings: Durations recorded by timed submissions
    """

    backend = 'abstract'

    def __init__(self, caps: DeviceCaps):
        self.caps = caps
        self.allocations = 0
        self.allocated_bytes = 0
        self.timings: List[PassTiming] = []
        self._serial = 0
        self._lock = threading.Lock()

    def create_buffer(self, nbytes: int, label: str = '', usage: str = STORAGE) -> Any:
        """Allocate a device buffer, padded to a multiple of four bytes."""
        size = align4(max(nbytes, 4))
        if size > self.caps.max_buffer_size:
            raise MapFailed(f"Buffer {label!r} of {size} bytes exceeds device max {self.caps.max_buffer_size}")
        buffer = self._allocate(size, label, usage)
        with self._lock:
            self.allocations += 1
            self.allocated_bytes += size
        logger.debug(f"Allocated {usage} buffer {label!r}: {size} bytes")
        return buffer

    def _next_serial(self) -> int:
        with self._lock:
            self._serial += 1
            return self._serial

    def check_bindings(self, kernel: CompiledKernel, bindings: Sequence[Binding]) -> None:
        """Bounds and alignment checks applied in validation mode."""
        if len(bindings) != len(kernel.bindings):
            raise BindingOutOfRange(f"{kernel.key.label} has {len(kernel.bindings)} bindings, got {len(bindings)}")
        for i, b in enumerate(bindings):
            if b.offset % self.caps.storage_offset_alignment:
                raise BindingOutOfRange(f"{kernel.key.label} binding {i + 1}: offset {b.offset} is misaligned")
            if b.offset + b.size > b.buffer.size or b.size <= 0:
                raise BindingOutOfRange(
                    f"{kernel.key.label} binding {i + 1}: [{b.offset}, {b.offset + b.size}) outside buffer of {b.buffer.size}"
                )

    @abstractmethod
    def _allocate(self, size: int, label: str, usage: str) -> Any:
        ...

    @abstractmethod
    def write_buffer(self, buffer: Any, offset: int, data) -> None:
        ...

    @abstractmethod
    def create_pipeline(self, source: str, label: str = '', origins: Sequence[str] = ()) -> Any:
        ...

    @abstractmethod
    def encoder(self, timed: bool = False) -> CommandEncoder:
        ...

    @abstractmethod
    def submit(self, encoder: CommandEncoder) -> Fence:
        ...

    @abstractmethod
    def read_buffer_async(self, buffer: Any, offset: int, size: int) -> Future:
        ...

    def read_buffer(self, buffer: Any, offset: int, size: int) -> bytes:
        return self.read_buffer_async(buffer, offset, size).result()

    def wait_idle(self) -> None:
        pass

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Host device
# ---------------------------------------------------------------------------

class HostBuffer:
    """Host-memory buffer."""

    def __init__(self, size: int, label: str = '', usage: str = STORAGE):
        self.data = np.zeros(size, dtype=np.uint8)
        self.label = label
        self.usage = usage

    @property
    def size(self) -> int:
        return self.data.size


@dataclass(frozen=True)
class HostPipeline:
    label: str
    source: str


_PAIRS = {')': '(', ']': '[', '}': '{'}


def lint_source(source: str, origins: Sequence[str] = ()) -> None:
    """
    Structural checks standing in for a shader compiler on the host device.

    Raises:
        CompileError: With the origin of the offending line
    """
    def where(lineno: int) -> List[str]:
        return [origins[lineno - 1]] if 0 < lineno <= len(origins) else [f"line {lineno}"]

    stack: List[Tuple[str, int]] = []
    for lineno, line in enumerate(source.splitlines(), start=1):
        code = line.split('//', 1)[0]
        if code.lstrip().startswith('#') or '{{' in code:
            raise CompileError("unexpanded template text", where(lineno))
        for ch in code:
            if ch in '([{':
                stack.append((ch, lineno))
            elif ch in _PAIRS:
                if not stack or stack[-1][0] != _PAIRS[ch]:
                    raise CompileError(f"unbalanced '{ch}'", where(lineno))
                stack.pop()
    if stack:
        ch, lineno = stack[-1]
        raise CompileError(f"'{ch}' is never closed", where(lineno))
    if '@compute' not in source or 'fn main' not in source:
        raise CompileError("no @compute entry point named main", list(origins[:1]))


class HostEncoder(CommandEncoder):
    def __init__(self, timed: bool = False):
        super().__init__(timed)
        self.recorded: List[_RecordedPass] = []

    def _begin_pass(self) -> None:
        self.recorded.append(_RecordedPass())

    def _end_pass(self) -> None:
        pass

    def _dispatch(self, kernel, params_buffer, params_offset, bindings, grid, tag) -> None:
        self.recorded[-1].dispatches.append((kernel, params_buffer, params_offset, bindings, grid, tag))


class HostDevice(Device):
    """
    Device executing the host emulation of each kernel.

    Submissions run synchronously, so every returned fence is resolved.
    """

    backend = 'host'

    def __init__(self, caps: Optional[DeviceCaps] = None):
        super().__init__(caps or DeviceCaps(adapter_name='host emulation', backend='host', timestamps=True))
        self._reader = ThreadPoolExecutor(max_workers=1, thread_name_prefix='host-readback')

    def _allocate(self, size: int, label: str, usage: str) -> HostBuffer:
        return HostBuffer(size, label, usage)

    def write_buffer(self, buffer: HostBuffer, offset: int, data) -> None:
        raw = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data.view(np.uint8).reshape(-1)
        if offset + raw.size > buffer.size:
            raise MapFailed(f"Write [{offset}, {offset + raw.size}) outside buffer {buffer.label!r} of {buffer.size}")
        buffer.data[offset:offset + raw.size] = raw

    def create_pipeline(self, source: str, label: str = '', origins: Sequence[str] = ()) -> HostPipeline:
        lint_source(source, origins)
        return HostPipeline(label, source)

    def encoder(self, timed: bool = False) -> HostEncoder:
        return HostEncoder(timed)

    def submit(self, encoder: HostEncoder) -> Fence:
        fence = Fence(self._next_serial())
        for recorded in encoder.recorded:
            for kernel, params_buffer, params_offset, bindings, grid, tag in recorded.dispatches:
                self._run(kernel, params_buffer, params_offset, bindings, grid, tag, encoder.timed)
        fence.resolve()
        return fence

    def _run(self, kernel, params_buffer, params_offset, bindings, grid, tag, timed) -> None:
        if self.caps.validation:
            self.check_bindings(kernel, bindings)
            if max(grid) > self.caps.max_workgroups_per_dim:
                raise BindingOutOfRange(f"{kernel.key.label}: grid {grid} exceeds the dispatch limit")
        layout = layout_for(kernel.key.op)
        values = layout.unpack(params_buffer.data[params_offset:params_offset + layout.size].tobytes())
        views = [b.buffer.data[b.offset:b.offset + b.size] for b in bindings]
        start = time.perf_counter()
        try:
            run_host_kernel(kernel.key, values, views)
        except (ValueError, IndexError) as e:
            raise DeviceLost(f"Host kernel {kernel.key.label} failed: {e}") from e
        if timed:
            self.timings.append(PassTiming(tag, time.perf_counter() - start))

    def read_buffer_async(self, buffer: HostBuffer, offset: int, size: int) -> Future:
        if offset < 0 or offset + size > buffer.size:
            future: Future = Future()
            future.set_exception(MapFailed(f"Read [{offset}, {offset + size}) outside buffer {buffer.label!r}"))
            return future
        return self._reader.submit(lambda: buffer.data[offset:offset + size].tobytes())

    def close(self) -> None:
        self._reader.shutdown(wait=True)


# ---------------------------------------------------------------------------
# wgpu device
# ---------------------------------------------------------------------------

def _limit(limits: Dict[str, int], name: str, default: int) -> int:
    for key in (name, name.replace('-', '_')):
        if key in limits:
            return int(limits[key])
    return default


def _has_subgroups(features) -> bool:
    return any(f in features for f in ('subgroup', 'subgroups'))


@dataclass(frozen=True)
class WgpuPipeline:
    pipeline: Any
    layout: Any
    bindings: Tuple[str, ...]


class WgpuEncoder(CommandEncoder):
    def __init__(self, device: 'WgpuDevice', timed: bool = False):
        super().__init__(timed)
        self.device = device
        self.raw = device.device.create_command_encoder()
        self.tags: List[str] = []
        self._pass = None
        self._bind_groups: List[Any] = []

    def _begin_pass(self) -> None:
        kwargs = {}
        if self.timed and self.device.query_set is not None and len(self.tags) < MAX_TIMED_PASSES:
            index = 2 * len(self.tags)
            kwargs['timestamp_writes'] = {
                'query_set': self.device.query_set,
                'beginning_of_pass_write_index': index,
                'end_of_pass_write_index': index + 1,
            }
            self.tags.append('other')
        self._pass = self.raw.begin_compute_pass(**kwargs)

    def _end_pass(self) -> None:
        self._pass.end()
        self._pass = None

    def _dispatch(self, kernel, params_buffer, params_offset, bindings, grid, tag) -> None:
        if self.device.caps.validation:
            self.device.check_bindings(kernel, bindings)
        pipeline: WgpuPipeline = kernel.pipeline
        entries = [{'binding': 0, 'resource': {'buffer': params_buffer, 'offset': 0,
                                                'size': self.device.param_binding_size}}]
        for i, b in enumerate(bindings, start=1):
            entries.append({'binding': i, 'resource': {'buffer': b.buffer, 'offset': b.offset, 'size': b.size}})
        bind_group = self.device.device.create_bind_group(layout=pipeline.layout, entries=entries)
        self._bind_groups.append(bind_group)
        self._pass.set_pipeline(pipeline.pipeline)
        self._pass.set_bind_group(0, bind_group, [params_offset])
        self._pass.dispatch_workgroups(*grid)
        if self.timed and self.tags:
            self.tags[-1] = tag

    def finish(self):
        if self.timed and self.tags:
            count = 2 * len(self.tags)
            self.raw.resolve_query_set(self.device.query_set, 0, count, self.device.query_buffer, 0)
        return self.raw.finish()


class WgpuDevice(Device):
    """
    WebGPU device through wgpu-py.

    Args:
        adapter: wgpu adapter
        device: wgpu device created with the negotiated features
        caps: Negotiated capabilities
    """

    backend = 'wgpu'

    def __init__(self, adapter, device, caps: DeviceCaps):
        super().__init__(caps)
        self.adapter = adapter
        self.device = device
        self.queue = device.queue
        self.param_binding_size = max(layout.size for layout in LAYOUTS.values())
        self._pending: List[Fence] = []
        self._readback = None
        self._reader = ThreadPoolExecutor(max_workers=1, thread_name_prefix='wgpu-readback')
        self.query_set = None
        self.query_buffer = None
        if caps.timestamps:
            self.query_set = device.create_query_set(type=wgpu.QueryType.timestamp, count=2 * MAX_TIMED_PASSES)
            self.query_buffer = device.create_buffer(
                size=16 * MAX_TIMED_PASSES, usage=wgpu.BufferUsage.QUERY_RESOLVE | wgpu.BufferUsage.COPY_SRC)

    def _allocate(self, size: int, label: str, usage: str):
        if usage == UNIFORM:
            flags = wgpu.BufferUsage.UNIFORM | wgpu.BufferUsage.COPY_DST
        else:
            flags = wgpu.BufferUsage.STORAGE | wgpu.BufferUsage.COPY_DST | wgpu.BufferUsage.COPY_SRC
        return self.device.create_buffer(size=size, usage=flags, label=label)

    def write_buffer(self, buffer, offset: int, data) -> None:
        raw = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data.view(np.uint8).reshape(-1)
        pad = (-raw.size) % 4
        if pad:
            raw = np.concatenate([raw, np.zeros(pad, dtype=np.uint8)])
        self.queue.write_buffer(buffer, offset, raw)

    def create_pipeline(self, source: str, label: str = '', origins: Sequence[str] = ()) -> WgpuPipeline:
        bindings = binding_modes(source)
        stage = wgpu.ShaderStage.COMPUTE
        entries = [{'binding': 0, 'visibility': stage,
                    'buffer': {'type': wgpu.BufferBindingType.uniform, 'has_dynamic_offset': True}}]
        # inputs and outputs of one dispatch often share the intermediates buffer; a usage
        # scope may not mix read-only and writable storage of one buffer, so every binding
        # is declared writable in the layout (read-only shader access stays valid)
        for i, _mode in enumerate(bindings, start=1):
            entries.append({'binding': i, 'visibility': stage, 'buffer': {'type': wgpu.BufferBindingType.storage}})
        try:
            module = self.device.create_shader_module(code=source, label=label)
            layout = self.device.create_bind_group_layout(entries=entries)
            pipeline = self.device.create_compute_pipeline(
                layout=self.device.create_pipeline_layout(bind_group_layouts=[layout]),
                compute={'module': module, 'entry_point': 'main'},
                label=label,
            )
        except Exception as e:
            message = str(e)
            lines = [int(n) for n in _NAGA_LINE_RE.findall(message)]
            where = [origins[n - 1] for n in lines if 0 < n <= len(origins)]
            raise CompileError(message, where) from e
        return WgpuPipeline(pipeline, layout, bindings)

    def encoder(self, timed: bool = False) -> WgpuEncoder:
        return WgpuEncoder(self, timed and self.query_set is not None)

    def _drain(self, _fence: Optional[Fence] = None) -> None:
        """Block until the queue is idle and resolve every outstanding fence."""
        with self._lock:
            pending, self._pending = self._pending, []
        try:
            done = getattr(self.queue, 'on_submitted_work_done_sync', None)
            if done is not None:
                done()
            else:
                self.device._poll_wait()
        except Exception as e:
            raise DeviceLost(f"Waiting for the queue failed: {e}") from e
        for fence in pending:
            fence.resolve()

    def submit(self, encoder: WgpuEncoder) -> Fence:
        fence = Fence(self._next_serial(), waiter=self._drain)
        try:
            self.queue.submit([encoder.finish()])
        except Exception as e:
            raise DeviceLost(f"Queue submission failed: {e}") from e
        with self._lock:
            self._pending.append(fence)
        if encoder.timed and encoder.tags:
            self._collect_timings(encoder.tags)
        return fence

    def _collect_timings(self, tags: List[str]) -> None:
        raw = self.queue.read_buffer(self.query_buffer, 0, 16 * len(tags))
        ticks = np.frombuffer(raw, dtype=np.uint64).reshape(-1, 2)
        for tag, (begin, end) in zip(tags, ticks):
            self.timings.append(PassTiming(tag, max(int(end) - int(begin), 0) * 1e-9))

    def _staging(self, size: int):
        if self._readback is None or self._readback.size < size:
            grown = max(size, 2 * (self._readback.size if self._readback is not None else 0))
            self._readback = self.device.create_buffer(
                size=align4(grown), usage=wgpu.BufferUsage.MAP_READ | wgpu.BufferUsage.COPY_DST, label='readback')
            with self._lock:
                self.allocations += 1
                self.allocated_bytes += align4(grown)
        return self._readback

    def _read(self, buffer, offset: int, size: int) -> bytes:
        staging = self._staging(align4(size))
        encoder = self.device.create_command_encoder()
        encoder.copy_buffer_to_buffer(buffer, offset, staging, 0, align4(size))
        self.queue.submit([encoder.finish()])
        try:
            staging.map_sync(wgpu.MapMode.READ, 0, align4(size))
            data = bytes(staging.read_mapped(0, align4(size)))[:size]
        except Exception as e:
            raise MapFailed(f"Mapping readback buffer failed: {e}") from e
        finally:
            if getattr(staging, 'map_state', 'unmapped') == 'mapped':
                staging.unmap()
        self._drain()
        return data

    def read_buffer_async(self, buffer, offset: int, size: int) -> Future:
        if offset % 4 or offset + size > buffer.size:
            future: Future = Future()
            future.set_exception(MapFailed(f"Read [{offset}, {offset + size}) invalid for buffer of {buffer.size}"))
            return future
        return self._reader.submit(self._read, buffer, offset, size)

    def wait_idle(self) -> None:
        self._drain()

    def close(self) -> None:
        self._reader.shutdown(wait=True)


def _wgpu_caps(adapter, enabled: Sequence[str], validation: bool) -> DeviceCaps:
    limits = dict(adapter.limits)
    info = dict(getattr(adapter, 'info', {}) or {})
    name = info.get('device') or info.get('description') or 'wgpu adapter'
    subgroups = _has_subgroups(enabled)
    return DeviceCaps(
        adapter_name=str(name),
        backend=f"wgpu/{info.get('backend_type', 'unknown')}",
        max_workgroup_size=_limit(limits, 'max-compute-invocations-per-workgroup', 256),
        max_workgroup_size_x=_limit(limits, 'max-compute-workgroup-size-x', 256),
        shared_memory_bytes=_limit(limits, 'max-compute-workgroup-storage-size', 16384),
        subgroups=subgroups,
        subgroup_min_size=_limit(limits, 'min-subgroup-size', 4) if subgroups else 0,
        subgroup_max_size=_limit(limits, 'max-subgroup-size', 128) if subgroups else 0,
        f16='shader-f16' in enabled,
        timestamps='timestamp-query' in enabled,
        sg_matrix=False,
        max_buffer_size=_limit(limits, 'max-buffer-size', 1 << 28),
        max_storage_binding_size=_limit(limits, 'max-storage-buffer-binding-size', 1 << 27),
        uniform_offset_alignment=_limit(limits, 'min-uniform-buffer-offset-alignment', 256),
        storage_offset_alignment=_limit(limits, 'min-storage-buffer-offset-alignment', 256),
        max_workgroups_per_dim=_limit(limits, 'max-compute-workgroups-per-dimension', 65535),
        validation=validation,
    )


def _init_wgpu(request_f16: bool, request_subgroups: bool, request_timestamps: bool,
               validation: bool, power_preference: str) -> WgpuDevice:
    if wgpu is None:
        raise NoAdapter("wgpu is not installed")
    try:
        adapter = wgpu.gpu.request_adapter_sync(power_preference=power_preference)
    except Exception as e:
        raise NoAdapter(f"No WebGPU adapter: {e}") from e
    if adapter is None:
        raise NoAdapter("No WebGPU adapter available")

    features = set(adapter.features)
    wanted = []
    for requested, names in ((request_f16, ('shader-f16',)),
                             (request_subgroups, ('subgroup', 'subgroups')),
                             (request_timestamps, ('timestamp-query',))):
        if not requested:
            continue
        present = [n for n in names if n in features]
        if not present:
            raise FeatureUnavailable(names[0])
        wanted.append(present[0])

    limits = dict(adapter.limits)
    required_limits = {
        key: limits[key] for key in (
            'max-compute-workgroup-storage-size', 'max-buffer-size', 'max-storage-buffer-binding-size',
            'max-compute-invocations-per-workgroup',
        ) if key in limits
    }
    device = adapter.request_device_sync(required_features=wanted, required_limits=required_limits)
    caps = _wgpu_caps(adapter, wanted, validation)
    logger.info(f"Initialized wgpu device {caps.adapter_name} ({caps.backend}), features {wanted or 'baseline'}")
    return WgpuDevice(adapter, device, caps)


def init_device(
    backend: str = 'auto',
    request_f16: bool = False,
    request_subgroups: bool = False,
    request_timestamps: bool = False,
    validation: bool = False,
    power_preference: str = 'high-performance',
) -> Device:
    """
    Acquire a device and negotiate its capabilities.

    Args:
        backend: ``wgpu``, ``host`` or ``auto`` (wgpu, host fallback when no adapter exists)
        request_f16: Require shader-f16
        request_subgroups: Require subgroup operations
        request_timestamps: Require timestamp queries
        validation: Enable validation checks on every dispatch
        power_preference: wgpu adapter preference

    Returns:
        The device; ``device.caps`` holds the negotiated capabilities

    Raises:
        NoAdapter: ``wgpu`` backend requested and no adapter exists
        FeatureUnavailable: A requested feature is missing
    """
    if backend in ('wgpu', 'auto'):
        try:
            return _init_wgpu(request_f16, request_subgroups, request_timestamps, validation, power_preference)
        except NoAdapter as e:
            if backend == 'wgpu':
                raise
            logger.warning(f"{e}; falling back to host emulation")

    caps = DeviceCaps(adapter_name='host emulation', backend='host', timestamps=True, validation=validation)
    if request_f16:
        raise FeatureUnavailable('shader-f16')
    if request_subgroups:
        raise FeatureUnavailable('subgroups')
    logger.info("Initialized host emulation device")
    return HostDevice(caps)
