"""
Chunked tensor streaming from a GGUF file into device buffers.

Payloads are moved through a small, fixed pool of host staging buffers
(four 1 MiB buffers by default). A staging buffer is refilled only after
the sink write that last used it has completed, so the host never holds
more than ``in_flight * chunk_bytes`` of tensor data at once.
"""
import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import BinaryIO, Dict, List, Optional, Protocol, Tuple

from quantkern.errors import ShortRead, SinkWriteFailed
from quantkern.gguf.model import GgufModel, TensorInfo
from quantkern.gguf.reader import read_header
from quantkern.quant.tensor import TensorDesc

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_CHUNK_BYTES = 1 << 20
DEFAULT_IN_FLIGHT = 4
MIN_CHUNK_BYTES = 64 << 10


class TensorSink(Protocol):
    """Write target for streamed payloads."""

    @property
    def capacity(self) -> int:
        ...

    def write_async(self, offset: int, data: memoryview) -> Future:
        """Start a write; the staging memory behind ``data`` is reused once the future completes."""
        ...


class StagingAllocator:
    """
    Instrumented host staging allocator.

    Tracks live and peak bytes so tests can assert the streaming bound.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0
        self.allocations = 0

    def allocate(self, nbytes: int) -> bytearray:
        with self._lock:
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self.allocations += 1
        return bytearray(nbytes)

    def release(self, buffer: bytearray) -> None:
        with self._lock:
            self.live_bytes -= len(buffer)


class MemorySink:
    """
    Host-memory sink with asynchronous writes on a worker pool.

    Args:
        capacity: Size of the target region in bytes
        workers: Number of writer threads
    """

    def __init__(self, capacity: int, workers: int = 2):
        self.data = bytearray(capacity)
        self.writes = 0
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix='memory-sink')

    @property
    def capacity(self) -> int:
        return len(self.data)

    def _copy(self, offset: int, chunk: memoryview) -> int:
        end = offset + len(chunk)
        if end > len(self.data):
            raise SinkWriteFailed(f"Write [{offset}, {end}) exceeds sink capacity {len(self.data)}")
        self.data[offset:end] = chunk
        self.writes += 1
        return len(chunk)

    def write_async(self, offset: int, data: memoryview) -> Future:
        return self._pool.submit(self._copy, offset, data)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self) -> 'MemorySink':
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class BufferSink:
    """
    Sink writing into a device buffer through the device's queue.

    Queue writes copy the source bytes at call time, so each future is
    already complete when returned.
    """

    def __init__(self, device, buffer, base_offset: int = 0):
        self.device = device
        self.buffer = buffer
        self.base_offset = base_offset
        self.writes = 0

    @property
    def capacity(self) -> int:
        return self.buffer.size - self.base_offset

    def write_async(self, offset: int, data: memoryview) -> Future:
        future: Future = Future()
        try:
            self.device.write_buffer(self.buffer, self.base_offset + offset, data)
            self.writes += 1
            future.set_result(len(data))
        except Exception as e:
            future.set_exception(SinkWriteFailed(f"Device write at {offset} failed: {e}"))
        return future


@dataclass
class StreamStats:
    """Outcome of one streamed tensor."""

    bytes_written: int
    chunks: int
    peak_staging_bytes: int


def _wait(future: Future) -> None:
    try:
        future.result()
    except SinkWriteFailed:
        raise
    except Exception as e:
        raise SinkWriteFailed(f"Sink write failed: {e}") from e


def stream_tensor(
    stream: BinaryIO,
    info: TensorInfo,
    sink: TensorSink,
    *,
    data_start: int,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    in_flight: int = DEFAULT_IN_FLIGHT,
    allocator: Optional[StagingAllocator] = None,
) -> StreamStats:
    """
    Stream one tensor payload into a sink.

    Args:
        stream: Seekable binary stream of the GGUF file
        info: Tensor to stream
        sink: Write target with at least ``info.nbytes`` capacity
        data_start: Absolute file offset of the data region
        chunk_bytes: Staging buffer size, at least 64 KiB
        in_flight: Number of staging buffers, at least one
        allocator: Optional instrumented allocator

    Returns:
        StreamStats for the transfer
    """
    if chunk_bytes < MIN_CHUNK_BYTES:
        raise ValueError(f"chunk_bytes must be at least {MIN_CHUNK_BYTES}, got {chunk_bytes}")
    if in_flight < 1:
        raise ValueError(f"in_flight must be at least 1, got {in_flight}")

    total = info.nbytes
    if sink.capacity < total:
        raise SinkWriteFailed(f"Sink holds {sink.capacity} bytes, tensor {info.name!r} needs {total}")

    allocator = allocator or StagingAllocator()
    staging_len = min(chunk_bytes, total)
    slots: List[Optional[Tuple[bytearray, Optional[Future]]]] = [None] * in_flight
    stream.seek(data_start + info.offset)

    done = 0
    chunks = 0
    try:
        while done < total:
            index = chunks % in_flight
            if slots[index] is None:
                slots[index] = (allocator.allocate(staging_len), None)
            buffer, pending = slots[index]
            if pending is not None:
                _wait(pending)

            n = min(staging_len, total - done)
            view = memoryview(buffer)[:n]
            got = stream.readinto(view)
            if got is None or got < n:
                raise ShortRead(f"Tensor {info.name!r}: file ended after {done + (got or 0)} of {total} bytes")

            slots[index] = (buffer, sink.write_async(done, view))
            done += n
            chunks += 1
            logger.debug(f"Streamed chunk {chunks} of {info.name!r} ({n} bytes)")

        for slot in slots:
            if slot is not None and slot[1] is not None:
                _wait(slot[1])
    finally:
        for slot in slots:
            if slot is not None:
                if slot[1] is not None:
                    slot[1].exception()
                allocator.release(slot[0])

    return StreamStats(bytes_written=done, chunks=chunks, peak_staging_bytes=allocator.peak_bytes)


def load_model_tensors(
    path: str,
    device,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    in_flight: int = DEFAULT_IN_FLIGHT,
) -> Tuple[GgufModel, Dict[str, Tuple[object, TensorDesc]]]:
    """
    Stream every tensor of a GGUF file into its own device buffer.

    Args:
        path: GGUF file path
        device: Device providing ``create_buffer`` and ``write_buffer``
        chunk_bytes: Staging buffer size
        in_flight: Number of staging buffers

    Returns:
        The parsed header and a map from tensor name to (buffer, TensorDesc)
    """
    loaded: Dict[str, Tuple[object, TensorDesc]] = {}
    allocator = StagingAllocator()
    with open(path, 'rb') as f:
        model = read_header(f)
        for info in model.tensors:
            buffer = device.create_buffer(info.nbytes, label=info.name)
            stream_tensor(f, info, BufferSink(device, buffer), data_start=model.data_start,
                          chunk_bytes=chunk_bytes, in_flight=in_flight, allocator=allocator)
            loaded[info.name] = (buffer, TensorDesc(shape=info.shape, format=info.format))
    logger.info(f"Loaded {len(loaded)} tensors from {path}, peak staging {allocator.peak_bytes} bytes")
    return model, loaded
