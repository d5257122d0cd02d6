"""
Tests for the GGUF reader, writer and tensor streamer.
"""
import io

import numpy as np
import pytest

from quantkern.errors import (
    BadMagic,
    BadTensorInfo,
    DuplicateTensorName,
    GgufError,
    ShortRead,
    SinkWriteFailed,
    SizeMismatch,
    TruncatedHeader,
    UnsupportedVersion,
)
from quantkern.gguf.model import GgufModel, TensorInfo
from quantkern.gguf.reader import read_gguf_file, read_header, read_tensor_bytes
from quantkern.gguf.streamer import MemorySink, StagingAllocator, load_model_tensors, stream_tensor
from quantkern.gguf.writer import layout_tensors, normalize_metadata, write_gguf, write_gguf_file
from quantkern.quant.formats import BlockFormat
from quantkern.quant.tensor import quantize_tensor
from quantkern.runtime.device import init_device

MIB = 1 << 20


def _payload(rng, info: TensorInfo) -> bytes:
    return rng.integers(0, 256, info.nbytes, dtype=np.uint8).tobytes()


def _fixture(rng, n_tensors: int):
    shapes = [((1, 32), BlockFormat.Q4_0), ((4, 256), BlockFormat.Q6_K), ((3, 5), BlockFormat.F32)]
    tensors = []
    for i, (shape, fmt) in enumerate(shapes[:n_tensors]):
        info = TensorInfo.from_shape(f"blk.{i}.weight", shape, fmt)
        tensors.append((info, _payload(rng, info)))
    metadata = {
        'general.architecture': 'micro',
        'micro.block_count': 2,
        'micro.rope.freq_base': 10000.0,
        'tokenizer.tokens': ['a', 'b', 'c'],
        'general.quantized': True,
    }
    return metadata, tensors


@pytest.mark.parametrize('n_tensors', [0, 1, 3])
def test_write_read_write_is_a_fixpoint(rng, n_tensors):
    metadata, tensors = _fixture(rng, n_tensors)
    first = write_gguf(metadata, tensors)
    model = read_header(io.BytesIO(first))

    expected = GgufModel(metadata=normalize_metadata(metadata), tensors=layout_tensors([t for t, _ in tensors]))
    assert model.index_equals(expected)

    stream = io.BytesIO(first)
    reread = [(info, read_tensor_bytes(stream, model, info)) for info in model.tensors]
    assert [payload for _, payload in reread] == [payload for _, payload in tensors]
    assert write_gguf(model.metadata, reread) == first


def test_single_q4_0_tensor_index():
    payload, _ = quantize_tensor(np.zeros((1, 32)), BlockFormat.Q4_0)
    data = write_gguf({}, [(TensorInfo.from_shape('t', (1, 32), BlockFormat.Q4_0), payload)])
    model = read_header(io.BytesIO(data))
    info = model.tensor('t')
    assert info.dims == (32, 1)
    assert info.format == BlockFormat.Q4_0
    assert info.offset == 0
    assert info.nbytes == 18
    assert model.data_start % model.alignment == 0


def test_custom_alignment_places_offsets(rng):
    infos = [TensorInfo.from_shape('a', (1, 32), BlockFormat.Q8_0), TensorInfo.from_shape('b', (1, 32), BlockFormat.Q8_0)]
    data = write_gguf({'general.alignment': 64}, [(i, _payload(rng, i)) for i in infos])
    model = read_header(io.BytesIO(data))
    assert model.alignment == 64
    assert [t.offset for t in model.tensors] == [0, 64]


def test_bad_magic():
    with pytest.raises(BadMagic):
        read_header(io.BytesIO(b'GGUX' + bytes(20)))


def test_unsupported_version():
    data = bytearray(write_gguf({}, []))
    data[4:8] = (2).to_bytes(4, 'little')
    with pytest.raises(UnsupportedVersion):
        read_header(io.BytesIO(bytes(data)))


def test_truncated_header(rng):
    metadata, tensors = _fixture(rng, 1)
    data = write_gguf(metadata, tensors)
    with pytest.raises(TruncatedHeader):
        read_header(io.BytesIO(data[:40]))


def test_duplicate_tensor_names(rng):
    info = TensorInfo.from_shape('w', (1, 32), BlockFormat.Q8_0)
    data = write_gguf({}, [(info, _payload(rng, info)), (info, _payload(rng, info))])
    with pytest.raises(DuplicateTensorName):
        read_header(io.BytesIO(data))


def _single_q8_0_file() -> bytearray:
    info = TensorInfo.from_shape('t', (1, 32), BlockFormat.Q8_0)
    return bytearray(write_gguf({}, [(info, bytes(info.nbytes))]))


# header (24) + name (8 + 1) + n_dims (4) put dims at 37 and the type id at 53
@pytest.mark.parametrize("start, end, value", [
    (53, 57, 99),
    (37, 45, 31),
], ids=["unknown-type-id", "partial-block-row"])
def test_bad_tensor_entry_is_a_gguf_error(start, end, value):
    data = _single_q8_0_file()
    data[start:end] = value.to_bytes(end - start, 'little')
    with pytest.raises(BadTensorInfo) as info:
        read_header(io.BytesIO(bytes(data)))
    assert isinstance(info.value, GgufError)
    assert "'t'" in str(info.value)


def test_writer_rejects_wrong_payload_size():
    with pytest.raises(SizeMismatch):
        write_gguf({}, [(TensorInfo.from_shape('w', (1, 32), BlockFormat.Q8_0), bytes(33))])


def test_file_shorter_than_its_index(tmp_path, rng):
    metadata, tensors = _fixture(rng, 2)
    path = tmp_path / 'short.gguf'
    path.write_bytes(write_gguf(metadata, tensors)[:-10])
    with pytest.raises(SizeMismatch):
        read_gguf_file(str(path))


def test_stream_single_small_chunk(rng):
    info = TensorInfo.from_shape('t', (1, 32), BlockFormat.Q4_0)
    payload = _payload(rng, info)
    data = write_gguf({}, [(info, payload)])
    model = read_header(io.BytesIO(data))
    with MemorySink(info.nbytes) as sink:
        stats = stream_tensor(io.BytesIO(data), model.tensors[0], sink, data_start=model.data_start)
    assert stats.chunks == 1
    assert bytes(sink.data) == payload


def test_stream_8_mib_tensor_peak_staging(rng):
    info = TensorInfo.from_shape('big', (2048, 1024), BlockFormat.F32)
    assert info.nbytes == 8 * MIB
    payload = _payload(rng, info)
    data = write_gguf({}, [(info, payload)])
    model = read_header(io.BytesIO(data))

    allocator = StagingAllocator()
    with MemorySink(info.nbytes, workers=4) as sink:
        stats = stream_tensor(io.BytesIO(data), model.tensors[0], sink, data_start=model.data_start,
                              chunk_bytes=MIB, in_flight=4, allocator=allocator)
    assert stats.chunks == 8
    assert sink.writes == 8
    assert allocator.peak_bytes <= 4 * MIB
    assert allocator.live_bytes == 0
    assert bytes(sink.data) == payload


@pytest.mark.parametrize('chunk_kib,in_flight', [(64, 1), (64, 3), (128, 2), (1024, 4)])
def test_stream_matches_one_shot_copy(rng, chunk_kib, in_flight):
    info = TensorInfo.from_shape('w', (600, 1024), BlockFormat.Q8_0)
    data = write_gguf({}, [(info, _payload(rng, info))])
    model = read_header(io.BytesIO(data))
    expected = read_tensor_bytes(io.BytesIO(data), model, model.tensors[0])

    allocator = StagingAllocator()
    with MemorySink(info.nbytes) as sink:
        stream_tensor(io.BytesIO(data), model.tensors[0], sink, data_start=model.data_start,
                      chunk_bytes=chunk_kib << 10, in_flight=in_flight, allocator=allocator)
    assert bytes(sink.data) == expected
    assert allocator.peak_bytes <= in_flight * (chunk_kib << 10)


def test_stream_zero_capacity_sink_fails_before_reading(rng):
    info = TensorInfo.from_shape('t', (1, 32), BlockFormat.Q4_0)
    stream = io.BytesIO(write_gguf({}, [(info, _payload(rng, info))]))
    stream.seek(5)
    with MemorySink(0) as sink:
        with pytest.raises(SinkWriteFailed):
            stream_tensor(stream, info, sink, data_start=0)
    assert stream.tell() == 5


def test_stream_short_file(rng):
    info = TensorInfo.from_shape('t', (64, 256), BlockFormat.F32)
    data = write_gguf({}, [(info, _payload(rng, info))])
    model = read_header(io.BytesIO(data))
    with MemorySink(info.nbytes) as sink:
        with pytest.raises(ShortRead):
            stream_tensor(io.BytesIO(data[:-100]), model.tensors[0], sink, data_start=model.data_start,
                          chunk_bytes=64 << 10)


def test_chunk_size_floor(rng):
    info = TensorInfo.from_shape('t', (1, 32), BlockFormat.Q4_0)
    with MemorySink(info.nbytes) as sink:
        with pytest.raises(ValueError):
            stream_tensor(io.BytesIO(bytes(64)), info, sink, data_start=0, chunk_bytes=1024)


def test_load_model_tensors_into_device_buffers(tmp_path, rng):
    metadata, tensors = _fixture(rng, 3)
    path = tmp_path / 'model.gguf'
    write_gguf_file(str(path), metadata, tensors)

    device = init_device('host')
    model, loaded = load_model_tensors(str(path), device, chunk_bytes=64 << 10, in_flight=2)
    assert model.tensor_names() == [info.name for info, _ in tensors]
    for info, payload in tensors:
        buffer, desc = loaded[info.name]
        assert desc.shape == info.shape
        assert device.read_buffer(buffer, 0, len(payload)) == payload
