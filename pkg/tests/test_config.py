"""
Tests for configuration loading and host device initialization.
"""
import pytest

from quantkern.errors import ConfigError, FeatureUnavailable
from quantkern.kernels.types import OpKind, TuningParams
from quantkern.runtime.config import RuntimeConfig, load_config, parse_config
from quantkern.runtime.device import HostDevice, init_device


def test_defaults():
    config = RuntimeConfig()
    assert (config.slot_bytes, config.slot_count) == (256, 128)
    assert (config.ops_per_pass, config.passes_per_submit) == (32, 2)
    assert config.backend == 'auto'
    assert config.tuning_for(OpKind.MATVEC) == TuningParams()


def test_parse_config():
    config = parse_config(
        "# local settings\n"
        "backend = host\n"
        "slot_count = 0x40\n"
        "force_portable = yes   # no subgroups\n"
        "matvec.WG_SIZE = 64\n"
        "flash_decode.SPLITS = 4\n"
    )
    assert config.backend == 'host'
    assert config.slot_count == 64
    assert config.force_portable
    assert config.tuning_for(OpKind.MATVEC).WG_SIZE == 64
    assert config.tuning_for(OpKind.FLASH_DECODE).SPLITS == 4
    assert config.tuning_for(OpKind.MATMUL) == TuningParams()


@pytest.mark.parametrize('text', [
    "slot_count\n",
    "colour = blue\n",
    "slot_count = many\n",
    "validation = maybe\n",
    "matvec.TILE_Q = 4\n",
    "convolution.WG_SIZE = 64\n",
    "backend = cuda\n",
    "ops_per_pass = 0\n",
])
def test_invalid_config(text):
    with pytest.raises(ConfigError):
        parse_config(text, origin='bad.conf')


def test_error_names_the_line():
    with pytest.raises(ConfigError, match='bad.conf:2'):
        parse_config("backend = host\nnonsense\n", origin='bad.conf')


def test_environment_overrides_file(tmp_path, monkeypatch):
    path = tmp_path / 'quantkern.conf'
    path.write_text("backend = wgpu\npasses_per_submit = 3\n", encoding='utf-8')
    monkeypatch.setenv('QUANTKERN_BACKEND', 'host')
    monkeypatch.setenv('QUANTKERN_VALIDATION', 'true')
    monkeypatch.delenv('QUANTKERN_FORCE_PORTABLE', raising=False)

    config = load_config(str(path))
    assert config.backend == 'host'
    assert config.validation
    assert config.passes_per_submit == 3
    assert load_config(str(path), use_env=False).backend == 'wgpu'


def test_config_path_from_environment(tmp_path, monkeypatch):
    path = tmp_path / 'env.conf'
    path.write_text("slot_count = 16\n", encoding='utf-8')
    monkeypatch.setenv('QUANTKERN_CONFIG', str(path))
    assert load_config(use_env=False).slot_count == 16


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.conf'))


def test_host_device_caps():
    device = init_device('host', validation=True)
    assert isinstance(device, HostDevice)
    assert device.caps.adapter_name == 'host emulation'
    assert device.caps.validation
    assert not device.caps.subgroups
    device.close()


def test_host_device_rejects_unavailable_features():
    with pytest.raises(FeatureUnavailable):
        init_device('host', request_f16=True)
    with pytest.raises(FeatureUnavailable):
        init_device('host', request_subgroups=True)


def test_host_buffers_pad_to_four_bytes():
    device = HostDevice()
    buffer = device.create_buffer(5, label='odd')
    assert buffer.size == 8
    device.write_buffer(buffer, 0, b'abcde')
    assert device.read_buffer(buffer, 0, 5) == b'abcde'
    assert device.allocations == 1
    device.close()
