"""
Shared fixtures: seeded random generators and runtimes on the host and wgpu backends.
"""
import numpy as np
import pytest

from quantkern.errors import NoAdapter
from quantkern.runtime.config import RuntimeConfig
from quantkern.runtime.executor import Runtime


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def host_config():
    return RuntimeConfig(backend='host')


@pytest.fixture
def host_runtime(host_config):
    runtime = Runtime(host_config)
    yield runtime
    runtime.close()


@pytest.fixture(scope='session')
def wgpu_runtime():
    """Runtime on a real adapter; tests using it are skipped without one."""
    try:
        runtime = Runtime(RuntimeConfig(backend='wgpu'))
    except NoAdapter as e:
        pytest.skip(f"No WebGPU adapter: {e}")
    yield runtime
    runtime.close()


@pytest.fixture(params=['host', 'wgpu'])
def any_runtime(request):
    """Parametrized over both backends."""
    if request.param == 'host':
        runtime = Runtime(RuntimeConfig(backend='host'))
        yield runtime
        runtime.close()
    else:
        yield request.getfixturevalue('wgpu_runtime')
