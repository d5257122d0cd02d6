"""
Adapter diagnostic: acquire a device, print its capabilities and run one small
matvec against the CPU oracle.
"""
import sys
import time
import logging
from dataclasses import replace
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from quantkern.errors import FeatureUnavailable, NoAdapter, QuantKernError
from quantkern.kernels import oracle
from quantkern.kernels.types import OpKind
from quantkern.quant.formats import BlockFormat
from quantkern.quant.metrics import NMSE_F32, nmse
from quantkern.quant.tensor import TensorDesc, roundtrip_tensor
from quantkern.runtime.config import load_config
from quantkern.runtime.executor import Runtime
from quantkern.runtime.graph import OpGraph
from quantkern.utils.logger import configure_root_logger

# Configure logging
configure_root_logger()
logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()


class DeviceProbe:
    """Class to acquire a device and exercise it once."""

    def __init__(self, backend: Optional[str] = None):
        """
        Initialize the probe.

        Args:
            backend: ``wgpu``, ``host`` or ``auto``; the configured backend when omitted
        """
        self.config = load_config()
        if backend:
            self.config = replace(self.config, backend=backend)
        self.runtime = None

        logger.info("Device parameters:")
        logger.info(f"  Backend: {self.config.backend}")
        logger.info(f"  Request f16: {self.config.request_f16}")
        logger.info(f"  Request subgroups: {self.config.request_subgroups}")
        logger.info(f"  Request timestamps: {self.config.request_timestamps}")
        logger.info(f"  Force portable kernels: {self.config.force_portable}")

    def connect(self) -> bool:
        """
        Acquire the device.

        Returns:
            True if a device was created, False otherwise
        """
        try:
            start_time = time.time()
            self.runtime = Runtime(self.config)
            logger.info(f"Device acquired in {time.time() - start_time:.2f} seconds")
            for key, value in self.runtime.caps.as_dict().items():
                logger.info(f"  {key}: {value}")
            return True
        except NoAdapter as e:
            logger.error(f"No adapter: {e}")
            logger.error("Possible reasons:")
            logger.error("  - No GPU driver with Vulkan, Metal or D3D12 support")
            logger.error("  - Running in a container without GPU access")
            logger.error("  - Set QUANTKERN_BACKEND=host to use host emulation")
        except FeatureUnavailable as e:
            logger.error(f"{e}")
            logger.error("Drop the request_* setting for this feature from the config file")
        except QuantKernError as e:
            logger.error(f"Error creating device: {e}")
        return False

    def smoke_test(self, rows: int = 64, cols: int = 256) -> bool:
        """
        Run one Q8_0 matvec and compare it with the CPU oracle.

        Returns:
            True if the result is within the f32 threshold
        """
        if self.runtime is None:
            return False
        rng = np.random.default_rng(0)
        weights = rng.standard_normal((rows, cols)).astype(np.float32)
        x = rng.standard_normal(cols).astype(np.float32)

        graph = OpGraph('smoke')
        graph.add_external('w', TensorDesc((rows, cols), BlockFormat.Q8_0))
        graph.add_external('x', TensorDesc((cols,)))
        graph.add_node(OpKind.MATVEC, ['w', 'x'], 'y', TensorDesc((rows,)))
        try:
            start_time = time.time()
            self.runtime.upload(graph, {'w': weights, 'x': x})
            stats = self.runtime.execute(graph).stats
            got = self.runtime.readback((graph, 'y'))
            error = nmse(oracle.matvec(roundtrip_tensor(weights, BlockFormat.Q8_0), x), got)
            logger.info(f"Matvec ran in {time.time() - start_time:.3f} seconds "
                        f"({stats.dispatches} dispatch, {stats.submissions} submission), NMSE {error:.3e}")
            return error <= NMSE_F32
        except QuantKernError as e:
            logger.error(f"Smoke test failed: {e}")
            return False
        finally:
            self.runtime.close()


def check_device(backend: Optional[str] = None) -> bool:
    """
    Acquire a device and run the smoke test.

    Returns:
        True if both steps succeeded
    """
    print("\n=== Device Check ===\n")
    probe = DeviceProbe(backend)

    connected = probe.connect()
    print(f"Device: {'SUCCESS' if connected else 'FAILED'}")

    passed = connected and probe.smoke_test()
    print(f"Matvec smoke test: {'SUCCESS' if passed else 'FAILED'}")
    return passed


if __name__ == "__main__":
    success = check_device(sys.argv[1] if len(sys.argv) > 1 else None)
    # Exit with appropriate code
    sys.exit(0 if success else 1)
