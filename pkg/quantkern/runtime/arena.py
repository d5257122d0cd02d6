"""
Rotating parameter arena.

All kernel parameters live in one uniform buffer allocated at startup and
divided into fixed-size slots. Each dispatch takes the slot under the
cursor; the slot is attached to the fence of the submission that reads it
and is not rewritten until that fence resolves.
"""
import logging
import threading
from typing import List, Optional, Set, Tuple

from quantkern.errors import ParamsTooLarge, WouldBlock
from quantkern.runtime.device import UNIFORM, Device, Fence

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_SLOT_BYTES = 256
DEFAULT_SLOT_COUNT = 128


def _round_up(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


class ParamArena:
    """
    Fenced ring of parameter slots in one device buffer.

    A slot is in one of three states: free (no fence or a resolved fence),
    staged (written for a submission that has not been made yet) or in
    flight (attached to an unresolved fence).

    Args:
        device: Device owning the buffer
        slot_bytes: Slot size, rounded up to the uniform offset alignment
        slot_count: Number of slots
        blocking: Wait for in-flight slots instead of raising WouldBlock
    """

    def __init__(
        self,
        device: Device,
        slot_bytes: int = DEFAULT_SLOT_BYTES,
        slot_count: int = DEFAULT_SLOT_COUNT,
        blocking: bool = True,
    ):
        if slot_count < 1:
            raise ValueError(f"slot_count must be positive, got {slot_count}")
        self.device = device
        self.slot_bytes = _round_up(max(slot_bytes, 16), device.caps.uniform_offset_alignment)
        self.slot_count = slot_count
        self.blocking = blocking
        self.buffer = device.create_buffer(self.slot_bytes * slot_count, label='param-arena', usage=UNIFORM)
        self.cursor = 0
        self.writes = 0
        self.waits = 0
        self._fences: List[Optional[Fence]] = [None] * slot_count
        self._staged: Set[int] = set()
        self._lock = threading.Lock()
        logger.info(f"Parameter arena: {slot_count} slots of {self.slot_bytes} bytes")

    @property
    def size(self) -> int:
        return self.slot_bytes * self.slot_count

    def needs_flush(self) -> bool:
        """True when the next write would land on a slot staged for the pending submission."""
        with self._lock:
            return self.cursor in self._staged

    def in_flight(self, slot: int) -> bool:
        fence = self._fences[slot]
        return fence is not None and not fence.resolved

    def write(self, data: bytes, block: Optional[bool] = None) -> Tuple[int, int]:
        """
        Stage parameter bytes in the slot under the cursor.

        Args:
            data: Packed parameters
            block: Override the arena's blocking mode for this write

        Returns:
            (slot index, dynamic byte offset)

        Raises:
            ParamsTooLarge: ``data`` does not fit a slot
            WouldBlock: The slot is still in flight (non-blocking) or staged for
                the pending submission
        """
        if len(data) > self.slot_bytes:
            raise ParamsTooLarge(f"{len(data)} parameter bytes exceed the {self.slot_bytes}-byte slot")
        block = self.blocking if block is None else block

        with self._lock:
            slot = self.cursor
            if slot in self._staged:
                raise WouldBlock(f"Slot {slot} is staged for a submission that has not been made")
            fence = self._fences[slot]

        if fence is not None and not fence.resolved:
            if not block:
                raise WouldBlock(f"Slot {slot} is still read by submission {fence.serial}")
            self.waits += 1
            logger.debug(f"Waiting on fence {fence.serial} for slot {slot}")
            fence.wait()

        offset = slot * self.slot_bytes
        self.device.write_buffer(self.buffer, offset, data)
        with self._lock:
            self._fences[slot] = None
            self._staged.add(slot)
            self.cursor = (slot + 1) % self.slot_count
            self.writes += 1
        return slot, offset

    def attach(self, fence: Fence) -> int:
        """Associate every staged slot with the submission's fence; returns the slot count."""
        with self._lock:
            staged = sorted(self._staged)
            for slot in staged:
                self._fences[slot] = fence
            self._staged.clear()
        return len(staged)

    def discard_staged(self) -> None:
        """Forget staged slots after a failed submission."""
        with self._lock:
            self._staged.clear()
