"""
Static memory planner.

Intermediate tensors share one arena buffer. Live intervals come from the
graph's topological order (definition index to last-use index, graph
outputs live to the end); offsets are assigned greedily, first fit, lowest
offset first. External tensors, KV caches and the flash partials buffer are
sized here too so a session can allocate everything before the first run.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from quantkern.errors import ExceedsDeviceLimit
from quantkern.kernels.types import MAX_SPLITS, OpKind
from quantkern.runtime.graph import OpGraph

# Configure module logger
logger = logging.getLogger(__name__)

PLAN_ALIGNMENT = 256


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


@dataclass
class MemoryPlan:
    """
    Static buffer assignment for one graph.

    Attributes:
        order: Node names in execution order
        total_bytes: Size of the intermediate arena buffer
        offsets: Byte offset of every intermediate storage root
        sizes: Aligned byte size of every intermediate storage root
        intervals: Live interval (first, last) per storage root
        external_bytes: Size of every external tensor buffer
        kv_bytes: Sizes of the KV cache buffers (subset of external_bytes)
        partials_bytes: Flash split partials buffer size
        alignment: Offset alignment
    """

    order: Tuple[str, ...]
    total_bytes: int
    offsets: Dict[str, int]
    sizes: Dict[str, int]
    intervals: Dict[str, Tuple[int, int]]
    external_bytes: Dict[str, int] = field(default_factory=dict)
    kv_bytes: Dict[str, int] = field(default_factory=dict)
    partials_bytes: int = 0
    alignment: int = PLAN_ALIGNMENT

    def conflicts(self) -> List[Tuple[str, str]]:
        """Pairs of roots whose intervals and byte ranges both overlap (empty for a sound plan)."""
        found = []
        names = sorted(self.offsets)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                (a0, a1), (b0, b1) = self.intervals[a], self.intervals[b]
                if a1 < b0 or b1 < a0:
                    continue
                if self.offsets[a] < self.offsets[b] + self.sizes[b] and self.offsets[b] < self.offsets[a] + self.sizes[a]:
                    found.append((a, b))
        return found

    def describe(self) -> Dict[str, int]:
        return {
            'nodes': len(self.order),
            'intermediates': len(self.offsets),
            'arena_bytes': self.total_bytes,
            'unshared_bytes': sum(self.sizes.values()),
            'external_bytes': sum(self.external_bytes.values()),
            'kv_bytes': sum(self.kv_bytes.values()),
            'partials_bytes': self.partials_bytes,
        }


def live_intervals(graph: OpGraph) -> Tuple[List[str], Dict[str, Tuple[int, int]]]:
    """
    Live interval of every intermediate storage root, in definition order.

    Returns:
        (roots in definition order, {root: (first index, last index)})
    """
    order = graph.topological_order()
    consumed = {name for node in order for name in node.inputs}
    end = len(order) - 1
    roots: List[str] = []
    intervals: Dict[str, Tuple[int, int]] = {}

    def touch(root: str, index: int) -> None:
        first, last = intervals[root]
        intervals[root] = (min(first, index), max(last, index))

    for index, node in enumerate(order):
        root = graph.storage_root(node.output)
        if root in graph.external:
            pass
        elif root not in intervals:
            roots.append(root)
            intervals[root] = (index, index)
        else:
            touch(root, index)
        for name in node.inputs:
            src = graph.storage_root(name)
            if src in intervals:
                touch(src, index)
        if node.output not in consumed and root in intervals:
            touch(root, end)
    return roots, intervals


def _first_fit(size: int, busy: List[Tuple[int, int]], alignment: int) -> int:
    offset = 0
    for start, length in sorted(busy):
        if offset + size <= start:
            break
        offset = max(offset, align_up(start + length, alignment))
    return offset


def plan_memory(
    graph: OpGraph,
    max_buffer_size: Optional[int] = None,
    alignment: int = PLAN_ALIGNMENT,
    max_splits: int = MAX_SPLITS,
) -> MemoryPlan:
    """
    Assign offsets to every intermediate tensor of ``graph``.

    Args:
        graph: Op graph
        max_buffer_size: Device limit for any single buffer
        alignment: Offset and size alignment (storage offset alignment)
        max_splits: Largest flash_decode split count the tuner may choose

    Returns:
        The memory plan

    Raises:
        ExceedsDeviceLimit: The arena, or any single buffer, exceeds the limit
        CyclicGraph: The graph has no topological order
    """
    order = graph.topological_order()
    roots, intervals = live_intervals(graph)

    offsets: Dict[str, int] = {}
    sizes: Dict[str, int] = {}
    for root in roots:
        size = align_up(max(graph.tensors[root].nbytes, 4), alignment)
        first, last = intervals[root]
        busy = [(offsets[o], sizes[o]) for o in offsets
                if not (intervals[o][1] < first or last < intervals[o][0])]
        offsets[root] = _first_fit(size, busy, alignment)
        sizes[root] = size
    total = max((offsets[r] + sizes[r] for r in roots), default=0)

    external = {name: graph.tensors[name].nbytes for name in graph.external}
    kv = {name: nbytes for name, nbytes in external.items() if graph.external[name]}
    partials = 0
    for node in order:
        if node.op == OpKind.FLASH_DECODE:
            heads, head_dim = graph.tensors[node.inputs[1]].shape[-2:]
            partials = max(partials, heads * max_splits * (head_dim + 2) * 4)

    if max_buffer_size is not None:
        largest = max([total, partials] + list(external.values()))
        if largest > max_buffer_size:
            raise ExceedsDeviceLimit(largest, max_buffer_size)

    plan = MemoryPlan(
        order=tuple(node.name for node in order),
        total_bytes=total,
        offsets=offsets,
        sizes=sizes,
        intervals=intervals,
        external_bytes=external,
        kv_bytes=kv,
        partials_bytes=partials,
        alignment=alignment,
    )
    logger.info(f"Planned {graph.name}: arena {total} bytes for {len(roots)} tensors "
                f"(unshared {sum(sizes.values())}), partials {partials} bytes")
    return plan
