"""
Op graph: tensor-producing nodes over named tensors.

Edges are implied by tensor names. External tensors (weights, KV caches,
inputs) are declared up front and live in their own buffers; every other
tensor is produced by exactly one node. A node may write into the storage
of an existing tensor (``alias_of``), which covers in-place ops and stores
into the KV cache.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import networkx as nx

from quantkern.errors import CyclicGraph, ShapeMismatch
from quantkern.kernels.types import ElementwiseKind, OpContext, OpKind
from quantkern.quant.tensor import TensorDesc

# Configure module logger
logger = logging.getLogger(__name__)


@dataclass
class Node:
    """
    One op in the graph.

    Attributes:
        name: Unique node name
        op: Op kind
        inputs: Input tensor names in operand order
        output: Output tensor name
        scalars: Scalar kernel parameters (eps, theta_base, seq_len, ...)
        elementwise: Kind for elementwise nodes
        causal: Causal masking for flash_tile
        in_place: The output aliases the first input
        alias_of: Tensor whose storage the output occupies
    """

    name: str
    op: OpKind
    inputs: Tuple[str, ...]
    output: str
    scalars: Dict[str, float] = field(default_factory=dict)
    elementwise: Optional[ElementwiseKind] = None
    causal: bool = False
    in_place: bool = False
    alias_of: Optional[str] = None

    @property
    def category(self) -> str:
        return self.op.category


class OpGraph:
    """DAG of tensor ops with a deterministic topological order."""

    def __init__(self, name: str = 'graph'):
        self.name = name
        self.tensors: Dict[str, TensorDesc] = {}
        self.external: Dict[str, bool] = {}
        self.nodes: List[Node] = []
        self._producer: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def add_external(self, name: str, desc: TensorDesc, kv: bool = False) -> str:
        """Declare an externally provided tensor; ``kv`` marks a KV cache."""
        if name in self.tensors:
            raise ValueError(f"Tensor {name!r} already exists")
        self.tensors[name] = desc
        self.external[name] = kv
        return name

    def add_node(
        self,
        op: OpKind,
        inputs: Iterable[str],
        output: str,
        desc: TensorDesc,
        name: Optional[str] = None,
        scalars: Optional[Dict[str, float]] = None,
        elementwise: Optional[ElementwiseKind] = None,
        causal: bool = False,
        in_place: bool = False,
        alias_of: Optional[str] = None,
    ) -> Node:
        """
        Append a node producing tensor ``output``.

        Inputs may name tensors produced by later nodes; ordering is resolved
        by ``topological_order``.
        """
        if output in self.tensors:
            raise ValueError(f"Tensor {output!r} already exists")
        inputs = tuple(inputs)
        if in_place:
            alias_of = inputs[0]
        node = Node(
            name=name or f"{op}_{len(self.nodes)}",
            op=op,
            inputs=inputs,
            output=output,
            scalars=dict(scalars or {}),
            elementwise=elementwise,
            causal=causal,
            in_place=in_place,
            alias_of=alias_of,
        )
        self.tensors[output] = desc
        self._producer[output] = len(self.nodes)
        self.nodes.append(node)
        return node

    def node(self, name: str) -> Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def producer(self, tensor: str) -> Optional[Node]:
        index = self._producer.get(tensor)
        return None if index is None else self.nodes[index]

    def storage_root(self, tensor: str) -> str:
        """Follow aliases to the tensor that owns the storage."""
        seen = set()
        while True:
            node = self.producer(tensor)
            if node is None or node.alias_of is None:
                return tensor
            if tensor in seen:
                raise CyclicGraph(f"Alias cycle through {tensor!r}")
            seen.add(tensor)
            tensor = node.alias_of

    def validate(self) -> None:
        for node in self.nodes:
            for name in node.inputs + ((node.alias_of,) if node.alias_of else ()):
                if name not in self.tensors:
                    raise ShapeMismatch(f"Node {node.name!r} reads undeclared tensor {name!r}")

    def dependency_graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.nodes)))
        for i, node in enumerate(self.nodes):
            for name in node.inputs + ((node.alias_of,) if node.alias_of else ()):
                j = self._producer.get(name)
                if j is not None and j != i:
                    g.add_edge(j, i)
        return g

    def topological_order(self) -> List[Node]:
        """
        Topological order; ties go to the node added first.

        Raises:
            CyclicGraph: The graph has a cycle
        """
        self.validate()
        g = self.dependency_graph()
        try:
            order = list(nx.lexicographical_topological_sort(g))
        except nx.NetworkXUnfeasible:
            cycle = nx.find_cycle(g)
            names = [self.nodes[a].name for a, _ in cycle]
            raise CyclicGraph(f"Graph {self.name!r} has a cycle through {names}") from None
        return [self.nodes[i] for i in order]

    def context(self, node: Node, caps, force_portable: bool = False) -> OpContext:
        """Kernel-library context for one node."""
        return OpContext(
            op=node.op,
            operands=tuple(self.tensors[name] for name in node.inputs),
            output=self.tensors[node.output],
            caps=caps,
            in_place=node.in_place,
            elementwise=node.elementwise,
            causal=node.causal,
            force_portable=force_portable,
        )
