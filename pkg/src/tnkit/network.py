"""
Nodes, edges and the tensor network that owns their memory.

Nodes never hold tensors directly. Each node stores an *address* into its
network's :class:`MemoryStore`; several nodes may point at the same address
(shared memory, e.g. uniform MPS cores stored once in a virtual node), and an
address may be a *view* into a slice of another one (the stacked parameter
buffers created by ``auto_stack`` and the unbound slices created by
``auto_unbind``).

Example
-------
>>> net = TensorNetwork()
>>> a = Node((2, 5, 2), ("left", "input", "right"), name="a", network=net, init_method="randn")
>>> b = Node((2, 5, 2), ("left", "input", "right"), name="b", network=net, init_method="randn")
>>> edge = a["right"] ^ b["left"]
>>> edge.size()
2
"""

from __future__ import annotations

import itertools
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import (Any, Dict, Iterable, Iterator, List, Optional, Sequence,
                    Tuple, Union)

import numpy as np

from tnkit import autodiff as ad
from tnkit import serialization
from tnkit import tensor_core as tc
from tnkit.autodiff import Variable

__all__ = [
    "Axis", "Edge", "StackEdge", "Node", "TensorNetwork", "MemoryStore",
    "FreedTensorError", "connect", "disconnect", "ROLES",
]

ROLES = ("leaf", "param", "data", "virtual", "resultant", "stack", "param_stack")
USER_ROLES = ("leaf", "param", "data", "virtual")
STACK_AXIS = "stack"

_node_ids = itertools.count()


class FreedTensorError(RuntimeError):
    """Raised when reading a tensor released after its last use in a traced pass."""


###############################################################################
#                                MEMORY STORE                                 #
###############################################################################
@dataclass
class _Slot:
    variable: Optional[Variable] = None
    base: Optional[int] = None    # address this slot is a view into
    index: Any = None             # position along axis 0 of the base
    nbytes: int = 0
    freed: bool = False


class MemoryStore:
    """
    Address -> tensor map with live-byte accounting.

    A slot either owns a :class:`Variable` or is a view ``base[index]`` of
    another slot. Views cost no bytes. ``peak_bytes`` is the high-water mark of
    ``live_bytes`` since the last :meth:`reset_peak`.
    """

    def __init__(self):
        self._slots: Dict[int, _Slot] = {}
        self._views: Dict[int, set] = defaultdict(set)
        self._ids = itertools.count()
        self.live_bytes = 0
        self.peak_bytes = 0

    def __len__(self) -> int:
        return len(self._slots)

    def __contains__(self, address: int) -> bool:
        return address in self._slots

    def addresses(self) -> List[int]:
        return list(self._slots)

    def allocate(self) -> int:
        address = next(self._ids)
        self._slots[address] = _Slot()
        return address

    def _account(self, delta: int) -> None:
        self.live_bytes += delta
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes

    def _detach(self, slot: _Slot, address: int) -> None:
        if slot.base is not None:
            self._views[slot.base].discard(address)
            if not self._views[slot.base]:
                del self._views[slot.base]
            slot.base = slot.index = None

    def set(self, address: int, variable: Variable) -> None:
        """Make ``address`` own ``variable`` (dropping any previous content)."""
        slot = self._slots[address]
        self._detach(slot, address)
        nbytes = variable.value.nbytes
        self._account(nbytes - slot.nbytes)
        slot.variable = variable
        slot.nbytes = nbytes
        slot.freed = False

    def set_view(self, address: int, base: int, index, variable: Optional[Variable] = None) -> None:
        """Make ``address`` a zero-byte view of ``base[index]``."""
        slot = self._slots[address]
        self._detach(slot, address)
        self._account(-slot.nbytes)
        slot.nbytes = 0
        slot.variable = variable
        slot.base, slot.index = base, index
        slot.freed = False
        self._views[base].add(address)

    def is_view(self, address: int) -> bool:
        return self._slots[address].base is not None

    def base_of(self, address: int) -> Optional[int]:
        return self._slots[address].base

    def index_of(self, address: int):
        return self._slots[address].index

    def root(self, address: int) -> int:
        while self._slots[address].base is not None:
            address = self._slots[address].base
        return address

    def views_of(self, address: int) -> List[int]:
        return sorted(self._views.get(address, ()))

    def has_value(self, address: int) -> bool:
        slot = self._slots.get(address)
        if slot is None or slot.freed:
            return False
        if slot.variable is not None:
            return True
        return slot.base is not None and self.has_value(slot.base)

    def get(self, address: int) -> Variable:
        slot = self._slots[address]
        if slot.freed:
            raise FreedTensorError(
                "tensor was released after its last use in a traced forward; "
                "run the next forward pass to refill it")
        if slot.variable is not None:
            return slot.variable
        if slot.base is None:
            raise ValueError("empty node: no tensor has been set")
        base = self.get(slot.base)
        if base.requires_grad and ad.is_grad_enabled():
            return ad.take(base, slot.index)
        return Variable(base.value[slot.index])

    def nbytes(self, address: int) -> int:
        return self._slots[address].nbytes

    def free(self, address: int) -> None:
        """Release the tensor (and every view onto it) without dropping the slot."""
        slot = self._slots[address]
        self._account(-slot.nbytes)
        slot.nbytes = 0
        slot.variable = None
        slot.freed = True
        for v in self.views_of(address):
            self.free(v)

    def release(self, address: int) -> None:
        """Remove the slot entirely."""
        slot = self._slots.pop(address)
        self._detach(slot, address)
        self._account(-slot.nbytes)


###############################################################################
#                                AXES AND EDGES                               #
###############################################################################
class Axis:
    """Named axis of a node; ``is_batch`` iff ``"batch"`` is in the name."""

    __slots__ = ("name", "num", "node")

    def __init__(self, name: str, num: int, node: "Node"):
        self.name = name
        self.num = num
        self.node = node

    @property
    def is_batch(self) -> bool:
        return "batch" in self.name

    @property
    def is_stack(self) -> bool:
        return self.name == STACK_AXIS and self.node.role in ("stack", "param_stack")

    def __repr__(self) -> str:
        return f"Axis({self.name!r}, {self.num})"


class Edge:
    """
    Link between ``(node1, axis1)`` and optionally ``(node2, axis2)``.

    An edge without a second endpoint is *dangling*. Resultant nodes inherit
    edge objects from their parents, so the same edge may appear in the edge
    list of several nodes; two nodes are connected when they share a connected
    edge object.
    """

    __slots__ = ("node1", "axis1", "node2", "axis2")

    def __init__(self, node1: "Node", axis1: int,
                 node2: Optional["Node"] = None, axis2: Optional[int] = None):
        self.node1, self.axis1 = node1, axis1
        self.node2, self.axis2 = node2, axis2

    def is_dangling(self) -> bool:
        return self.node2 is None

    def is_batch(self) -> bool:
        return self.node1.axes[self.axis1].is_batch

    def size(self) -> int:
        return self.node1.shape[self.axis1]

    @property
    def nodes(self) -> Tuple["Node", Optional["Node"]]:
        return self.node1, self.node2

    @property
    def axis_names(self) -> Tuple[str, Optional[str]]:
        second = self.node2.axes[self.axis2].name if self.node2 is not None else None
        return self.node1.axes[self.axis1].name, second

    def __xor__(self, other: "Edge") -> "Edge":
        return connect(self, other)

    def __or__(self, other: "Edge"):
        if other is not self:
            raise ValueError("disconnect takes the same edge on both sides")
        return disconnect(self)

    def disconnect(self):
        return disconnect(self)

    def __repr__(self) -> str:
        a = f"{self.node1.name}[{self.axis_names[0]}]"
        if self.is_dangling():
            return f"Edge({a})"
        return f"Edge({a} <-> {self.node2.name}[{self.axis_names[1]}])"


class StackEdge(Edge):
    """Edge of a stack node remembering the edges it was stacked from."""

    __slots__ = ("edges",)

    def __init__(self, edges: Sequence[Edge], node1: "Node", axis1: int,
                 node2: Optional["Node"] = None, axis2: Optional[int] = None):
        super().__init__(node1, axis1, node2, axis2)
        self.edges = list(edges)


def _as_edge(e) -> Edge:
    if isinstance(e, Edge):
        return e
    node, axis = e
    return node[axis]


def connect(edge1, edge2) -> Edge:
    """
    Connect two dangling edges (the ``^`` operator).

    Connecting nodes of two different networks moves every node of the second
    network into the first. Connecting an edge already joining the same pair
    of axes returns it unchanged.
    """
    edge1, edge2 = _as_edge(edge1), _as_edge(edge2)
    if edge1 is edge2 and not edge1.is_dangling():
        return edge1
    for e in (edge1, edge2):
        if not e.is_dangling():
            raise ValueError(f"{e!r} is already connected")
        if e.is_batch():
            raise ValueError(f"batch axis {e.axis_names[0]!r} cannot be connected")
    if edge1.size() != edge2.size():
        raise ValueError(f"cannot connect edges of sizes {edge1.size()} and {edge2.size()}")
    node1, node2 = edge1.node1, edge2.node1
    if node1 is node2 and edge1.axis1 == edge2.axis1:
        raise ValueError("cannot connect an axis to itself")

    stacked = isinstance(edge1, StackEdge), isinstance(edge2, StackEdge)
    if any(stacked):
        if not all(stacked):
            raise ValueError("a stack edge can only be connected to another stack edge")
        if (len(edge1.edges) != len(edge2.edges)
                or any(x is not y for x, y in zip(edge1.edges, edge2.edges))):
            raise ValueError("stack edges come from edges that are not pairwise connected")
        new = StackEdge(edge1.edges, node1, edge1.axis1, node2, edge2.axis1)
    else:
        new = Edge(node1, edge1.axis1, node2, edge2.axis1)

    net = node1.network
    if node2.network is not net:
        net._absorb(node2.network)
    net._replace_edge(edge1, new)
    net._replace_edge(edge2, new)
    return new


def disconnect(edge: Edge) -> Tuple[Edge, Edge]:
    """Split a connected edge back into two dangling edges."""
    if edge.is_dangling():
        raise ValueError("edge is already dangling")
    cls_args = (lambda n, a: (edge.edges, n, a)) if isinstance(edge, StackEdge) else (lambda n, a: (n, a))
    cls = type(edge)
    e1 = cls(*cls_args(edge.node1, edge.axis1))
    e2 = cls(*cls_args(edge.node2, edge.axis2))
    edge.node1._edges[edge.axis1] = e1
    edge.node2._edges[edge.axis2] = e2
    return e1, e2


###############################################################################
#                                    NODES                                    #
###############################################################################
class Node:
    """
    Named tensor container living in a :class:`TensorNetwork`.

    Parameters
    ----------
    shape : sequence of int, optional
        Shape of the node. Required unless ``tensor`` is given.
    axes_names : sequence of str, optional
        One name per axis; defaults to ``axis_0, axis_1, ...``.
    name : str, optional
        Node name, suffixed with ``_k`` on collision.
    network : TensorNetwork, optional
        Owning network; a fresh one is created if omitted.
    role : {"leaf", "param", "data", "virtual"}
        ``param`` nodes hold trainable tensors.
    init_method : {"zeros", "ones", "randn", "copy"}, optional
        How to fill the tensor. Without it (and without ``tensor``) the node is
        empty.
    tensor : array_like, optional
        Initial tensor (implies ``init_method="copy"``).
    """

    def __init__(self,
                 shape: Optional[Sequence[int]] = None,
                 axes_names: Optional[Sequence[str]] = None,
                 name: Optional[str] = None,
                 network: Optional["TensorNetwork"] = None,
                 role: str = "leaf",
                 init_method: Optional[str] = None,
                 tensor=None,
                 *,
                 std: float = 1.0,
                 rng=None,
                 _internal: bool = False):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if role not in USER_ROLES and not _internal:
            raise ValueError(f"nodes with role {role!r} are created by operations only")
        if tensor is not None:
            tensor = tc.as_tensor(tensor)
            if shape is not None and tuple(shape) != tensor.shape:
                raise ValueError(f"shape {tuple(shape)} does not match tensor {tensor.shape}")
            shape = tensor.shape
        if shape is None:
            raise ValueError("give either shape or tensor")
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"dimensions must be positive, got {shape}")
        if axes_names is None:
            axes_names = [f"axis_{i}" for i in range(len(shape))]
        axes_names = list(axes_names)
        if len(axes_names) != len(shape):
            raise ValueError(f"{len(axes_names)} axis names for a rank-{len(shape)} shape")
        if len(set(axes_names)) != len(axes_names):
            raise ValueError(f"duplicate axis names in {axes_names}")
        for n in axes_names:
            if not isinstance(n, str) or not n.isidentifier():
                raise ValueError(f"axis name {n!r} is not a valid identifier")

        self._id = next(_node_ids)
        self._role = role
        self._internal = _internal
        self._shape = shape
        self._axes = [Axis(n, i, self) for i, n in enumerate(axes_names)]
        self._edges: List[Edge] = [Edge(self, i) for i in range(len(shape))]
        self._address: Optional[int] = None
        self.successors: Dict[str, dict] = {}
        self._network: Optional[TensorNetwork] = None
        if network is None:
            network = TensorNetwork()
        network._register(self, name or ("node" if not _internal else role))

        if tensor is not None:
            init_method = "copy"
        if init_method is not None:
            self._network._assign_new(self, _initial_tensor(shape, init_method, tensor, std, rng))

    @classmethod
    def _resultant(cls, network: "TensorNetwork", name: str,
                   axes_names: Sequence[str], edges: Sequence[Edge],
                   shape: Sequence[int], role: str = "resultant") -> "Node":
        names = _dedupe(axes_names)
        node = cls(shape=shape, axes_names=names, name=name, network=network,
                   role=role, _internal=True)
        node._edges = list(edges)
        return node

    # ------------------------------------------------------------------ info
    @property
    def name(self) -> str:
        return self._name

    @name.setter
    def name(self, value: str) -> None:
        self._network._rename(self, value)

    @property
    def role(self) -> str:
        return self._role

    @property
    def network(self) -> "TensorNetwork":
        return self._network

    @property
    def axes(self) -> List[Axis]:
        return self._axes

    @property
    def axes_names(self) -> List[str]:
        return [ax.name for ax in self._axes]

    @property
    def edges(self) -> List[Edge]:
        return self._edges

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._shape

    @property
    def rank(self) -> int:
        return len(self._shape)

    @property
    def address(self) -> Optional[int]:
        return self._address

    @property
    def is_param(self) -> bool:
        return self._role in ("param", "param_stack")

    def is_empty(self) -> bool:
        return self._address is None or not self._network.memory.has_value(self._address)

    def is_view(self) -> bool:
        return self._address is not None and self._network.memory.is_view(self._address)

    def get_axis(self, key: Union[str, int]) -> Axis:
        if isinstance(key, (int, np.integer)):
            return self._axes[key]
        for ax in self._axes:
            if ax.name == key:
                return ax
        raise KeyError(f"node {self.name!r} has no axis {key!r}")

    def get_axis_num(self, key: Union[str, int]) -> int:
        return self.get_axis(key).num

    def __getitem__(self, key: Union[str, int]) -> Edge:
        return self._edges[self.get_axis_num(key)]

    def neighbours(self) -> List["Node"]:
        out = []
        for e in self._edges:
            if not e.is_dangling():
                other = e.node2 if e.node1 is self else e.node1
                if other is not self and other not in out:
                    out.append(other)
        return out

    def __repr__(self) -> str:
        return f"Node({self.name!r}, shape={self.shape}, role={self.role!r})"

    # ------------------------------------------------------------- tensors
    @property
    def variable(self) -> Variable:
        if self._address is None:
            raise ValueError(f"node {self.name!r} is empty")
        return self._network.memory.get(self._address)

    @property
    def tensor(self) -> np.ndarray:
        return self.variable.value

    @tensor.setter
    def tensor(self, value) -> None:
        self.set_tensor(value)

    def get_tensor(self) -> np.ndarray:
        return self.tensor

    def set_tensor(self, tensor) -> None:
        """Replace the tensor at this node's address (shared nodes see the change)."""
        self._network._set_tensor(self, tc.as_tensor(tensor))

    def set_tensor_from(self, source: "Node") -> None:
        """Point this node at ``source``'s memory address."""
        self._network._share(self, source)

    def parameterize(self, param: bool = True) -> "Node":
        self._network._parameterize(self, param)
        return self

    def __matmul__(self, other: "Node") -> "Node":
        from tnkit.operations import contract_between
        return contract_between(self, other)

    def __add__(self, other):
        from tnkit.operations import add
        return add(self, other)

    def __sub__(self, other):
        from tnkit.operations import sub
        return sub(self, other)

    def __mul__(self, other):
        from tnkit.operations import mul
        return mul(self, other)

    def __truediv__(self, other):
        from tnkit.operations import div
        return div(self, other)

    def __neg__(self):
        from tnkit.operations import mul
        return mul(self, -1.0)


def _initial_tensor(shape, method, tensor, std, rng) -> np.ndarray:
    if method == "zeros":
        return tc.zeros(shape)
    if method == "ones":
        return tc.ones(shape)
    if method == "randn":
        return tc.randn(shape, rng=rng, std=std)
    if method == "copy":
        if tensor is None:
            raise ValueError("init_method='copy' needs a tensor")
        return np.array(tensor, dtype=np.float64, order="C")
    raise ValueError(f"unknown init_method {method!r}")


def _dedupe(names: Sequence[str]) -> List[str]:
    out: List[str] = []
    seen = set(names)
    used: set = set()
    for n in names:
        if n not in used:
            out.append(n)
            used.add(n)
            continue
        k = 1
        while f"{n}_{k}" in used or f"{n}_{k}" in seen:
            k += 1
        out.append(f"{n}_{k}")
        used.add(f"{n}_{k}")
    return out


###############################################################################
#                                  NETWORK                                    #
###############################################################################
class TensorNetwork:
    """
    Registry of nodes sharing one memory store, operation cache and trace.

    Subclasses describe a model by overriding :meth:`contract` (and usually
    :meth:`set_data_nodes`); :meth:`forward` then loads the data, runs the
    contraction and returns the output tensor as a :class:`Variable`.

    Parameters
    ----------
    name : str
        Label of the network.
    auto_stack : bool
        Reuse stacked parameter buffers across calls instead of re-stacking.
    auto_unbind : bool
        Unbind stacks into zero-copy views instead of copies.
    """

    def __init__(self, name: str = "tensornetwork", auto_stack: bool = True,
                 auto_unbind: bool = False):
        self.name = name
        self.nodes: Dict[str, Node] = {}
        self.memory = MemoryStore()
        self.successors: Dict[tuple, Any] = {}
        self.data_nodes: Dict[str, Node] = {}
        self.trace_plan = None
        self._auto_stack = bool(auto_stack)
        self._auto_unbind = bool(auto_unbind)
        self._refs: Counter = Counter()
        self._name_hint: Dict[str, int] = {}
        self.nodes_created = 0
        self._tracing = False
        self._traced = False
        self._in_forward = False
        self._step = 0
        self._free_at: Dict[int, List[int]] = {}
        self._last_outputs: List[Node] = []
        self._data_buffer: Optional[Node] = None

    # ------------------------------------------------------------ settings
    @property
    def auto_stack(self) -> bool:
        return self._auto_stack

    @auto_stack.setter
    def auto_stack(self, value: bool) -> None:
        self.reset()
        self._auto_stack = bool(value)

    @property
    def auto_unbind(self) -> bool:
        return self._auto_unbind

    @auto_unbind.setter
    def auto_unbind(self, value: bool) -> None:
        self.reset()
        self._auto_unbind = bool(value)

    @property
    def traced(self) -> bool:
        return self._traced

    # ------------------------------------------------------- node registry
    def __getitem__(self, key: Union[str, int]) -> Node:
        if isinstance(key, (int, np.integer)):
            return list(self.nodes.values())[key]
        return self.nodes[key]

    def __contains__(self, node: Union[str, Node]) -> bool:
        if isinstance(node, Node):
            return self.nodes.get(node.name) is node
        return node in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def _free_name(self, base: str) -> str:
        if base not in self.nodes:
            return base
        k = self._name_hint.get(base, 1)
        # restart from 1 when earlier suffixes have been released
        if k > 1 and f"{base}_{k - 1}" not in self.nodes:
            k = 1
        while f"{base}_{k}" in self.nodes:
            k += 1
        self._name_hint[base] = k + 1
        return f"{base}_{k}"

    def _register(self, node: Node, name: str) -> None:
        node._name = self._free_name(name)
        node._network = self
        self.nodes[node._name] = node
        self.nodes_created += 1

    def _rename(self, node: Node, name: str) -> None:
        if name == node._name:
            return
        del self.nodes[node._name]
        node._name = self._free_name(name)
        self.nodes[node._name] = node

    def leaf_nodes(self) -> Dict[str, Node]:
        return {k: n for k, n in self.nodes.items() if n.role in ("leaf", "param")}

    def resultant_nodes(self) -> Dict[str, Node]:
        return {k: n for k, n in self.nodes.items()
                if n.role in ("resultant", "stack", "param_stack") or n._internal}

    def delete_node(self, node: Node) -> None:
        """Remove ``node``, disconnecting its edges. Resets the network first."""
        if node._network is not self:
            raise ValueError("node does not belong to this network")
        self.reset()
        for e in list(node.edges):
            if not e.is_dangling() and node in e.nodes:
                disconnect(e)
        self._drop_node(node)
        self.data_nodes.pop(node.name, None)

    def _drop_node(self, node: Node) -> None:
        self._point(node, None)
        del self.nodes[node._name]
        node.successors = {}

    # ----------------------------------------------------- memory plumbing
    def _point(self, node: Node, address: Optional[int]) -> None:
        old = node._address
        if old == address:
            return
        node._address = address
        if address is not None:
            self._refs[address] += 1
        if old is not None:
            self._refs[old] -= 1
            if self._refs[old] <= 0:
                del self._refs[old]
                self._release_if_unused(old)

    def _release_if_unused(self, address: int) -> None:
        if address in self._refs or address not in self.memory:
            return
        if self.memory.views_of(address):
            return
        base = self.memory.base_of(address)
        self.memory.release(address)
        if base is not None:
            self._release_if_unused(base)

    def _assign_new(self, node: Node, value: np.ndarray) -> None:
        """Give ``node`` a fresh private address holding ``value``."""
        address = self.memory.allocate()
        self.memory.set(address, Variable(value, requires_grad=node.is_param))
        self._point(node, address)

    def _store(self, node: Node, variable: Variable) -> None:
        """Store an operation result at ``node``'s own address."""
        if node._address is None or self._refs[node._address] > 1:
            self._point(node, self.memory.allocate())
        self.memory.set(node._address, variable)
        node._shape = variable.value.shape

    def _store_view(self, node: Node, base: int, index, variable: Optional[Variable],
                    shape: Tuple[int, ...]) -> None:
        """Make ``node`` a zero-byte view ``memory[base][index]``."""
        if node._address is None or self._refs[node._address] > 1:
            self._point(node, self.memory.allocate())
        if self.memory.base_of(node._address) != base:
            self.memory.set_view(node._address, base, index, variable)
        else:
            slot = self.memory._slots[node._address]
            slot.variable, slot.index, slot.freed = variable, index, False
        node._shape = tuple(shape)

    def _check_shape(self, node: Node, shape: Tuple[int, ...]) -> None:
        if len(shape) != node.rank:
            raise ValueError(f"node {node.name!r} has rank {node.rank}, got shape {shape}")
        for i, (old, new) in enumerate(zip(node.shape, shape)):
            if old != new and not node.edges[i].is_dangling():
                raise ValueError(
                    f"axis {node.axes[i].name!r} of {node.name!r} is connected with "
                    f"size {old}; cannot set size {new}")

    def _sharers(self, node: Node) -> List[Node]:
        return [n for n in self.nodes.values() if n._address == node._address]

    def _set_tensor(self, node: Node, value: np.ndarray) -> None:
        if node.role in ("resultant", "stack", "param_stack") and node.is_view():
            raise ValueError(f"{node.name!r} is a view of a stacked tensor and is read-only")
        sharers = [node] if node._address is None else self._sharers(node)
        for n in sharers:
            self._check_shape(n, value.shape)
        if node._address is not None and self.memory.is_view(node._address) and node.role != "data":
            # slice of a stacked parameter buffer: write in place
            base = self.memory.get(self.memory.base_of(node._address))
            idx = self.memory.index_of(node._address)
            if base.value[idx].shape != value.shape:
                raise ValueError("cannot resize a node whose tensor lives in a stacked buffer; "
                                 "call reset() first")
            base.value[idx] = value
            return
        requires = any(n.is_param for n in sharers)
        if node._address is None or self.memory.is_view(node._address):
            self._point(node, self.memory.allocate())
        self.memory.set(node._address, Variable(np.array(value, order="C"), requires_grad=requires))
        for n in sharers:
            n._shape = value.shape

    def set_tensors(self, tensors: Dict[Node, np.ndarray]) -> None:
        """
        Set several tensors at once, checking connected sizes only at the end.

        Useful when a bond dimension changes on both sides of an edge.
        """
        tensors = {n: tc.as_tensor(t) for n, t in tensors.items()}
        for node, value in tensors.items():
            if len(value.shape) != node.rank:
                raise ValueError(f"node {node.name!r} has rank {node.rank}, got shape {value.shape}")
        new_shape = {n: t.shape for n, t in tensors.items()}
        for node in tensors:
            for i, e in enumerate(node.edges):
                if e.is_dangling():
                    continue
                other, j = (e.node2, e.axis2) if e.node1 is node else (e.node1, e.axis1)
                s1 = new_shape[node][i]
                s2 = new_shape.get(other, other.shape)[j]
                if s1 != s2:
                    raise ValueError(f"connected axes of {node.name!r} and {other.name!r} "
                                     f"would have sizes {s1} and {s2}")
        if any(n.is_view() for n in tensors):
            self.reset()
        for node, value in tensors.items():
            requires = any(n.is_param for n in self._sharers(node)) if node._address is not None else node.is_param
            if node._address is None:
                self._point(node, self.memory.allocate())
            self.memory.set(node._address, Variable(np.array(value, order="C"), requires_grad=requires))
            for n in self._sharers(node):
                n._shape = value.shape

    def _share(self, target: Node, source: Node) -> None:
        if target._network is not self or source._network is not self:
            raise ValueError("set_tensor_from needs nodes of the same network")
        if target is source or (target._address is not None and target._address == source._address):
            return
        if source._address is None:
            raise ValueError(f"source node {source.name!r} is empty")
        if target.shape != source.shape:
            raise ValueError(f"shapes differ: {target.shape} vs {source.shape}")
        if target.is_view() or source.is_view():
            self.reset()
        self._point(target, source._address)
        self._refresh_requires_grad(target._address)

    def _refresh_requires_grad(self, address: int) -> None:
        if self.memory.is_view(address):
            return
        holders = [n for n in self.nodes.values() if n._address == address]
        requires = any(n.is_param for n in holders)
        var = self.memory._slots[address].variable
        if var is not None and var.requires_grad != requires:
            self.memory.set(address, Variable(var.value, requires_grad=requires))

    def _parameterize(self, node: Node, param: bool) -> None:
        if node.role not in ("leaf", "param"):
            raise ValueError(f"only leaf/param nodes can be (de)parameterized, "
                             f"{node.name!r} is {node.role!r}")
        target = "param" if param else "leaf"
        if node.role == target:
            return
        self.reset()
        node._role = target
        if node._address is not None:
            var = self.memory._slots[node._address].variable
            if var is not None:
                # a fresh Variable so that optimizers built earlier drop it
                self.memory.set(node._address, Variable(var.value, requires_grad=False))
            self._refresh_requires_grad(node._address)

    # ------------------------------------------------------ network merge
    def _absorb(self, other: "TensorNetwork") -> None:
        """Move every node of ``other`` into this network."""
        other.reset()
        moved: Dict[int, int] = {}
        for node in list(other.nodes.values()):
            old = node._address
            node._network = self
            node._address = None
            node._name = self._free_name(node._name)
            self.nodes[node._name] = node
            self.nodes_created += 1
            if old is None:
                continue
            if old not in moved:
                var = other.memory._slots[old].variable
                address = self.memory.allocate()
                if var is not None:
                    self.memory.set(address, var)
                moved[old] = address
            self._point(node, moved[old])
        for name, node in other.data_nodes.items():
            self.data_nodes.setdefault(node.name, node)
        other.nodes.clear()
        other.data_nodes.clear()
        other.memory = MemoryStore()
        other._refs.clear()

    def _replace_edge(self, old: Edge, new: Edge) -> None:
        for node in self.nodes.values():
            edges = node._edges
            for i, e in enumerate(edges):
                if e is old:
                    edges[i] = new

    # ---------------------------------------------------------- parameters
    def parameters(self) -> List[Variable]:
        """Trainable Variables, deduplicated, in node registration order."""
        out: List[Variable] = []
        seen = set()
        for node in self.nodes.values():
            if not node.is_param or node._address is None:
                continue
            address = self.memory.root(node._address)
            var = self.memory._slots[address].variable
            if var is None or not var.requires_grad or var.id in seen:
                continue
            seen.add(var.id)
            out.append(var)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every param-node tensor keyed by node name."""
        return {name: node.tensor.copy() for name, node in self.nodes.items()
                if node.role == "param" and node._address is not None}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = [n for n, node in self.nodes.items() if node.role == "param"]
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={missing}, unexpected={unexpected}")
        self.reset()
        self.set_tensors({self.nodes[n]: state[n] for n in own})

    def save(self, path: Union[str, Path]) -> None:
        """Reset and write the parameter tensors to a ``.tkro`` file."""
        self.reset()
        serialization.save_tensors(path, self.state_dict())

    def load(self, path: Union[str, Path]) -> None:
        self.load_state_dict(serialization.load_tensors(path))

    # ------------------------------------------------------------ data flow
    def set_data_nodes(self, input_edges: Optional[Sequence[Edge]] = None,
                       num_batch_edges: int = 1) -> None:
        """
        Create one data node per input edge and connect it.

        Data node ``i`` has axes ``(batch, feature)`` (``batch_0, batch_1,
        ...`` when ``num_batch_edges > 1``) and is connected to
        ``input_edges[i]`` through its ``feature`` axis.
        """
        if self.data_nodes:
            raise ValueError("data nodes already set; delete them or reset first")
        if input_edges is None:
            raise NotImplementedError("subclasses must give the input edges")
        if num_batch_edges < 1:
            raise ValueError("need at least one batch edge")
        batch_names = (["batch"] if num_batch_edges == 1
                       else [f"batch_{k}" for k in range(num_batch_edges)])
        for i, edge in enumerate(input_edges):
            if not edge.is_dangling():
                raise ValueError(f"input edge {edge!r} is already connected")
            node = Node((1,) * num_batch_edges + (edge.size(),), batch_names + ["feature"],
                        name=f"data_{i}", network=self, role="data")
            connect(node["feature"], edge)
            self.data_nodes[node.name] = node

    def add_data(self, data) -> None:
        """
        Load a ``(batch..., n, d)`` tensor into the ``n`` data nodes.

        Slice ``data[..., i, :]`` goes to data node ``i``. With ``auto_stack``
        the data is stored once, permuted to ``(n, batch..., d)``, and the data
        nodes are views of it.
        """
        if isinstance(data, Variable):
            data = data.value
        data = tc.as_tensor(data)
        nodes = list(self.data_nodes.values())
        if not nodes:
            raise ValueError("network has no data nodes")
        k = nodes[0].rank - 1
        if data.ndim != k + 2 or data.shape[k] != len(nodes):
            raise ValueError(f"expected data of shape (batch..., {len(nodes)}, d) with "
                             f"{k} batch axes, got {data.shape}")
        for i, node in enumerate(nodes):
            if node.shape[-1] != data.shape[-1] and not node.edges[-1].is_dangling():
                raise ValueError(f"data feature size {data.shape[-1]} does not match "
                                 f"{node.name!r} ({node.shape[-1]})")
        if self._auto_stack:
            buf = self._data_buffer
            if buf is None:
                buf = Node((len(nodes),) + data.shape[:k] + data.shape[-1:],
                           name="stack_data_memory", network=self, role="virtual",
                           _internal=True)
                self._data_buffer = buf
            self._store(buf, Variable(np.ascontiguousarray(np.moveaxis(data, k, 0))))
            shape = buf.shape[1:]
            for i, node in enumerate(nodes):
                self._store_view(node, buf._address, i, None, shape)
        else:
            for i, node in enumerate(nodes):
                self._store(node, Variable(np.ascontiguousarray(data[..., i, :])))

    def contract(self, **kwargs) -> Node:
        """Contract the network and return the output node (override)."""
        raise NotImplementedError("subclasses define contract()")

    def forward(self, data, **kwargs) -> Variable:
        """Load ``data``, contract, and return the output tensor."""
        if not self.data_nodes:
            self.set_data_nodes()
        self._in_forward = True
        self._step = 0
        try:
            self.add_data(data)
            self._last_outputs = []
            out = self.contract(**kwargs)
            if not isinstance(out, Node):
                raise TypeError("contract() must return a Node")
            if out not in self._last_outputs:
                raise RuntimeError("contract() must return the node produced by the last operation")
            if self._traced and self._step != len(self.trace_plan.steps):
                raise RuntimeError("forward ran fewer operations than the traced plan; "
                                   "call reset() after changing the contraction")
            return out.variable
        finally:
            self._in_forward = False

    __call__ = forward

    # ---------------------------------------------------- operation hooks
    def _on_operation(self, tag: str, inputs: Sequence[Node],
                      outputs: Sequence[Node], params: tuple = ()) -> None:
        if self._tracing:
            self.trace_plan.add(tag, inputs, outputs, params)
        elif self._traced and self._in_forward:
            plan = self.trace_plan
            k = self._step
            step = (tag, tuple(n.name for n in inputs), params)
            if k >= len(plan.steps) or plan.steps[k] != step:
                raise RuntimeError("contraction differs from the traced one; call reset() "
                                   "before changing the network")
            self._step += 1
            for address in self._free_at.get(k, ()):
                if address in self.memory:
                    self.memory.free(address)
        self._last_outputs = list(outputs)

    # --------------------------------------------------------- trace/reset
    def trace(self, example, **kwargs) -> None:
        """
        Run one forward on a batch-1 ``example``, recording the operation plan.

        Later forwards replay the plan through the cached operations and free
        every data/resultant tensor right after its last use.
        """
        from tnkit.operations import TracePlan
        example = example.value if isinstance(example, Variable) else tc.as_tensor(example)
        if example.ndim < 1 or example.shape[0] != 1:
            raise ValueError(f"trace needs an example with batch size 1, got {example.shape}")
        self.reset()
        self.trace_plan = TracePlan()
        self._tracing = True
        try:
            with ad.no_grad():
                self.forward(example, **kwargs)
        except BaseException:
            self._tracing = False
            self.reset()
            raise
        self._tracing = False
        self.trace_plan.finalize(self._last_outputs[0], self)
        self._free_at = self._schedule_frees(self._last_outputs[0])
        self._traced = True

    def _schedule_frees(self, output: Node) -> Dict[int, List[int]]:
        plan = self.trace_plan
        groups: Dict[int, List[Node]] = defaultdict(list)
        for node in self.nodes.values():
            if node._address is not None:
                groups[self.memory.root(node._address)].append(node)
        free_at: Dict[int, List[int]] = defaultdict(list)
        for root, members in groups.items():
            if output in members:
                continue
            if any(n.role in ("leaf", "param", "param_stack")
                   or (n.role == "virtual" and not n._internal) for n in members):
                continue
            uses = [plan.last_use[n.name] for n in members if n.name in plan.last_use]
            if uses:
                free_at[max(uses)].append(root)
        return dict(free_at)

    def reset(self) -> None:
        """Delete every node created by operations and clear caches and trace."""
        self._traced = False
        self._tracing = False
        self.trace_plan = None
        self._free_at = {}
        # bring stacked slices back into their own memory
        for node in list(self.nodes.values()):
            if node.role in ("leaf", "param", "data", "virtual") and not node._internal:
                if node._address is not None and self.memory.is_view(node._address):
                    self._materialize(node)
        for node in list(self.nodes.values()):
            if node.role in ("resultant", "stack", "param_stack") or node._internal:
                self._drop_node(node)
        self._data_buffer = None
        for node in self.nodes.values():
            node.successors = {}
        self.successors = {}
        self._last_outputs = []

    def _materialize(self, node: Node) -> None:
        mem = self.memory
        if mem.has_value(node._address):
            var = mem.get(node._address) if not node.is_param else None
            if var is None:
                base = mem._slots[mem.root(node._address)].variable
                value = base.value[mem.index_of(node._address)]
            else:
                value = var.value
            self._point(node, mem.allocate())
            mem.set(node._address, Variable(np.array(value, order="C"),
                                            requires_grad=node.is_param))
        else:
            self._point(node, mem.allocate())

    def memory_report(self) -> Dict[str, int]:
        return {"live_bytes": self.memory.live_bytes,
                "peak_bytes": self.memory.peak_bytes,
                "addresses": len(self.memory)}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {len(self.nodes)} nodes)"
