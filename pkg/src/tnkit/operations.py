"""
Operations on nodes: contraction, split, stack/unbind, einsum and arithmetic.

Every operation follows the same two-phase pattern. The first call with a
given set of input nodes (and parameters) works out the axis bookkeeping,
creates the resultant node(s) and caches both in a :class:`Successor`. Later
calls find the successor and only compute and store the new tensor, so a
forward pass that repeats the same operations allocates no new nodes.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tnkit import autodiff as ad
from tnkit import tensor_core as tc
from tnkit.autodiff import Variable
from tnkit.network import Edge, Node, StackEdge, TensorNetwork, connect

__all__ = [
    "Successor", "TracePlan", "contract_between", "contract_edge", "split",
    "stack", "unbind", "einsum", "stacked_einsum", "permute_node", "tprod",
    "add", "sub", "mul", "div",
]


@dataclass(eq=False)
class Successor:
    """Cached outcome of the first call of an operation on some nodes."""

    op_tag: str
    arg_key: tuple
    hints: Any
    child: Any


@dataclass
class TracePlan:
    """
    Ordered operation steps recorded by :meth:`TensorNetwork.trace`.

    Steps refer to nodes by name, so re-tracing after a reset yields an
    identical plan.
    """

    steps: List[tuple] = field(default_factory=list)
    last_use: Dict[str, int] = field(default_factory=dict)
    output: Optional[str] = None

    def add(self, tag: str, inputs: Sequence[Node], outputs: Sequence[Node],
            params: tuple) -> None:
        k = len(self.steps)
        self.steps.append((tag, tuple(n.name for n in inputs), params))
        for n in inputs:
            self.last_use[n.name] = k
        for n in outputs:
            self.last_use.setdefault(n.name, k)

    def finalize(self, output: Node, network: TensorNetwork) -> None:
        if not self.steps:
            raise RuntimeError("trace recorded no operations")
        self.output = output.name
        self.last_use[output.name] = len(self.steps)
        for name, node in network.data_nodes.items():
            self.last_use.setdefault(name, -1)


###############################################################################
#                                  HELPERS                                    #
###############################################################################
def _network_of(nodes: Sequence[Node]) -> TensorNetwork:
    net = nodes[0].network
    for n in nodes[1:]:
        if n.network is not net:
            raise ValueError("nodes belong to different networks")
    return net


def _successor(net: TensorNetwork, tag: str, nodes: Sequence[Node],
               params: tuple, build: Callable[[], Tuple[Any, Any]]) -> Successor:
    key = (tag, tuple(n._id for n in nodes), params)
    succ = net.successors.get(key)
    if succ is None:
        hints, child = build()
        succ = Successor(tag, key[1:], hints, child)
        net.successors[key] = succ
        nodes[0].successors.setdefault(tag, {})[key[1:]] = succ
    return succ


def _is_batchlike(node: Node, i: int) -> bool:
    ax = node.axes[i]
    return ax.is_batch or ax.is_stack


def _pair_contract(va: Variable, la: Sequence, vb: Variable, lb: Sequence,
                   batch: Sequence, contr: Sequence) -> Tuple[Variable, list]:
    """
    Contract ``va`` (labels ``la``) with ``vb`` (labels ``lb``).

    Labels in ``batch`` are matched elementwise, labels in ``contr`` summed.
    The result carries ``batch + free(a) + free(b)`` when ``batch`` is
    non-empty, else ``free(a) + free(b)``.
    """
    la, lb = list(la), list(lb)
    sa, sb = va.shape, vb.shape
    for c in list(batch) + list(contr):
        if sa[la.index(c)] != sb[lb.index(c)]:
            raise ValueError(f"dimension mismatch on {c!r}: {sa[la.index(c)]} vs {sb[lb.index(c)]}")
    fa = [c for c in la if c not in batch and c not in contr]
    fb = [c for c in lb if c not in batch and c not in contr]
    if not batch:
        out = ad.tensordot(va, vb, [la.index(c) for c in contr], [lb.index(c) for c in contr])
        return out, fa + fb
    size = lambda s, l, cs: int(np.prod([s[l.index(c)] for c in cs])) if cs else 1
    pa = ad.permute(va, [la.index(c) for c in list(batch) + fa + list(contr)])
    pb = ad.permute(vb, [lb.index(c) for c in list(batch) + list(contr) + fb])
    B, C = size(sa, la, batch), size(sa, la, contr)
    Fa, Fb = size(sa, la, fa), size(sb, lb, fb)
    r = ad.batched_matmul(ad.reshape(pa, (B, Fa, C)), ad.reshape(pb, (B, C, Fb)))
    shape = ([sa[la.index(c)] for c in batch] + [sa[la.index(c)] for c in fa]
             + [sb[lb.index(c)] for c in fb])
    return ad.reshape(r, shape), list(batch) + fa + fb


###############################################################################
#                                 CONTRACTION                                 #
###############################################################################
@dataclass
class _ContractHints:
    contr_a: List[int]
    contr_b: List[int]
    batch_a: List[int]
    batch_b: List[int]
    out_perm: Optional[List[int]]


def _build_contract(net: TensorNetwork, a: Node, b: Node):
    b_pos = {id(e): j for j, e in enumerate(b.edges) if not e.is_dangling()}
    contr_a, contr_b = [], []
    for i, e in enumerate(a.edges):
        if not e.is_dangling() and id(e) in b_pos:
            contr_a.append(i)
            contr_b.append(b_pos[id(e)])
    if not contr_a:
        raise ValueError(f"nodes {a.name!r} and {b.name!r} share no connected edge; "
                         "use tprod for outer products")
    batch_a, batch_b = [], []
    b_names = {ax.name: ax.num for ax in b.axes}
    for i, ax in enumerate(a.axes):
        if i in contr_a or not _is_batchlike(a, i):
            continue
        j = b_names.get(ax.name)
        if j is not None and j not in contr_b and _is_batchlike(b, j):
            batch_a.append(i)
            batch_b.append(j)
    keep_a = [i for i in range(a.rank) if i not in contr_a]
    free_b = [j for j in range(b.rank) if j not in contr_b and j not in batch_b]

    out_perm = None
    if batch_a:
        labels = batch_a + [i for i in keep_a if i not in batch_a] + [("b", j) for j in free_b]
        target = keep_a + [("b", j) for j in free_b]
        out_perm = [labels.index(t) for t in target]
    hints = _ContractHints(contr_a, contr_b, batch_a, batch_b, out_perm)

    names = [a.axes[i].name for i in keep_a] + [b.axes[j].name for j in free_b]
    edges = [a.edges[i] for i in keep_a] + [b.edges[j] for j in free_b]
    shape = [a.shape[i] for i in keep_a] + [b.shape[j] for j in free_b]
    stacked = any(a.axes[i].is_stack for i in batch_a)
    child = Node._resultant(net, "contract_edges", names, edges, shape,
                            role="stack" if stacked else "resultant")
    return hints, child


def contract_between(a: Node, b: Node) -> Node:
    """
    Contract every edge connecting ``a`` and ``b`` (the ``@`` operator).

    Batch axes with the same name (and stack axes) are matched elementwise.
    The result keeps ``a``'s surviving axes in order, then ``b``'s.
    """
    if a is b:
        raise ValueError("cannot contract a node with itself")
    net = _network_of([a, b])
    succ = _successor(net, "contract_edges", [a, b], (), lambda: _build_contract(net, a, b))
    h: _ContractHints = succ.hints
    va, vb = a.variable, b.variable
    if not h.batch_a:
        out = ad.tensordot(va, vb, h.contr_a, h.contr_b)
    else:
        la = list(range(a.rank))
        lb = [h.batch_a[h.batch_b.index(j)] if j in h.batch_b
              else (h.contr_a[h.contr_b.index(j)] if j in h.contr_b else ("b", j))
              for j in range(b.rank)]
        out, _ = _pair_contract(va, la, vb, lb, h.batch_a, h.contr_a)
        out = ad.permute(out, h.out_perm)
    net._store(succ.child, out)
    net._on_operation("contract_edges", [a, b], [succ.child])
    return succ.child


def contract_edge(edge: Edge) -> Node:
    """Contract the two nodes joined by ``edge`` (all their shared edges)."""
    if edge.is_dangling():
        raise ValueError("cannot contract a dangling edge")
    return contract_between(edge.node1, edge.node2)


###############################################################################
#                                    SPLIT                                    #
###############################################################################
def split(node: Node,
          node1_axes: Sequence[Union[str, int]],
          node2_axes: Sequence[Union[str, int]],
          mode: str = "svd",
          rank: Optional[int] = None,
          cum_percentage: Optional[float] = None) -> Tuple[Node, Node]:
    """
    Factorize ``node`` into two nodes joined by a new ``split`` edge.

    Parameters
    ----------
    node1_axes, node2_axes : sequences of axis names or indices
        Partition of the non-batch axes of ``node``.
    mode : {"svd", "svdr", "qr"}
        ``svd`` absorbs the square root of the singular values on both sides,
        ``svdr`` absorbs them on the right, ``qr`` keeps ``Q`` on the left.
    rank, cum_percentage : optional
        Truncation criteria for the SVD modes (the smaller rank wins).

    Notes
    -----
    The factorization is not differentiable; calling it on a tensor that
    requires gradients while recording is an error.
    """
    if mode not in ("svd", "svdr", "qr"):
        raise ValueError(f"unknown split mode {mode!r}")
    if mode == "qr" and (rank is not None or cum_percentage is not None):
        raise ValueError("qr split does not truncate; drop rank/cum_percentage")
    left = [node.get_axis_num(a) for a in node1_axes]
    right = [node.get_axis_num(a) for a in node2_axes]
    batch = [i for i in range(node.rank) if _is_batchlike(node, i)]
    plain = [i for i in range(node.rank) if i not in batch]
    if (not left or not right or len(set(left + right)) != len(left + right)
            or sorted(left + right) != plain):
        raise ValueError("node1_axes and node2_axes must partition the non-batch axes")
    var = node.variable
    if var.requires_grad and ad.is_grad_enabled():
        raise RuntimeError("split is not differentiable; run it under no_grad() "
                           "or on tensors that do not require gradients")
    net = node.network
    params = (tuple(left), tuple(right), mode, rank, cum_percentage)

    def build():
        bnames = [node.axes[i].name for i in batch]
        bedges = [node.edges[i] for i in batch]
        bshape = [node.shape[i] for i in batch]
        n1 = Node._resultant(net, "split", bnames + [node.axes[i].name for i in left] + ["split"],
                             bedges + [node.edges[i] for i in left] + [None],
                             bshape + [node.shape[i] for i in left] + [1])
        n2 = Node._resultant(net, "split", bnames + ["split"] + [node.axes[i].name for i in right],
                             bedges + [None] + [node.edges[i] for i in right],
                             bshape + [1] + [node.shape[i] for i in right])
        bond = Edge(n1, len(batch) + len(left), n2, len(batch))
        n1._edges[-1] = bond
        n2._edges[len(batch)] = bond
        return None, (n1, n2)

    succ = _successor(net, "split", [node], params, build)
    n1, n2 = succ.child
    t = var.value
    bshape = [t.shape[i] for i in batch]
    lshape = [t.shape[i] for i in left]
    rshape = [t.shape[i] for i in right]
    B = int(np.prod(bshape)) if bshape else 1
    L, R = int(np.prod(lshape)), int(np.prod(rshape))
    mats = tc.reshape(tc.permute(t, batch + left + right), (B, L, R))
    lefts, rights = [], []
    for m in mats:
        if mode == "qr":
            q, r = tc.qr(m)
            lefts.append(q)
            rights.append(r)
            continue
        res = tc.svd(m, max_rank=rank, cum_percentage=cum_percentage)
        if mode == "svd":
            root = np.sqrt(res.s)
            lefts.append(res.u * root[None, :])
            rights.append(root[:, None] * res.vt)
        else:
            lefts.append(res.u)
            rights.append(res.s[:, None] * res.vt)
    k = max(x.shape[1] for x in lefts)
    lv = np.zeros((B, L, k))
    rv = np.zeros((B, k, R))
    for i, (x, y) in enumerate(zip(lefts, rights)):
        lv[i, :, :x.shape[1]] = x
        rv[i, :y.shape[0], :] = y
    net._store(n1, Variable(lv.reshape(bshape + lshape + [k])))
    net._store(n2, Variable(rv.reshape(bshape + [k] + rshape)))
    net._on_operation("split", [node], [n1, n2], params)
    return n1, n2


###############################################################################
#                                STACK / UNBIND                               #
###############################################################################
def _consecutive_views(net: TensorNetwork, nodes: Sequence[Node]):
    """``(base, start)`` if the nodes are views ``base[start], base[start+1], ...``."""
    mem = net.memory
    addrs = [n._address for n in nodes]
    if any(a is None or not mem.is_view(a) for a in addrs):
        return None
    base = mem.base_of(addrs[0])
    idx = [mem.index_of(a) for a in addrs]
    if any(mem.base_of(a) != base for a in addrs) or not all(isinstance(i, (int, np.integer)) for i in idx):
        return None
    if idx != list(range(idx[0], idx[0] + len(idx))):
        return None
    return base, idx[0]


def stack(nodes: Sequence[Node]) -> Node:
    """
    Stack equally shaped nodes into one node with a leading ``stack`` axis.

    With ``auto_stack`` the first stack of unshared leaf or param nodes moves
    their tensors into one buffer owned by the stack node, and the nodes
    become views into it; later calls reuse the buffer without copying. Data
    nodes loaded by :meth:`TensorNetwork.add_data` are already views of one
    buffer and are stacked for free.
    """
    nodes = list(nodes)
    if not nodes:
        raise ValueError("cannot stack an empty list")
    net = _network_of(nodes)
    first = nodes[0]
    for n in nodes[1:]:
        if n.axes_names != first.axes_names:
            raise ValueError(f"axis names differ: {first.axes_names} vs {n.axes_names}")
        if n.shape != first.shape:
            raise ValueError(f"shapes differ: {first.shape} vs {n.shape}")

    def build():
        names = ["stack"] + first.axes_names
        child = Node._resultant(net, "stack", names, [None] * len(names),
                                (len(nodes),) + first.shape, role="stack")
        child._edges[0] = Edge(child, 0)
        for k in range(first.rank):
            child._edges[k + 1] = StackEdge([n.edges[k] for n in nodes], child, k + 1)
        return None, child

    is_new = (("stack", tuple(n._id for n in nodes), ()) not in net.successors)
    child = _successor(net, "stack", nodes, (), build).child
    shape = (len(nodes),) + first.shape
    mem = net.memory

    views = _consecutive_views(net, nodes) if net.auto_stack else None
    if views is not None:
        base, start = views
        if start == 0 and mem._slots[base].variable is not None and \
                mem._slots[base].variable.shape[0] == len(nodes) and not mem.is_view(base):
            net._point(child, base)
            child._shape = shape
        else:
            net._store_view(child, base, slice(start, start + len(nodes)), None, shape)
    elif net.auto_stack and is_new and _can_own_buffer(net, nodes):
        params = nodes[0].role == "param"
        value = tc.stack_tensors([n.tensor for n in nodes])
        net._store(child, Variable(value, requires_grad=params))
        child._role = "param_stack" if params else "stack"
        for i, n in enumerate(nodes):
            net._store_view(n, child._address, i, None, n.shape)
    else:
        if child._address is not None and mem.views_of(child._address):
            raise RuntimeError("stacked buffer is still referenced; call reset()")
        net._store(child, ad.stack([n.variable for n in nodes]))
    net._on_operation("stack", nodes, [child])
    return child


def _can_own_buffer(net: TensorNetwork, nodes: Sequence[Node]) -> bool:
    roles = {n.role for n in nodes}
    if roles not in ({"param"}, {"leaf"}):
        return False
    addrs = [n._address for n in nodes]
    if any(a is None or net.memory.is_view(a) or net._refs[a] != 1 for a in addrs):
        return False
    return len(set(addrs)) == len(addrs)


def unbind(node: Node) -> List[Node]:
    """
    Split a stack node along its ``stack`` axis.

    With ``auto_unbind`` the results are zero-copy views of the stack (and
    reject ``set_tensor``); otherwise they are independent copies.
    """
    if node.role not in ("stack", "param_stack"):
        raise ValueError(f"only stack nodes can be unbound, {node.name!r} is {node.role!r}")
    net = node.network
    n = node.shape[0]

    def build():
        children = []
        for i in range(n):
            edges = [e.edges[i] if isinstance(e, StackEdge) else e for e in node.edges[1:]]
            children.append(Node._resultant(net, "unbind", node.axes_names[1:], edges,
                                            node.shape[1:]))
        return None, children

    children = _successor(net, "unbind", [node], (), build).child
    var = node.variable
    if net.auto_unbind:
        parts = ad.unbind(var, copy=False)
        for i, (c, v) in enumerate(zip(children, parts)):
            net._store_view(c, node._address, i, v, v.shape)
    else:
        parts = ad.unbind(var, copy=True)
        for c, v in zip(children, parts):
            net._store(c, v)
    net._on_operation("unbind", [node], children)
    return list(children)


###############################################################################
#                                    EINSUM                                   #
###############################################################################
@dataclass
class _EinsumHints:
    inputs: List[str]
    output: str
    out_names: List[str]


def _parse_einsum(spec: str, nodes: Sequence[Node]) -> _EinsumHints:
    spec = spec.replace(" ", "")
    if spec.count("->") != 1:
        raise ValueError(f"einsum spec {spec!r} needs exactly one '->'")
    lhs, out = spec.split("->")
    inputs = lhs.split(",")
    if len(inputs) != len(nodes):
        raise ValueError(f"spec has {len(inputs)} operands but {len(nodes)} nodes were given")
    for term in inputs + [out]:
        if any(c not in string.ascii_letters for c in term):
            raise ValueError(f"einsum subscripts must be letters, got {term!r}")
        if len(set(term)) != len(term):
            raise ValueError(f"repeated index inside one operand or output: {term!r}")
    occ: Dict[str, List[Tuple[int, int]]] = {}
    for k, (term, node) in enumerate(zip(inputs, nodes)):
        if len(term) != node.rank:
            raise ValueError(f"operand {k} has {len(term)} indices but node "
                             f"{node.name!r} has rank {node.rank}")
        for i, c in enumerate(term):
            occ.setdefault(c, []).append((k, i))
    for c in out:
        if c not in occ:
            raise ValueError(f"output index {c!r} does not appear in the inputs")
    for c, where in occ.items():
        if len(where) < 2:
            continue
        if all(_is_batchlike(nodes[k], i) for k, i in where):
            if c not in out:
                raise ValueError(f"batch index {c!r} must appear in the output")
            continue
        if len(where) != 2 or c in out:
            raise ValueError(f"index {c!r} repeats on axes that are not one connected edge")
        (k1, i1), (k2, i2) = where
        e1, e2 = nodes[k1].edges[i1], nodes[k2].edges[i2]
        if e1 is not e2 or e1.is_dangling():
            raise ValueError(f"index {c!r} repeats on axes of {nodes[k1].name!r} and "
                             f"{nodes[k2].name!r} that are not connected")
    out_names = [nodes[occ[c][0][0]].axes[occ[c][0][1]].name for c in out]
    return _EinsumHints(inputs, out, out_names)


def _sum_out(v: Variable, labels: List[str], keep: set) -> Tuple[Variable, List[str]]:
    for pos in reversed(range(len(labels))):
        if labels[pos] not in keep:
            v = ad.sum_axis(v, pos)
            labels = labels[:pos] + labels[pos + 1:]
    return v, labels


def einsum(spec: str, *nodes: Node) -> Node:
    """
    Contract nodes following an Einstein-summation string, e.g. ``"ijb,jkb,kib->b"``.

    Indices repeated across operands must label one connected edge (summed)
    or batch axes (matched, and kept in the output). Indices used once and
    absent from the output are summed. Operands are contracted strictly
    left to right.
    """
    if not nodes:
        raise ValueError("einsum needs at least one node")
    net = _network_of(nodes)
    key_spec = spec.replace(" ", "")

    def build():
        h = _parse_einsum(spec, nodes)
        first = {}
        for k, term in enumerate(h.inputs):
            for i, c in enumerate(term):
                first.setdefault(c, (k, i))
        edges = [nodes[first[c][0]].edges[first[c][1]] for c in h.output]
        shape = [nodes[first[c][0]].shape[first[c][1]] for c in h.output]
        stacked = bool(h.output) and nodes[first[h.output[0]][0]].axes[first[h.output[0]][1]].is_stack
        child = Node._resultant(net, "einsum", h.out_names, edges, shape,
                                role="stack" if stacked else "resultant")
        return h, child

    succ = _successor(net, "einsum", list(nodes), (key_spec,), build)
    h: _EinsumHints = succ.hints
    sizes: Dict[str, int] = {}
    for term, node in zip(h.inputs, nodes):
        for c, s in zip(term, node.shape):
            if sizes.setdefault(c, s) != s:
                raise ValueError(f"index {c!r} has sizes {sizes[c]} and {s}")

    out_set = set(h.output)
    later = lambda k: set("".join(h.inputs[k + 1:]))
    cur = nodes[0].variable
    labels = list(h.inputs[0])
    cur, labels = _sum_out(cur, labels, out_set | later(0))
    for k in range(1, len(nodes)):
        keep = out_set | later(k)
        v, lv = _sum_out(nodes[k].variable, list(h.inputs[k]), keep | set(labels))
        common = [c for c in labels if c in lv]
        batch = [c for c in common if c in keep]
        contr = [c for c in common if c not in keep]
        if common:
            cur, labels = _pair_contract(cur, labels, v, lv, batch, contr)
        else:
            cur = ad.outer(cur, v)
            labels = labels + lv
    cur, labels = _sum_out(cur, labels, out_set)
    cur = ad.permute(cur, [labels.index(c) for c in h.output])
    net._store(succ.child, cur)
    net._on_operation("einsum", list(nodes), [succ.child], (key_spec,))
    return succ.child


def stacked_einsum(spec: str, *node_lists: Sequence[Node]) -> List[Node]:
    """
    Stack each list, run :func:`einsum` with an extra stack index, unbind.

    Equivalent to ``[einsum(spec, *group) for group in zip(*node_lists)]``.
    """
    lists = [list(l) for l in node_lists]
    if not lists:
        raise ValueError("stacked_einsum needs at least one list of nodes")
    if len({len(l) for l in lists}) != 1:
        raise ValueError("all node lists must have the same length")
    clean = spec.replace(" ", "")
    lhs, out = clean.split("->") if "->" in clean else (clean, None)
    if out is None:
        raise ValueError(f"einsum spec {spec!r} needs '->'")
    terms = lhs.split(",")
    if len(terms) != len(lists):
        raise ValueError(f"spec has {len(terms)} operands but {len(lists)} lists were given")
    s = next(c for c in string.ascii_letters if c not in clean)
    stacks = [stack(l) for l in lists]
    for p in range(len(terms)):
        for q in range(p + 1, len(terms)):
            for x, c in enumerate(terms[p]):
                y = terms[q].find(c)
                if y < 0 or c in out:
                    continue
                e1, e2 = stacks[p].edges[x + 1], stacks[q].edges[y + 1]
                if (isinstance(e1, StackEdge) and isinstance(e2, StackEdge)
                        and not e1.is_batch()):
                    connect(e1, e2)
    new_spec = ",".join(s + t for t in terms) + "->" + s + out
    return unbind(einsum(new_spec, *stacks))


###############################################################################
#                           PERMUTE AND ARITHMETIC                            #
###############################################################################
def permute_node(node: Node, order: Sequence[Union[str, int]]) -> Node:
    """Reorder the axes of ``node``; edges follow their axes."""
    perm = tuple(node.get_axis_num(a) for a in order)
    if sorted(perm) != list(range(node.rank)):
        raise ValueError(f"{list(order)} is not a permutation of the axes of {node.name!r}")
    net = node.network

    def build():
        child = Node._resultant(net, "permute", [node.axes_names[i] for i in perm],
                                [node.edges[i] for i in perm], [node.shape[i] for i in perm],
                                role=node.role if node.role in ("stack",) and perm[0] == 0 else "resultant")
        return None, child

    child = _successor(net, "permute", [node], perm, build).child
    net._store(child, ad.permute(node.variable, perm))
    net._on_operation("permute", [node], [child], perm)
    return child


def tprod(a: Node, b: Node) -> Node:
    """Tensor (outer) product; the result has ``a``'s axes then ``b``'s."""
    net = _network_of([a, b])

    def build():
        child = Node._resultant(net, "tprod", a.axes_names + b.axes_names,
                                a.edges + b.edges, a.shape + b.shape)
        return None, child

    child = _successor(net, "tprod", [a, b], (), build).child
    net._store(child, ad.outer(a.variable, b.variable))
    net._on_operation("tprod", [a, b], [child])
    return child


def _elementwise(tag: str, fn, a: Node, b) -> Node:
    net = a.network
    if isinstance(b, Node):
        _network_of([a, b])
        if a.shape != b.shape:
            raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
        inputs, params = [a, b], ()
    else:
        inputs, params = [a], (float(b),)

    def build():
        child = Node._resultant(net, tag, a.axes_names, a.edges, a.shape)
        return None, child

    child = _successor(net, tag, inputs, params, build).child
    if isinstance(b, Node):
        out = fn(a.variable, b.variable)
    else:
        out = fn(a.variable, Variable(np.full(a.shape, float(b))))
    net._store(child, out)
    net._on_operation(tag, inputs, [child], params)
    return child


def add(a: Node, b) -> Node:
    return _elementwise("add", ad.add, a, b)


def sub(a: Node, b) -> Node:
    return _elementwise("sub", ad.sub, a, b)


def mul(a: Node, b) -> Node:
    if not isinstance(b, Node):
        return _scaled(a, float(b))
    return _elementwise("mul", ad.mul, a, b)


def div(a: Node, b) -> Node:
    if not isinstance(b, Node):
        if float(b) == 0.0:
            raise ZeroDivisionError("division of a node by zero")
        return _scaled(a, 1.0 / float(b))
    return _elementwise("div", ad.div, a, b)


def _scaled(a: Node, factor: float) -> Node:
    net = a.network

    def build():
        return None, Node._resultant(net, "mul", a.axes_names, a.edges, a.shape)

    child = _successor(net, "mul", [a], (factor,), build).child
    net._store(child, ad.scale(a.variable, factor))
    net._on_operation("mul", [a], [child], (factor,))
    return child
