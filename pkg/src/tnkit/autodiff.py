"""
Reverse-mode automatic differentiation over the tensor kernels.

A :class:`Variable` wraps a tensor value. Differentiable operations
(:func:`tensordot`, :func:`permute`, :func:`stack`, ...) compute their forward
result with :mod:`tnkit.tensor_core` and :func:`record` a :class:`TapeEntry`
holding whatever the registered backward rule needs. :func:`backward` walks the
entries reachable from a scalar root in reverse creation order and
accumulates gradients on leaf variables.

The tape is rebuilt on every forward pass and consumed by ``backward``; calling
``backward`` again on the same graph is an error.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from tnkit import tensor_core as tc

__all__ = [
    "Variable", "TapeEntry", "record", "backward", "grad_check", "no_grad",
    "is_grad_enabled", "register_backward", "BACKWARD_RULES",
    "tensordot", "batched_matmul", "permute", "reshape", "outer",
    "add", "sub", "mul", "div", "scale", "stack", "unbind", "take",
    "sum_axis", "sum_all", "cross_entropy", "mse", "constant",
]

_variable_ids = itertools.count()
_entry_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Variable:
    """A tensor value with an optional gradient and a link into the tape."""

    __slots__ = ("value", "requires_grad", "grad", "tape_node", "slot", "id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = tc.as_tensor(value)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[TapeEntry] = None
        self.slot = 0
        self.id = next(_variable_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape_node is None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return (f"Variable(shape={self.value.shape}, "
                f"requires_grad={self.requires_grad})")


@dataclass(eq=False)
class TapeEntry:
    index: int
    op_kind: str
    inputs: List[Variable]
    output_shape: Any
    saved: Dict[str, Any] = field(default_factory=dict)
    n_outputs: int = 1
    multi: bool = False
    consumed: bool = False


BACKWARD_RULES: Dict[str, Callable] = {}


def register_backward(op_kind: str):
    def deco(fn):
        BACKWARD_RULES[op_kind] = fn
        return fn
    return deco


def constant(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def record(op_kind: str,
           inputs: Sequence[Variable],
           forward_result,
           saved: Optional[dict] = None):
    """
    Wrap ``forward_result`` in Variable(s) linked to a new tape entry.

    ``forward_result`` may be a single array or a list of arrays (for
    multi-output operations such as :func:`unbind`); the return value mirrors
    it.
    """
    if op_kind not in BACKWARD_RULES:
        raise KeyError(f"no backward rule registered for {op_kind!r}")
    inputs = [constant(x) for x in inputs]
    multi = isinstance(forward_result, list)
    results = forward_result if multi else [forward_result]
    requires_grad = is_grad_enabled() and any(v.requires_grad for v in inputs)

    outs = []
    for r in results:
        v = Variable.__new__(Variable)
        v.value = r
        v.requires_grad = requires_grad
        v.grad = None
        v.tape_node = None
        v.slot = 0
        v.id = next(_variable_ids)
        outs.append(v)

    if requires_grad:
        entry = TapeEntry(index=next(_entry_ids),
                          op_kind=op_kind,
                          inputs=list(inputs),
                          output_shape=[r.shape for r in results] if multi else results[0].shape,
                          saved=saved or {},
                          n_outputs=len(results),
                          multi=multi)
        for i, v in enumerate(outs):
            v.tape_node = entry
            v.slot = i
    return outs if multi else outs[0]


def backward(root: Variable, grad: Optional[np.ndarray] = None) -> None:
    """
    Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``.

    Gradients accumulate into existing ``.grad`` arrays.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    if grad is None:
        grad = np.ones_like(root.value)
    if not root.requires_grad:
        return
    if root.tape_node is None:
        root.grad = grad.copy() if root.grad is None else root.grad + grad
        return
    if root.tape_node.consumed:
        raise RuntimeError("backward called twice on the same graph; "
                           "re-run the forward pass first")

    # Collect reachable entries.
    entries: Dict[int, TapeEntry] = {}
    todo = [root.tape_node]
    while todo:
        e = todo.pop()
        if e.index in entries:
            continue
        if e.consumed:
            raise RuntimeError("graph contains an entry already consumed by backward")
        entries[e.index] = e
        for v in e.inputs:
            if v.requires_grad and v.tape_node is not None:
                todo.append(v.tape_node)

    pending: Dict[int, list] = {}

    def push(v: Variable, g: np.ndarray) -> None:
        if v.tape_node is None:
            v.grad = g.copy() if v.grad is None else v.grad + g
            return
        e = v.tape_node
        slots = pending.setdefault(e.index, [None] * e.n_outputs)
        slots[v.slot] = g if slots[v.slot] is None else slots[v.slot] + g

    push(root, grad)
    for idx in sorted(entries, reverse=True):
        e = entries[idx]
        outs = pending.pop(idx, None)
        if outs is not None:
            g_out = outs if e.multi else outs[0]
            in_grads = BACKWARD_RULES[e.op_kind](e, g_out)
            for v, g in zip(e.inputs, in_grads):
                if g is not None and v.requires_grad:
                    push(v, g)
        e.consumed = True
        e.saved = {}
        e.inputs = []


def grad_check(f: Callable[[], Variable],
               leaves: Sequence[Variable],
               h: float = 1e-5) -> float:
    """
    Compare analytic gradients of ``f`` with central finite differences.

    Returns the maximum over all leaf entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    for v in leaves:
        v.grad = None
    out = f()
    backward(out)
    worst = 0.0
    for v in leaves:
        analytic = v.grad if v.grad is not None else np.zeros_like(v.value)
        numeric = np.zeros_like(v.value)
        flat = v.value.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


###############################################################################
#                          DIFFERENTIABLE OPERATIONS                          #
###############################################################################
def _inverse_perm(perm: Sequence[int]) -> List[int]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return inv


def tensordot(a, b, axes_a: Sequence[int], axes_b: Sequence[int]) -> Variable:
    a, b = constant(a), constant(b)
    axes_a = [ax % a.value.ndim for ax in axes_a]
    axes_b = [ax % b.value.ndim for ax in axes_b]
    out = tc.tensordot(a.value, b.value, axes_a, axes_b)
    return record("tensordot", [a, b], out,
                  {"a": a.value, "b": b.value, "axes_a": axes_a, "axes_b": axes_b})


@register_backward("tensordot")
def _tensordot_bw(e: TapeEntry, g):
    a, b = e.saved["a"], e.saved["b"]
    axes_a, axes_b = e.saved["axes_a"], e.saved["axes_b"]
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [j for j in range(b.ndim) if j not in axes_b]
    nfa = len(free_a)
    ga = gb = None
    if e.inputs[0].requires_grad:
        raw = tc.tensordot(g, b, list(range(nfa, g.ndim)), free_b)
        # raw axes: free_a, then b's contracted axes in ascending order
        labels = free_a + [axes_a[axes_b.index(j)] for j in sorted(axes_b)]
        ga = tc.permute(raw, _inverse_perm(labels))
    if e.inputs[1].requires_grad:
        raw = tc.tensordot(a, g, free_a, list(range(nfa)))
        labels = [axes_b[axes_a.index(i)] for i in sorted(axes_a)] + free_b
        gb = tc.permute(raw, _inverse_perm(labels))
    return [ga, gb]


def batched_matmul(a, b) -> Variable:
    a, b = constant(a), constant(b)
    out = tc.batched_matmul(a.value, b.value)
    return record("batched_matmul", [a, b], out, {"a": a.value, "b": b.value})


@register_backward("batched_matmul")
def _bmm_bw(e, g):
    a, b = e.saved["a"], e.saved["b"]
    ga = np.matmul(g, b.transpose(0, 2, 1)) if e.inputs[0].requires_grad else None
    gb = np.matmul(a.transpose(0, 2, 1), g) if e.inputs[1].requires_grad else None
    return [ga, gb]


def permute(a, perm: Sequence[int]) -> Variable:
    a = constant(a)
    perm = list(perm)
    if perm == list(range(a.value.ndim)):
        tc.permute(a.value, perm)  # validates
        return a
    return record("permute", [a], tc.permute(a.value, perm), {"perm": perm})


@register_backward("permute")
def _permute_bw(e, g):
    return [tc.permute(g, _inverse_perm(e.saved["perm"]))]


def reshape(a, new_shape: Sequence[int]) -> Variable:
    a = constant(a)
    new_shape = tuple(int(s) for s in new_shape)
    if new_shape == a.value.shape:
        return a
    return record("reshape", [a], tc.reshape(a.value, new_shape),
                  {"shape": a.value.shape})


@register_backward("reshape")
def _reshape_bw(e, g):
    return [tc.reshape(g, e.saved["shape"])]


def outer(a, b) -> Variable:
    a, b = constant(a), constant(b)
    return record("outer", [a, b], tc.outer(a.value, b.value),
                  {"a": a.value, "b": b.value})


@register_backward("outer")
def _outer_bw(e, g):
    a, b = e.saved["a"], e.saved["b"]
    ga = gb = None
    if e.inputs[0].requires_grad:
        ga = np.tensordot(g, b, axes=(list(range(a.ndim, g.ndim)), list(range(b.ndim))))
    if e.inputs[1].requires_grad:
        gb = np.tensordot(a, g, axes=(list(range(a.ndim)), list(range(a.ndim))))
    return [ga, gb]


def add(a, b) -> Variable:
    a, b = constant(a), constant(b)
    return record("add", [a, b], tc.add(a.value, b.value))


@register_backward("add")
def _add_bw(e, g):
    return [g, g]


def sub(a, b) -> Variable:
    a, b = constant(a), constant(b)
    return record("sub", [a, b], tc.sub(a.value, b.value))


@register_backward("sub")
def _sub_bw(e, g):
    return [g, -g]


def mul(a, b) -> Variable:
    a, b = constant(a), constant(b)
    return record("mul", [a, b], tc.mul(a.value, b.value),
                  {"a": a.value, "b": b.value})


@register_backward("mul")
def _mul_bw(e, g):
    return [g * e.saved["b"], g * e.saved["a"]]


def div(a, b) -> Variable:
    a, b = constant(a), constant(b)
    return record("div", [a, b], tc.div(a.value, b.value),
                  {"a": a.value, "b": b.value})


@register_backward("div")
def _div_bw(e, g):
    a, b = e.saved["a"], e.saved["b"]
    return [g / b, -g * a / (b * b)]


def scale(a, factor: float) -> Variable:
    """Multiply by a Python scalar."""
    a = constant(a)
    return record("scale", [a], a.value * float(factor), {"factor": float(factor)})


@register_backward("scale")
def _scale_bw(e, g):
    return [g * e.saved["factor"]]


def stack(vs: Sequence) -> Variable:
    vs = [constant(v) for v in vs]
    return record("stack", vs, tc.stack_tensors([v.value for v in vs]))


@register_backward("stack")
def _stack_bw(e, g):
    return [g[i] for i in range(g.shape[0])]


def unbind(a, copy: bool = False) -> List[Variable]:
    """Split the leading axis into a list of Variables (views unless ``copy``)."""
    a = constant(a)
    parts = tc.unbind_tensor(a.value, copy=copy)
    return record("unbind", [a], parts, {"shape": a.value.shape})


@register_backward("unbind")
def _unbind_bw(e, gs):
    shape = e.saved["shape"]
    out = np.zeros(shape)
    for i, g in enumerate(gs):
        if g is not None:
            out[i] = g
    return [out]


def take(a, index, axis: int = 0) -> Variable:
    """Select ``index`` (int or slice) along ``axis``."""
    a = constant(a)
    axis = axis % a.value.ndim
    return record("take", [a], tc.take(a.value, index, axis),
                  {"shape": a.value.shape, "index": index, "axis": axis})


@register_backward("take")
def _take_bw(e, g):
    out = np.zeros(e.saved["shape"])
    sl = [slice(None)] * len(e.saved["shape"])
    sl[e.saved["axis"]] = e.saved["index"]
    out[tuple(sl)] = g
    return [out]


def sum_axis(a, axis: int) -> Variable:
    a = constant(a)
    axis = axis % a.value.ndim
    return record("sum_axis", [a], np.sum(a.value, axis=axis),
                  {"shape": a.value.shape, "axis": axis})


@register_backward("sum_axis")
def _sum_axis_bw(e, g):
    shape, axis = e.saved["shape"], e.saved["axis"]
    return [np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), shape))]


def sum_all(a) -> Variable:
    a = constant(a)
    return record("sum_all", [a], np.asarray(np.sum(a.value)),
                  {"shape": a.value.shape})


@register_backward("sum_all")
def _sum_all_bw(e, g):
    return [np.full(e.saved["shape"], float(np.reshape(g, -1)[0]))]


###############################################################################
#                                   LOSSES                                    #
###############################################################################
def cross_entropy(scores, labels: Sequence[int]) -> Variable:
    """Mean softmax cross-entropy of ``scores`` (b, c) against integer labels."""
    scores = constant(scores)
    s = scores.value
    if s.ndim != 2:
        raise ValueError("scores must have shape (batch, classes)")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (s.shape[0],):
        raise ValueError("need one label per batch element")
    if np.any(labels < 0) or np.any(labels >= s.shape[1]):
        raise ValueError(f"labels must lie in [0, {s.shape[1]})")
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    logp = shifted - logz[:, None]
    loss = -np.mean(logp[np.arange(len(labels)), labels])
    return record("cross_entropy", [scores], np.asarray(loss),
                  {"logp": logp, "labels": labels})


@register_backward("cross_entropy")
def _cross_entropy_bw(e, g):
    logp, labels = e.saved["logp"], e.saved["labels"]
    grad = np.exp(logp)
    grad[np.arange(len(labels)), labels] -= 1.0
    return [grad * (float(np.reshape(g, -1)[0]) / len(labels))]


def mse(pred, target) -> Variable:
    """Mean squared error over all entries."""
    pred = constant(pred)
    target = tc.as_tensor(target.value if isinstance(target, Variable) else target)
    if pred.value.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.value.shape} vs {target.shape}")
    diff = pred.value - target
    return record("mse", [pred], np.asarray(np.mean(diff * diff)), {"diff": diff})


@register_backward("mse")
def _mse_bw(e, g):
    diff = e.saved["diff"]
    return [diff * (2.0 * float(np.reshape(g, -1)[0]) / diff.size)]
