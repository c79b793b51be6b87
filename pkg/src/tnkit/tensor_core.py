"""
Dense tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Every function here returns a fresh array or a read-only view and never
mutates its inputs. Shapes are checked explicitly; there is no broadcasting.

Besides the arithmetic kernels, the module keeps a small set of instrumented
counters (:data:`counters`) so that callers can bound the amount of work done
by a contraction routine.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

Tensor = np.ndarray

__all__ = [
    "Tensor", "SvdResult", "KernelCounters", "counters", "count_kernels",
    "as_tensor", "zeros", "ones", "constant", "randn", "frobenius_norm",
    "tensordot", "batched_matmul", "permute", "reshape", "outer",
    "elementwise_binary", "add", "sub", "mul", "div",
    "svd", "qr", "stack_tensors", "unbind_tensor", "take",
]


###############################################################################
#                                 COUNTERS                                    #
###############################################################################
@dataclass
class KernelCounters:
    """Multiply-add counts accumulated by the contraction kernels."""
    tensordot_madds: int = 0
    matmul_madds: int = 0
    calls: dict = field(default_factory=dict)

    @property
    def total_madds(self) -> int:
        return self.tensordot_madds + self.matmul_madds

    def reset(self) -> None:
        self.tensordot_madds = 0
        self.matmul_madds = 0
        self.calls = {}

    def _tick(self, name: str) -> None:
        self.calls[name] = self.calls.get(name, 0) + 1


counters = KernelCounters()
_scopes: List[KernelCounters] = []


def _record(kernel: str, tensordot_madds: int = 0, matmul_madds: int = 0) -> None:
    for c in [counters] + _scopes:
        c.tensordot_madds += tensordot_madds
        c.matmul_madds += matmul_madds
        c._tick(kernel)


@contextlib.contextmanager
def count_kernels() -> Iterator[KernelCounters]:
    """Yield a counter that sees only the kernels run inside the block."""
    scope = KernelCounters()
    _scopes.append(scope)
    try:
        yield scope
    finally:
        _scopes.remove(scope)


###############################################################################
#                               CONSTRUCTORS                                  #
###############################################################################
def as_tensor(x) -> Tensor:
    """Coerce ``x`` to a C-contiguous float64 array (copying only if needed)."""
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be positive, got {shape}")
    return shape


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape))


def ones(shape: Sequence[int]) -> Tensor:
    return np.ones(_check_shape(shape))


def constant(shape: Sequence[int], value: float) -> Tensor:
    return np.full(_check_shape(shape), float(value))


def randn(shape: Sequence[int],
          rng: Optional[np.random.Generator] = None,
          std: float = 1.0) -> Tensor:
    """Gaussian tensor; ``rng`` may be a Generator or an integer seed."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return std * rng.standard_normal(_check_shape(shape))


def frobenius_norm(a: Tensor) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


###############################################################################
#                                CONTRACTION                                  #
###############################################################################
def _normalize_axes(axes: Sequence[int], rank: int, what: str) -> List[int]:
    out = []
    for ax in axes:
        ax = int(ax)
        if ax < -rank or ax >= rank:
            raise ValueError(f"axis {ax} out of range for {what} of rank {rank}")
        out.append(ax % rank)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes {list(axes)} for {what}")
    return out


def tensordot(a: Tensor, b: Tensor,
              axes_a: Sequence[int], axes_b: Sequence[int]) -> Tensor:
    """
    Contract ``a`` and ``b`` over paired axes.

    The remaining axes of ``a`` come first, then the remaining axes of ``b``,
    each group in its original order.
    """
    axes_a = _normalize_axes(axes_a, a.ndim, "a")
    axes_b = _normalize_axes(axes_b, b.ndim, "b")
    if len(axes_a) != len(axes_b):
        raise ValueError("axes_a and axes_b must have the same length")
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise ValueError(f"dimension mismatch contracting axis {i} "
                             f"(size {a.shape[i]}) with axis {j} "
                             f"(size {b.shape[j]})")
    free = math.prod(a.shape) * math.prod(b.shape)
    contracted = math.prod(a.shape[i] for i in axes_a)
    _record("tensordot", tensordot_madds=free // max(contracted, 1))
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Slice-wise matrix product of ``(B, m, k)`` and ``(B, k, n)`` arrays."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("batched_matmul expects rank-3 operands")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ValueError(f"inner dimension mismatch: {a.shape[2]} vs {b.shape[1]}")
    _record("batched_matmul", matmul_madds=a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return np.matmul(a, b)


def permute(a: Tensor, perm: Sequence[int]) -> Tensor:
    """Materialized transpose: ``result.shape[k] == a.shape[perm[k]]``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(a.ndim)):
        raise ValueError(f"{perm} is not a permutation of range({a.ndim})")
    if perm == list(range(a.ndim)):
        return a
    return np.ascontiguousarray(np.transpose(a, perm))


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != a.size:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) "
                         f"into {new_shape}")
    return np.reshape(np.ascontiguousarray(a), new_shape)


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Tensor product; result has rank ``a.ndim + b.ndim``."""
    _record("outer")
    return np.multiply.outer(a, b)


###############################################################################
#                                ELEMENTWISE                                  #
###############################################################################
def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} "
                         "(broadcasting is not supported)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return a * b


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    if np.any(b == 0):
        raise ZeroDivisionError("division by a tensor with zero entries")
    return a / b


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise_binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


###############################################################################
#                              STACK / UNBIND                                 #
###############################################################################
def stack_tensors(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 0:
        raise ValueError("cannot stack an empty list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"cannot stack tensors of shapes {shape} and {t.shape}")
    return np.stack(tensors)


def unbind_tensor(a: Tensor, copy: bool = False) -> List[Tensor]:
    """Split the leading axis; returns views unless ``copy`` is set."""
    if a.ndim == 0:
        raise ValueError("cannot unbind a scalar")
    if copy:
        return [np.array(a[i]) for i in range(a.shape[0])]
    return [a[i] for i in range(a.shape[0])]


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select ``index`` (an int or a slice) along ``axis``."""
    axis = _normalize_axes([axis], a.ndim, "a")[0]
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    return a[tuple(sl)]


###############################################################################
#                              DECOMPOSITIONS                                 #
###############################################################################
@dataclass
class SvdResult:
    u: Tensor
    s: np.ndarray
    vt: Tensor
    truncation_error: float

    @property
    def rank(self) -> int:
        return len(self.s)

    def reconstruct(self) -> Tensor:
        return (self.u * self.s) @ self.vt


# Jacobi convergence threshold and sweep cap.
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint column pairs covering every pair exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i >= 0 and j >= 0:
                p.append(min(i, j))
                q.append(max(i, j))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: Tensor) -> Tuple[Tensor, np.ndarray, Tensor]:
    """One-sided Jacobi on the columns of a tall matrix ``a`` (m >= n).

    Returns ``(w, sigma, v)`` with ``a @ v == w`` and the columns of ``w``
    mutually orthogonal, ``sigma`` their norms (unsorted).
    """
    w = np.array(a, dtype=np.float64)
    n = w.shape[1]
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            active = off >= _JACOBI_TOL
            if not np.any(active):
                continue
            worst = max(worst, float(off.max()))
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if worst < _JACOBI_TOL:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    return w, sigma, v


def _complete_orthonormal(u: Tensor, good: np.ndarray) -> Tensor:
    """Replace columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    u = u.copy()
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    candidates = iter(np.eye(m))
    for j in range(u.shape[1]):
        if good[j]:
            continue
        while True:
            e = next(candidates)
            for _ in range(2):
                for b in basis:
                    e = e - (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e = e / nrm
                break
        u[:, j] = e
        basis.append(e)
    return u


def _choose_rank(s: np.ndarray,
                 max_rank: Optional[int],
                 cum_percentage: Optional[float]) -> int:
    k = len(s)
    if max_rank is not None:
        k = min(k, int(max_rank))
    if cum_percentage is not None:
        sq = np.cumsum(s * s)
        total = sq[-1] if len(sq) else 0.0
        if total > 0:
            k_cum = int(np.searchsorted(sq >= cum_percentage * total, True)) + 1
        else:
            k_cum = 1
        k = min(k, k_cum)
    return max(k, 1)


def svd(a: Tensor,
        max_rank: Optional[int] = None,
        cum_percentage: Optional[float] = None) -> SvdResult:
    """
    Singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    a : Tensor
        Matrix of shape ``(m, n)``.
    max_rank : int, optional
        Keep at most this many singular values.
    cum_percentage : float, optional
        Keep the smallest number ``k`` of singular values whose squared sum
        reaches this fraction of the total squared sum. When both criteria are
        given, the smaller rank wins.

    Returns
    -------
    SvdResult
        ``u`` (m, k), ``s`` (k,), ``vt`` (k, n) and the Frobenius norm of the
        discarded part. Each singular pair is signed so that the entry of
        largest magnitude in the ``u`` column is positive.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"svd expects a matrix, got rank {a.ndim}")
    if max_rank is not None and int(max_rank) < 1:
        raise ValueError("max_rank must be at least 1")
    if cum_percentage is not None and not 0.0 < cum_percentage <= 1.0:
        raise ValueError("cum_percentage must lie in (0, 1]")
    m, n = a.shape
    if m >= n:
        w, sigma, v = _jacobi_tall(a)
    else:
        w, sigma, v = _jacobi_tall(a.T)

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    # Exactly-zero columns carry no direction; complete them to an orthonormal set.
    zero = sigma == 0.0
    left = w / np.where(zero, 1.0, sigma)
    if np.any(zero):
        left = _complete_orthonormal(left, ~zero)

    # ``left`` spans the long side, ``v`` the short side.
    if m >= n:
        u, vt = left, v.T
    else:
        u, vt = v, left.T

    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]

    k = _choose_rank(sigma, max_rank, cum_percentage)
    err = float(np.sqrt(np.sum(sigma[k:] ** 2)))
    return SvdResult(np.ascontiguousarray(u[:, :k]), sigma[:k].copy(),
                     np.ascontiguousarray(vt[:k]), err)


def qr(a: Tensor) -> Tuple[Tensor, Tensor]:
    """Reduced QR with the diagonal of ``r`` made non-negative."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"qr expects a matrix, got rank {a.ndim}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    r = r * signs[:, None]
    return np.ascontiguousarray(q), np.ascontiguousarray(r)
