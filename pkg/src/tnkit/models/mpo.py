"""
Matrix product operators: trainable MPO networks, MPS-MPO contraction and
tensorization of dense matrices.

MPO cores have shape ``(D_left, out, in, D_right)``. The dense matrix of an
MPO has rows indexed by ``(out_1, ..., out_n)`` and columns by
``(in_1, ..., in_n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from tnkit import tensor_core as tc
from tnkit.models.mps import MPS, ChainNetwork, _bonds, _init_core, _rng
from tnkit.network import Node
from tnkit.operations import permute_node

__all__ = ["MPO", "UMPO", "mps_mpo_contract", "mpo_to_dense", "mps_to_dense",
           "tensorize_matrix", "TensorizeResult"]


class _OperatorChain(ChainNetwork):
    """Chain of rank-4 cores applied to ``(batch, n, in)`` data."""

    def contract(self, **_) -> Node:
        data = list(self.data_nodes.values())
        result = self.left_border
        for site, d in zip(self.sites, data):
            result = (result @ site) @ d
        result = result @ self.right_border
        outs = [n for n in result.axes_names if n.startswith("output")]
        order = [n for n in result.axes_names if "batch" in n] + outs
        if order != result.axes_names:
            result = permute_node(result, order)
        return result

    def matrix(self) -> np.ndarray:
        return mpo_to_dense(self.cores(), self.left_border.tensor, self.right_border.tensor)


class MPO(_OperatorChain):
    """
    Matrix product operator with size-1 outer bonds.

    The forward pass maps ``(batch, n, in_dim)`` to ``(batch, out_dim, ..., out_dim)``
    (one output axis per site).
    """

    def __init__(self, n_features: Optional[int] = None, in_dim: Optional[int] = None,
                 out_dim: Optional[int] = None, bond_dim=None, init_std: float = 1e-9,
                 seed=None, tensors: Optional[Sequence[np.ndarray]] = None,
                 init_method: str = "randn_eye",
                 auto_stack: bool = True, auto_unbind: bool = False, name: str = "mpo"):
        super().__init__(name, auto_stack, auto_unbind)
        if tensors is None:
            if None in (n_features, in_dim, out_dim, bond_dim):
                raise ValueError("give n_features, in_dim, out_dim and bond_dim, or tensors")
            if n_features < 1:
                raise ValueError("an MPO needs at least one site")
            full = [1] + _bonds(n_features, bond_dim) + [1]
            rng = _rng(seed)
            tensors = [_init_core((full[i], out_dim, in_dim, full[i + 1]), init_std, rng, init_method)
                       for i in range(n_features)]
        tensors = [tc.as_tensor(t) for t in tensors]
        _check_operator_chain(tensors)
        for i, t in enumerate(tensors):
            self.sites.append(Node(tensor=t, axes_names=("left", "output", "input", "right"),
                                   name=f"site_{i}", network=self, role="param"))
        self.input_positions = list(range(len(tensors)))
        self._connect_chain(np.ones(1), np.ones(1))

    @classmethod
    def from_cores(cls, cores: Sequence[np.ndarray], **kwargs) -> "MPO":
        return cls(tensors=cores, **kwargs)


class UMPO(_OperatorChain):
    """Uniform MPO: all sites share one ``(D, out, in, D)`` core, closed by ``e_0``."""

    def __init__(self, n_features: int, in_dim: int, out_dim: int, bond_dim: int,
                 init_std: float = 1e-9, seed=None, tensor: Optional[np.ndarray] = None,
                 init_method: str = "randn_eye",
                 auto_stack: bool = True, auto_unbind: bool = False, name: str = "umpo"):
        super().__init__(name, auto_stack, auto_unbind)
        if n_features < 1:
            raise ValueError("a uniform MPO needs at least one site")
        shape = (bond_dim, out_dim, in_dim, bond_dim)
        if tensor is None:
            tensor = _init_core(shape, init_std, _rng(seed), init_method)
        tensor = tc.as_tensor(tensor)
        if tensor.shape != shape:
            raise ValueError(f"core must have shape {shape}, got {tensor.shape}")
        axes = ("left", "output", "input", "right")
        self.uniform_node = Node(tensor=tensor, axes_names=axes, name="virtual_uniform",
                                 network=self, role="virtual")
        for i in range(n_features):
            site = Node(shape, axes, name=f"site_{i}", network=self, role="param")
            site.set_tensor_from(self.uniform_node)
            self.sites.append(site)
        self.input_positions = list(range(n_features))
        e0 = np.zeros(bond_dim)
        e0[0] = 1.0
        self._connect_chain(e0, e0.copy())


def _check_operator_chain(tensors: Sequence[np.ndarray]) -> None:
    if not tensors:
        raise ValueError("an MPO needs at least one core")
    for i, t in enumerate(tensors):
        if t.ndim != 4:
            raise ValueError(f"MPO core {i} must have rank 4, got shape {t.shape}")
    if tensors[0].shape[0] != 1 or tensors[-1].shape[-1] != 1:
        raise ValueError("outer bonds of the MPO must have size 1")
    for i, (a, b) in enumerate(zip(tensors[:-1], tensors[1:])):
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"bond {i} has sizes {a.shape[-1]} and {b.shape[0]}")


###############################################################################
#                              DENSE CONVERSIONS                              #
###############################################################################
def mps_to_dense(cores: Sequence[np.ndarray]) -> np.ndarray:
    """Dense vector (row-major over sites) of an MPS chain closed by ones vectors."""
    out = np.ones((1, cores[0].shape[0]))
    for core in cores:
        out = np.tensordot(out, core, axes=([1], [0])).reshape(-1, core.shape[-1])
    return out @ np.ones(out.shape[1])


def mpo_to_dense(cores: Sequence[np.ndarray], left: Optional[np.ndarray] = None,
                 right: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense ``(prod out, prod in)`` matrix of an MPO."""
    left = np.ones(cores[0].shape[0]) if left is None else left
    right = np.ones(cores[-1].shape[-1]) if right is None else right
    rows, cols = 1, 1
    acc = left.reshape(1, 1, -1)                      # (rows, cols, bond)
    for core in cores:
        _, o, i, _ = core.shape
        acc = np.tensordot(acc, core, axes=([2], [0]))  # (rows, cols, o, i, r)
        acc = acc.transpose(0, 2, 1, 3, 4)
        rows, cols = rows * o, cols * i
        acc = acc.reshape(rows, cols, -1)
    return acc @ right


###############################################################################
#                              MPS-MPO CONTRACTION                            #
###############################################################################
def mps_mpo_contract(mps: MPS, mpo: MPO) -> MPS:
    """
    Apply ``mpo`` to ``mps`` site by site.

    Each output core ``C[(a, al), o, (b, be)] = sum_i A[a, i, b] W[al, o, i, be]``
    costs ``D_mps^2 D_mpo^2 d_in d_out`` multiply-adds. The bond dimensions
    of the result are the products of the input bond dimensions.
    """
    a_cores, w_cores = mps.cores(), mpo.cores()
    if len(a_cores) != len(w_cores):
        raise ValueError(f"MPS has {len(a_cores)} sites but MPO has {len(w_cores)}")
    out = []
    for k, (a, w) in enumerate(zip(a_cores, w_cores)):
        if a.shape[1] != w.shape[2]:
            raise ValueError(f"site {k}: MPS dimension {a.shape[1]} != MPO input {w.shape[2]}")
        c = tc.tensordot(a, w, [1], [2])               # (a, b, al, o, be)
        c = tc.permute(c, [0, 2, 3, 1, 4])              # (a, al, o, b, be)
        da, dal, o, db, dbe = c.shape
        out.append(tc.reshape(c, (da * dal, o, db * dbe)))
    return MPS(tensors=out)


###############################################################################
#                                TENSORIZATION                                #
###############################################################################
@dataclass
class TensorizeResult:
    """Cores of the tensorized matrix plus bookkeeping."""

    cores: List[np.ndarray]
    truncation_error: float
    discarded: List[np.ndarray]

    @property
    def bond_dims(self) -> List[int]:
        return [c.shape[-1] for c in self.cores[:-1]]

    @property
    def n_elements(self) -> int:
        return int(sum(c.size for c in self.cores))

    def to_dense(self) -> np.ndarray:
        return mpo_to_dense(self.cores)

    def to_mpo(self, **kwargs) -> MPO:
        return MPO(tensors=self.cores, **kwargs)


def tensorize_matrix(w, n: int, d: int, max_rank: Optional[int] = None,
                     cum_percentage: Optional[float] = None,
                     rel_cutoff: float = 1e-13) -> TensorizeResult:
    """
    Decompose a ``(d^n, d^n)`` matrix into ``n`` MPO cores by sequential SVD.

    Singular values below ``rel_cutoff`` times the largest one are treated as
    numerical zeros and dropped. The Frobenius reconstruction error equals the
    square root of the sum of all discarded squared singular values.
    """
    w = tc.as_tensor(w)
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    size = d ** n
    if w.shape != (size, size):
        raise ValueError(f"matrix must be {size}x{size} for n={n}, d={d}; got {w.shape}")
    t = w.reshape([d] * (2 * n))
    perm = [x for k in range(n) for x in (k, n + k)]   # (o1, i1, o2, i2, ...)
    rest = tc.permute(t, perm).reshape(1, -1)
    cores, discarded = [], []
    left = 1
    for k in range(n - 1):
        mat = rest.reshape(left * d * d, -1)
        res = tc.svd(mat)
        s = res.s
        keep = int(np.sum(s > rel_cutoff * s[0])) if s.size and s[0] > 0 else 1
        keep = max(keep, 1)
        if max_rank is not None or cum_percentage is not None:
            keep = min(keep, tc._choose_rank(s, max_rank, cum_percentage))
        discarded.append(s[keep:].copy())
        cores.append(res.u[:, :keep].reshape(left, d, d, keep))
        rest = s[:keep, None] * res.vt[:keep]
        left = keep
    cores.append(rest.reshape(left, d, d, 1))
    err = float(np.sqrt(sum(float(np.sum(x ** 2)) for x in discarded)))
    return TensorizeResult(cores, err, discarded)
