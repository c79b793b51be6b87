"""
Canonical forms, entanglement entropy and reduced density matrices of MPS chains.

The functions accept a :class:`~tnkit.models.mps.ChainNetwork` (MPS or
MPSLayer, whose output core is treated as one more site) or a plain list of
``(D_left, d, D_right)`` cores with size-1 outer bonds.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

import numpy as np

from tnkit import autodiff as ad
from tnkit import tensor_core as tc
from tnkit.models.mps import ChainNetwork

__all__ = ["canonicalize", "canonical_cores", "entanglement_entropy",
           "reduced_density_matrix"]

Chain = Union[ChainNetwork, Sequence[np.ndarray]]


def _cores_of(chain: Chain) -> List[np.ndarray]:
    if isinstance(chain, ChainNetwork):
        return chain.cores()
    return [np.array(c, dtype=np.float64) for c in chain]


def _factor_left(mat: np.ndarray, mode: str, rank, cum) -> tuple:
    """``mat = q @ r`` with orthonormal columns in ``q``."""
    if mode == "qr":
        return tc.qr(mat)
    res = tc.svd(mat, max_rank=rank, cum_percentage=cum)
    return res.u, res.s[:, None] * res.vt


def canonical_cores(cores: Sequence[np.ndarray], center: int, mode: str = "qr",
                    max_rank: Optional[int] = None,
                    cum_percentage: Optional[float] = None) -> List[np.ndarray]:
    """
    Return cores in mixed canonical form around ``center``.

    Cores left of ``center`` become left isometries, cores right of it right
    isometries; ``center`` carries the norm. ``mode="svd"`` allows truncation
    through ``max_rank`` / ``cum_percentage``.
    """
    if mode not in ("qr", "svd"):
        raise ValueError(f"unknown canonicalization mode {mode!r}")
    if mode == "qr" and (max_rank is not None or cum_percentage is not None):
        raise ValueError("qr canonicalization cannot truncate; use mode='svd'")
    cores = [np.array(c, dtype=np.float64) for c in cores]
    n = len(cores)
    if not 0 <= center < n:
        raise ValueError(f"center must lie in [0, {n})")
    for i in range(center):
        c = cores[i]
        q, r = _factor_left(c.reshape(-1, c.shape[-1]), mode, max_rank, cum_percentage)
        cores[i] = q.reshape(c.shape[:-1] + (q.shape[1],))
        cores[i + 1] = np.tensordot(r, cores[i + 1], axes=([1], [0]))
    for i in range(n - 1, center, -1):
        c = cores[i]
        q, r = _factor_left(c.reshape(c.shape[0], -1).T, mode, max_rank, cum_percentage)
        cores[i] = q.T.reshape((q.shape[1],) + c.shape[1:])
        cores[i - 1] = np.tensordot(cores[i - 1], r.T, axes=([cores[i - 1].ndim - 1], [0]))
    return cores


def canonicalize(chain: ChainNetwork, center: Optional[int] = None, mode: str = "qr",
                 max_rank: Optional[int] = None,
                 cum_percentage: Optional[float] = None) -> None:
    """
    Bring the cores of ``chain`` into mixed canonical form in place.

    The network is reset first, and bond sizes may change (they shrink where
    a bond exceeds the dimension of its side, or under truncation).
    Without truncation the represented tensor is unchanged.
    """
    if center is None:
        center = chain.out_position if chain.out_position is not None else 0
    chain.reset()
    with ad.no_grad():
        new = canonical_cores(chain.cores(), center, mode, max_rank, cum_percentage)
        chain.set_tensors(dict(zip(chain.sites, new)))


def _schmidt_values(cores: List[np.ndarray], cut: int) -> np.ndarray:
    n = len(cores)
    if not 1 <= cut < n:
        raise ValueError(f"cut must lie in [1, {n})")
    cores = canonical_cores(cores, cut)
    c = cores[cut]
    s = tc.svd(c.reshape(c.shape[0], -1)).s
    norm = np.linalg.norm(s)
    if norm == 0:
        raise ValueError("the state has zero norm")
    return s / norm


def entanglement_entropy(chain: Chain, cut: int) -> float:
    """
    Von Neumann entropy ``-sum l^2 ln l^2`` across the bond before site ``cut``.

    The state is normalized internally.
    """
    lam2 = _schmidt_values(_cores_of(chain), cut) ** 2
    lam2 = lam2[lam2 > 0]
    return float(-np.sum(lam2 * np.log(lam2)))


def reduced_density_matrix(chain: Chain, sites: Sequence[int], max_dim: int = 64) -> np.ndarray:
    """
    Reduced density matrix of the contiguous block ``sites`` (trace 1).

    The block dimension ``prod(d_i)`` must not exceed ``max_dim``.
    """
    cores = _cores_of(chain)
    sites = list(sites)
    if not sites:
        raise ValueError("need at least one site")
    if sites != list(range(sites[0], sites[0] + len(sites))):
        raise ValueError(f"sites {sites} are not a contiguous increasing range")
    if sites[0] < 0 or sites[-1] >= len(cores):
        raise ValueError(f"sites out of range for a chain of {len(cores)}")
    dim = int(np.prod([cores[i].shape[1] for i in sites]))
    if dim > max_dim:
        raise ValueError(f"block dimension {dim} exceeds the limit {max_dim}")
    cores = canonical_cores(cores, sites[0])
    block = cores[sites[0]]
    for i in sites[1:]:
        block = np.tensordot(block, cores[i], axes=([block.ndim - 1], [0]))
    mat = block.reshape(block.shape[0], dim, block.shape[-1])
    rho = np.einsum("lpr,lqr->pq", mat, mat)
    tr = np.trace(rho)
    if tr <= 0:
        raise ValueError("the state has zero norm")
    return rho / tr
