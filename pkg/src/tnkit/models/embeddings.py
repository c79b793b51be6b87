"""
Feature maps turning ``(batch, n)`` data into ``(batch, n, d)`` input vectors.

All functions return float64 arrays ready for :meth:`TensorNetwork.forward`.
"""

from __future__ import annotations

from math import comb

import numpy as np

__all__ = ["unit", "add_ones", "poly", "discretize", "basis", "embed", "EMBEDDINGS"]


def _unit_interval(data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected data of shape (batch, n), got {x.shape}")
    if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("embedding expects values in [0, 1]")
    return x


def unit(data, dim: int = 2) -> np.ndarray:
    """
    Spin-coherent map ``sqrt(C(d-1, k)) cos(pi x/2)^(d-1-k) sin(pi x/2)^k``.

    For ``dim=2`` this is ``(cos(pi x/2), sin(pi x/2))``; every output vector
    has unit norm.
    """
    if dim < 2:
        raise ValueError("unit embedding needs dim >= 2")
    x = _unit_interval(data)
    c, s = np.cos(np.pi * x / 2), np.sin(np.pi * x / 2)
    k = np.arange(dim)
    coef = np.sqrt([comb(dim - 1, int(j)) for j in k])
    return coef * c[..., None] ** (dim - 1 - k) * s[..., None] ** k


def add_ones(data, dim: int = 2) -> np.ndarray:
    """``(1, x)`` for each feature."""
    if dim != 2:
        raise ValueError("add_ones embedding is two-dimensional (dim=2)")
    x = _unit_interval(data)
    return np.stack([np.ones_like(x), x], axis=-1)


def poly(data, dim: int = 2) -> np.ndarray:
    """Powers ``(1, x, ..., x^(dim-1))``."""
    if dim < 1:
        raise ValueError("poly embedding needs dim >= 1")
    x = _unit_interval(data)
    return x[..., None] ** np.arange(dim)


def basis(data, dim: int) -> np.ndarray:
    """One-hot vectors of integer data in ``[0, dim)``."""
    k = np.asarray(data)
    if k.ndim != 2:
        raise ValueError(f"expected data of shape (batch, n), got {k.shape}")
    if not np.all(np.equal(np.mod(k, 1), 0)):
        raise ValueError("basis embedding expects integer values")
    k = k.astype(np.int64)
    if np.any(k < 0) or np.any(k >= dim):
        raise ValueError(f"basis embedding expects values in [0, {dim})")
    return np.eye(dim)[k]


def discretize(data, dim: int) -> np.ndarray:
    """One-hot of the bin ``floor(x * dim)``, with ``x = 1`` in the last bin."""
    x = _unit_interval(data)
    return basis(np.minimum(np.floor(x * dim), dim - 1), dim)


EMBEDDINGS = {
    "unit": unit,
    "add_ones": add_ones,
    "poly": poly,
    "discretize": discretize,
    "basis": basis,
}


def embed(data, mode: str = "unit", dim: int = 2) -> np.ndarray:
    try:
        fn = EMBEDDINGS[mode]
    except KeyError:
        raise ValueError(f"unknown embedding {mode!r}; choose from {sorted(EMBEDDINGS)}") from None
    return fn(data, dim)
