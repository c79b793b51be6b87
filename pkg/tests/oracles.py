"""
Independent reference implementations used by the tests.

Nothing here imports tnkit: every oracle is a plain loop or a direct
numpy.linalg call, so agreement with the library is meaningful.
"""

import itertools

import numpy as np


def loop_tensordot(a, b, axes_a, axes_b):
    """Nested-loop contraction; free axes of ``a`` first, then of ``b``."""
    free_a = [i for i in range(a.ndim) if i not in axes_a]
    free_b = [i for i in range(b.ndim) if i not in axes_b]
    out_shape = tuple(a.shape[i] for i in free_a) + tuple(b.shape[i] for i in free_b)
    summed = [a.shape[i] for i in axes_a]
    out = np.zeros(out_shape)
    for idx in itertools.product(*map(range, out_shape)):
        ia, ib = idx[:len(free_a)], idx[len(free_a):]
        total = 0.0
        for k in itertools.product(*map(range, summed)):
            pa, pb = [0] * a.ndim, [0] * b.ndim
            for p, v in zip(free_a, ia):
                pa[p] = v
            for p, v in zip(axes_a, k):
                pa[p] = v
            for p, v in zip(free_b, ib):
                pb[p] = v
            for p, v in zip(axes_b, k):
                pb[p] = v
            total += a[tuple(pa)] * b[tuple(pb)]
        out[idx] = total
    return out


def loop_batched_contract(a, b, pairs, batch_pairs):
    """
    Contract ``a`` and ``b`` summing over ``pairs`` and matching ``batch_pairs``.

    Result axes follow the library convention: the surviving axes of ``a`` in
    order (batch axes included), then the free axes of ``b``.
    """
    ca = [p[0] for p in pairs]
    cb = [p[1] for p in pairs]
    ba = [p[0] for p in batch_pairs]
    bb = [p[1] for p in batch_pairs]
    keep_a = [i for i in range(a.ndim) if i not in ca]
    free_b = [j for j in range(b.ndim) if j not in cb and j not in bb]
    out_shape = tuple(a.shape[i] for i in keep_a) + tuple(b.shape[j] for j in free_b)
    out = np.zeros(out_shape)
    summed = [a.shape[i] for i in ca]
    for idx in itertools.product(*map(range, out_shape)):
        pa, pb = [0] * a.ndim, [0] * b.ndim
        for p, v in zip(keep_a, idx[:len(keep_a)]):
            pa[p] = v
        for p, v in zip(free_b, idx[len(keep_a):]):
            pb[p] = v
        for ia, jb in zip(ba, bb):
            pb[jb] = pa[ia]
        total = 0.0
        for k in itertools.product(*map(range, summed)):
            for p, v in zip(ca, k):
                pa[p] = v
            for p, v in zip(cb, k):
                pb[p] = v
            total += a[tuple(pa)] * b[tuple(pb)]
        out[idx] = total
    return out


def chain_product(mats, left, right):
    """``left^T M_1 M_2 ... M_n right`` with explicit matrix products."""
    v = np.asarray(left, dtype=float)
    for m in mats:
        v = v @ m
    return float(v @ right)


def mps_dense(cores, left=None, right=None):
    """Dense vector of an MPS, one amplitude per basis state (row-major)."""
    left = np.ones(cores[0].shape[0]) if left is None else left
    right = np.ones(cores[-1].shape[-1]) if right is None else right
    dims = [c.shape[1] for c in cores]
    out = np.zeros(dims)
    for idx in itertools.product(*map(range, dims)):
        out[idx] = chain_product([c[:, i, :] for c, i in zip(cores, idx)], left, right)
    return out.reshape(-1)


def layer_forward(cores, out_position, x, left=None, right=None):
    """
    Loop oracle for an MPS layer: ``x`` is ``(batch, n_inputs, d)``.

    Returns ``(batch, out_dim)``; each entry is one chain of matrix products.
    """
    left = np.ones(cores[0].shape[0]) if left is None else left
    right = np.ones(cores[-1].shape[-1]) if right is None else right
    out_dim = cores[out_position].shape[1]
    inputs = [c for i, c in enumerate(cores) if i != out_position]
    res = np.zeros((x.shape[0], out_dim))
    for b in range(x.shape[0]):
        mats_in = [sum(x[b, k, j] * c[:, j, :] for j in range(c.shape[1]))
                   for k, c in enumerate(inputs)]
        for o in range(out_dim):
            mats = list(mats_in)
            mats.insert(out_position, cores[out_position][:, o, :])
            res[b, o] = chain_product(mats, left, right)
    return res


def mps_forward(cores, x, left=None, right=None):
    """Loop oracle for an MPS applied to ``(batch, n, d)`` data: ``(batch,)``."""
    left = np.ones(cores[0].shape[0]) if left is None else left
    right = np.ones(cores[-1].shape[-1]) if right is None else right
    out = np.zeros(x.shape[0])
    for b in range(x.shape[0]):
        mats = [sum(x[b, k, j] * c[:, j, :] for j in range(c.shape[1]))
                for k, c in enumerate(cores)]
        out[b] = chain_product(mats, left, right)
    return out


def mpo_dense(cores):
    """Dense ``(prod out, prod in)`` matrix of an MPO by looping over all indices."""
    outs = [c.shape[1] for c in cores]
    ins = [c.shape[2] for c in cores]
    mat = np.zeros((int(np.prod(outs)), int(np.prod(ins))))
    for r, o_idx in enumerate(itertools.product(*map(range, outs))):
        for c, i_idx in enumerate(itertools.product(*map(range, ins))):
            mats = [core[:, o, i, :] for core, o, i in zip(cores, o_idx, i_idx)]
            mat[r, c] = chain_product(mats, np.ones(1), np.ones(1))
    return mat


def partial_trace_rdm(psi, dims, sites):
    """Reduced density matrix of ``sites`` (contiguous) from a dense vector."""
    psi = np.asarray(psi, dtype=float).reshape(dims)
    psi = psi / np.linalg.norm(psi)
    lo, hi = sites[0], sites[-1] + 1
    left = int(np.prod(dims[:lo]))
    mid = int(np.prod(dims[lo:hi]))
    right = int(np.prod(dims[hi:]))
    m = psi.reshape(left, mid, right)
    rho = np.zeros((mid, mid))
    for a in range(left):
        for c in range(right):
            rho += np.outer(m[a, :, c], m[a, :, c])
    return rho


def bipartite_entropy(psi, dims, cut):
    """Von Neumann entropy across ``cut`` from numpy's SVD of the dense state."""
    psi = np.asarray(psi, dtype=float).reshape(-1)
    mat = psi.reshape(int(np.prod(dims[:cut])), -1)
    s = np.linalg.svd(mat, compute_uv=False)
    p = s ** 2 / np.sum(s ** 2)
    p = p[p > 1e-300]
    return float(-np.sum(p * np.log(p)))


def finite_difference(f, x, h=1e-6):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g
