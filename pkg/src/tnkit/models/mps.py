"""
Matrix product states as trainable networks.

:class:`MPS` contracts ``n`` input vectors into one number per batch element,
:class:`MPSLayer` adds an output core whose dangling ``output`` edge carries
the class scores, and :class:`UMPS` stores a single core shared by every site.

Every chain contracts in two phases, selected by ``inline_input`` and
``inline_mats``:

* input phase: each data node is contracted with its core, giving one
  ``(batch, left, right)`` matrix per site. Inline does this site by site;
  otherwise equally shaped cores are stacked and handled in one batched
  contraction, then unbound.
* matrix phase: the matrices are multiplied towards the output core. Inline
  multiplies them one after the other; otherwise the chain is halved
  repeatedly (stack even and odd matrices, contract in parallel, unbind).

With both flags on, the two phases are fused into a single sweep
``((env @ core_i) @ data_i)`` that never materializes a per-site matrix,
which is the most memory-friendly path.
"""

from __future__ import annotations

from math import ceil
from typing import Dict, List, Optional, Sequence

import numpy as np

from tnkit import tensor_core as tc
from tnkit.network import Node, TensorNetwork, connect
from tnkit.operations import permute_node, stack, unbind

__all__ = ["MPS", "MPSLayer", "UMPS", "ChainNetwork", "eye_plus_noise"]


def eye_plus_noise(shape: Sequence[int], std: float, rng: np.random.Generator) -> np.ndarray:
    """Identity on the (first, last) bond plane, copied across middle axes, plus noise."""
    shape = tuple(shape)
    eye = np.eye(shape[0], shape[-1])
    core = np.broadcast_to(eye.reshape((shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],)),
                           shape).copy()
    if std > 0:
        core += rng.normal(0.0, std, size=shape)
    return core


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class ChainNetwork(TensorNetwork):
    """
    Open chain of cores ``(left, ..., right)`` closed by two border vectors.

    Subclasses fill :attr:`sites`, :attr:`input_positions` and optionally
    :attr:`out_position`, then call :meth:`_connect_chain`.
    """

    def __init__(self, name: str, auto_stack: bool = True, auto_unbind: bool = False,
                 inline_input: bool = False, inline_mats: bool = False):
        super().__init__(name=name, auto_stack=auto_stack, auto_unbind=auto_unbind)
        self.inline_input = inline_input
        self.inline_mats = inline_mats
        self.sites: List[Node] = []
        self.input_positions: List[int] = []
        self.out_position: Optional[int] = None
        self.left_border: Optional[Node] = None
        self.right_border: Optional[Node] = None

    # ---------------------------------------------------------------- build
    def _connect_chain(self, left_vec: np.ndarray, right_vec: np.ndarray) -> None:
        for a, b in zip(self.sites[:-1], self.sites[1:]):
            connect(a["right"], b["left"])
        self.left_border = Node(tensor=left_vec, axes_names=("right",), name="left_border",
                                network=self, role="leaf")
        self.right_border = Node(tensor=right_vec, axes_names=("left",), name="right_border",
                                 network=self, role="leaf")
        connect(self.left_border["right"], self.sites[0]["left"])
        connect(self.right_border["left"], self.sites[-1]["right"])

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def set_data_nodes(self, input_edges=None, num_batch_edges: int = 1) -> None:
        if input_edges is None:
            input_edges = [self.sites[p]["input"] for p in self.input_positions]
        super().set_data_nodes(input_edges, num_batch_edges)

    def cores(self) -> List[np.ndarray]:
        """Copies of the core tensors in chain order."""
        return [s.tensor.copy() for s in self.sites]

    def bond_dims(self) -> List[int]:
        return [s.shape[-1] for s in self.sites[:-1]]

    def to_dense(self) -> np.ndarray:
        """Contract the whole chain (without data) into one dense tensor."""
        vec = self.left_border.tensor
        out = vec.reshape(1, -1)
        phys = []
        for core in self.cores():
            phys.extend(core.shape[1:-1])
            out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
            out = out.reshape(-1, core.shape[-1])
        out = out @ self.right_border.tensor
        return out.reshape(phys)

    # ------------------------------------------------------------- contract
    def contract(self, inline_input: Optional[bool] = None,
                 inline_mats: Optional[bool] = None) -> Node:
        ii = self.inline_input if inline_input is None else inline_input
        im = self.inline_mats if inline_mats is None else inline_mats
        data = dict(zip(self.input_positions, self.data_nodes.values()))
        split = self.out_position if self.out_position is not None else ceil(self.n_sites / 2)
        left_pos = [p for p in self.input_positions if p < split]
        right_pos = [p for p in self.input_positions if p > split
                     or (self.out_position is None and p == split)]

        if ii and im:
            left = self.left_border
            for p in left_pos:
                left = (left @ self.sites[p]) @ data[p]
            right = self.right_border
            for p in reversed(right_pos):
                right = (self.sites[p] @ right) @ data[p]
        else:
            mats = self._inline_mats(data) if ii else self._stacked_mats(data)
            left = self._reduce_left([mats[p] for p in left_pos], im)
            right = self._reduce_right([mats[p] for p in right_pos], im)

        if self.out_position is not None:
            result = (left @ self.sites[self.out_position]) @ right
        else:
            result = left @ right
        return self._finalize(result)

    def _finalize(self, result: Node) -> Node:
        order = [n for n in result.axes_names if "batch" in n] + \
                [n for n in result.axes_names if "batch" not in n]
        if order != result.axes_names:
            result = permute_node(result, order)
        return result

    def _inline_mats(self, data: Dict[int, Node]) -> Dict[int, Node]:
        return {p: data[p] @ self.sites[p] for p in self.input_positions}

    def _stacked_mats(self, data: Dict[int, Node]) -> Dict[int, Node]:
        groups: Dict[tuple, List[int]] = {}
        for p in self.input_positions:
            groups.setdefault(self.sites[p].shape, []).append(p)
        mats: Dict[int, Node] = {}
        for positions in groups.values():
            stack_data = stack([data[p] for p in positions])
            stack_sites = stack([self.sites[p] for p in positions])
            connect(stack_data["feature"], stack_sites["input"])
            for p, m in zip(positions, unbind(stack_data @ stack_sites)):
                mats[p] = m
        return mats

    @staticmethod
    def _halve(mats: List[Node]) -> Optional[Node]:
        while len(mats) > 1:
            k = len(mats) // 2
            if len({m.shape for m in mats[:2 * k]}) == 1:
                evens = stack(mats[0:2 * k:2])
                odds = stack(mats[1:2 * k:2])
                connect(evens["right"], odds["left"])
                paired = unbind(evens @ odds)
            else:
                # uneven bonds (e.g. after canonicalize) cannot share a stack
                paired = [a @ b for a, b in zip(mats[0:2 * k:2], mats[1:2 * k:2])]
            mats = paired + mats[2 * k:]
        return mats[0] if mats else None

    def _reduce_left(self, mats: List[Node], inline: bool) -> Node:
        left = self.left_border
        if inline:
            for m in mats:
                left = left @ m
            return left
        if not mats:
            return left
        left = left @ mats[0]
        rest = self._halve(mats[1:])
        return left @ rest if rest is not None else left

    def _reduce_right(self, mats: List[Node], inline: bool) -> Node:
        right = self.right_border
        if inline:
            for m in reversed(mats):
                right = m @ right
            return right
        if not mats:
            return right
        right = mats[-1] @ right
        rest = self._halve(mats[:-1])
        return rest @ right if rest is not None else right


class MPS(ChainNetwork):
    """
    Matrix product state over ``n_features`` input sites.

    Parameters
    ----------
    n_features : int
        Number of sites (one per input feature).
    in_dim : int
        Physical dimension ``d``.
    bond_dim : int or sequence of int
        Bond dimension ``D``, uniform or one per internal bond.
    init_std : float
        Standard deviation of the noise added to the identity initialization.
    seed : int or numpy Generator, optional
        Randomness for the initialization.
    tensors : sequence of arrays, optional
        Explicit cores ``(D_left, d, D_right)`` with size-1 outer bonds.

    The forward pass returns one scalar per batch element, shape ``(batch,)``.
    """

    def __init__(self, n_features: Optional[int] = None, in_dim: Optional[int] = None,
                 bond_dim=None, init_std: float = 1e-9, seed=None,
                 tensors: Optional[Sequence[np.ndarray]] = None,
                 init_method: str = "randn_eye",
                 auto_stack: bool = True, auto_unbind: bool = False,
                 inline_input: bool = False, inline_mats: bool = False,
                 name: str = "mps"):
        super().__init__(name, auto_stack, auto_unbind, inline_input, inline_mats)
        if tensors is None:
            if n_features is None or in_dim is None or bond_dim is None:
                raise ValueError("give n_features, in_dim and bond_dim, or explicit tensors")
            if n_features < 1:
                raise ValueError("an MPS needs at least one site")
            tensors = _random_cores(n_features, [in_dim] * n_features, bond_dim, None,
                                    init_std, _rng(seed), init_method)
        tensors = [tc.as_tensor(t) for t in tensors]
        _check_chain(tensors, 3)
        for i, t in enumerate(tensors):
            self.sites.append(Node(tensor=t, axes_names=("left", "input", "right"),
                                   name=f"site_{i}", network=self, role="param"))
        self.input_positions = list(range(len(tensors)))
        self._connect_chain(np.ones(1), np.ones(1))

    @classmethod
    def from_cores(cls, cores: Sequence[np.ndarray], **kwargs) -> "MPS":
        return cls(tensors=cores, **kwargs)

    @property
    def phys_dims(self) -> List[int]:
        return [s.shape[1] for s in self.sites]

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_dense()))


class MPSLayer(ChainNetwork):
    """
    MPS with an extra output core, mapping ``(batch, n, d)`` to ``(batch, out_dim)``.

    Parameters
    ----------
    n_features : int
        Number of cores *including* the output core, so the input has
        ``n_features - 1`` features.
    in_dim : int
        Physical dimension of the input cores.
    out_dim : int
        Size of the output edge.
    bond_dim : int or sequence of int
        Bond dimension(s).
    out_position : int, optional
        0-based position of the output core; defaults to ``ceil(n_features / 2)``
        (clipped to the last core).
    init_std : float
        Noise added to the identity initialization.
    seed : int or numpy Generator, optional
        Randomness for the initialization.

    Examples
    --------
    >>> layer = MPSLayer(n_features=5, in_dim=2, out_dim=3, bond_dim=4, seed=0)
    >>> layer(np.ones((7, 4, 2))).shape
    (7, 3)
    """

    def __init__(self, n_features: Optional[int] = None, in_dim: Optional[int] = None,
                 out_dim: Optional[int] = None, bond_dim=None,
                 out_position: Optional[int] = None, init_std: float = 1e-9, seed=None,
                 tensors: Optional[Sequence[np.ndarray]] = None,
                 init_method: str = "randn_eye",
                 auto_stack: bool = True, auto_unbind: bool = False,
                 inline_input: bool = False, inline_mats: bool = False,
                 name: str = "mps_layer"):
        super().__init__(name, auto_stack, auto_unbind, inline_input, inline_mats)
        if tensors is None:
            if None in (n_features, in_dim, out_dim, bond_dim):
                raise ValueError("give n_features, in_dim, out_dim and bond_dim, or tensors")
            if n_features < 2:
                raise ValueError("MPSLayer needs n_features >= 2 (inputs plus the output core)")
            if out_position is None:
                out_position = min(ceil(n_features / 2), n_features - 1)
            if not 0 <= out_position < n_features:
                raise ValueError(f"out_position must lie in [0, {n_features})")
            phys = [in_dim] * n_features
            phys[out_position] = out_dim
            tensors = _random_cores(n_features, phys, bond_dim, out_position, init_std,
                                    _rng(seed), init_method)
        else:
            if out_position is None:
                raise ValueError("out_position is required with explicit tensors")
        tensors = [tc.as_tensor(t) for t in tensors]
        _check_chain(tensors, 3)
        self.out_position = out_position
        for i, t in enumerate(tensors):
            if i == out_position:
                node = Node(tensor=t, axes_names=("left", "output", "right"),
                            name="output_node", network=self, role="param")
            else:
                node = Node(tensor=t, axes_names=("left", "input", "right"),
                            name=f"site_{i}", network=self, role="param")
            self.sites.append(node)
        self.input_positions = [i for i in range(len(tensors)) if i != out_position]
        self._connect_chain(np.ones(1), np.ones(1))

    @property
    def out_dim(self) -> int:
        return self.sites[self.out_position].shape[1]

    @property
    def in_dim(self) -> int:
        return self.sites[self.input_positions[0]].shape[1]


class UMPS(ChainNetwork):
    """
    Uniform MPS: every site points at one core stored in a virtual node.

    Parameters
    ----------
    n_features : int
        Number of sites.
    in_dim, bond_dim : int
        Core shape is ``(bond_dim, in_dim, bond_dim)``.

    The chain is closed by the unit vector ``e_0`` on both ends (open
    boundary). The store holds exactly one core tensor, and gradients from
    all sites accumulate on it.
    """

    def __init__(self, n_features: int, in_dim: int, bond_dim: int,
                 init_std: float = 1e-9, seed=None, tensor: Optional[np.ndarray] = None,
                 init_method: str = "randn_eye",
                 auto_stack: bool = True, auto_unbind: bool = False,
                 inline_input: bool = False, inline_mats: bool = False,
                 name: str = "umps"):
        super().__init__(name, auto_stack, auto_unbind, inline_input, inline_mats)
        if n_features < 1:
            raise ValueError("a uniform MPS needs at least one site")
        shape = (bond_dim, in_dim, bond_dim)
        if tensor is None:
            tensor = _init_core(shape, init_std, _rng(seed), init_method)
        tensor = tc.as_tensor(tensor)
        if tensor.shape != shape:
            raise ValueError(f"core must have shape {shape}, got {tensor.shape}")
        axes = ("left", "input", "right")
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

    @property
    def core(self) -> np.ndarray:
        return self.uniform_node.tensor


###############################################################################
#                                  HELPERS                                    #
###############################################################################
def _init_core(shape, std, rng, method) -> np.ndarray:
    if method == "randn_eye":
        return eye_plus_noise(shape, std, rng)
    if method == "randn":
        return rng.normal(0.0, std, size=shape)
    raise ValueError(f"unknown init_method {method!r}")


def _bonds(n: int, bond_dim) -> List[int]:
    if isinstance(bond_dim, (int, np.integer)):
        bonds = [int(bond_dim)] * (n - 1)
    else:
        bonds = [int(b) for b in bond_dim]
    if len(bonds) != n - 1:
        raise ValueError(f"need {n - 1} bond dimensions, got {len(bonds)}")
    if any(b < 1 for b in bonds):
        raise ValueError("bond dimensions must be positive")
    return bonds


def _random_cores(n, phys, bond_dim, out_position, std, rng, method) -> List[np.ndarray]:
    full = [1] + _bonds(n, bond_dim) + [1]
    return [_init_core((full[i], phys[i], full[i + 1]), std, rng, method) for i in range(n)]


def _check_chain(tensors: Sequence[np.ndarray], rank: int) -> None:
    if not tensors:
        raise ValueError("a chain needs at least one core")
    for i, t in enumerate(tensors):
        if t.ndim != rank:
            raise ValueError(f"core {i} must have rank {rank}, got shape {t.shape}")
    if tensors[0].shape[0] != 1 or tensors[-1].shape[-1] != 1:
        raise ValueError("outer bonds of the chain must have size 1")
    for i, (a, b) in enumerate(zip(tensors[:-1], tensors[1:])):
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"bond {i} has sizes {a.shape[-1]} and {b.shape[0]}")
