"""Tree tensor network classifier with a complete ``arity``-ary tree."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from tnkit import tensor_core as tc
from tnkit.models.mps import _rng
from tnkit.network import Node, TensorNetwork, connect
from tnkit.operations import permute_node

__all__ = ["TTN"]


class TTN(TensorNetwork):
    """
    Complete tree with ``arity ** depth`` input legs.

    Parameters
    ----------
    arity : int
        Number of children per tensor.
    depth : int
        Number of tensor layers; the bottom layer takes the inputs.
    in_dim : int
        Physical dimension of each input leg.
    bond_dim : int
        Size of the internal (child-parent) bonds.
    out_dim : int
        Size of the root's ``output`` edge.
    tensors : list of list of arrays, optional
        Explicit tensors per layer, bottom first.

    Bottom tensors have axes ``(input_0, ..., input_{a-1}, parent)``,
    internal ones ``(child_0, ..., child_{a-1}, parent)`` and the root
    ends with ``output`` instead of ``parent``. Default initialization is
    Gaussian with standard deviation ``init_std / sqrt(fan_in)``.
    The forward pass returns ``(batch, out_dim)``.
    """

    def __init__(self, arity: int, depth: int, in_dim: int, bond_dim: int,
                 out_dim: int = 1, init_std: float = 1.0, seed=None,
                 tensors: Optional[Sequence[Sequence[np.ndarray]]] = None,
                 auto_stack: bool = True, auto_unbind: bool = False, name: str = "ttn"):
        super().__init__(name=name, auto_stack=auto_stack, auto_unbind=auto_unbind)
        if arity < 1 or depth < 1:
            raise ValueError("arity and depth must be positive")
        self.arity, self.depth = arity, depth
        rng = _rng(seed)
        self.layers: List[List[Node]] = []
        for level in range(depth):
            count = arity ** (depth - 1 - level)
            child_dim = in_dim if level == 0 else bond_dim
            child = "input" if level == 0 else "child"
            top = level == depth - 1
            shape = (child_dim,) * arity + ((out_dim,) if top else (bond_dim,))
            axes = [f"{child}_{k}" for k in range(arity)] + ["output" if top else "parent"]
            layer = []
            for j in range(count):
                if tensors is not None:
                    t = tc.as_tensor(tensors[level][j])
                    if t.shape != shape:
                        raise ValueError(f"layer {level} tensor {j}: expected {shape}, got {t.shape}")
                else:
                    t = rng.normal(0.0, init_std / np.sqrt(child_dim ** arity), size=shape)
                layer.append(Node(tensor=t, axes_names=axes, name=f"ttn_{level}_{j}",
                                  network=self, role="param"))
            self.layers.append(layer)
        for level in range(1, depth):
            for j, parent in enumerate(self.layers[level]):
                for k in range(arity):
                    connect(self.layers[level - 1][j * arity + k]["parent"], parent[f"child_{k}"])

    @property
    def n_features(self) -> int:
        return self.arity ** self.depth

    @property
    def root(self) -> Node:
        return self.layers[-1][0]

    def set_data_nodes(self, input_edges=None, num_batch_edges: int = 1) -> None:
        if input_edges is None:
            input_edges = [node[f"input_{k}"] for node in self.layers[0] for k in range(self.arity)]
        super().set_data_nodes(input_edges, num_batch_edges)

    def contract(self, **_) -> Node:
        data = list(self.data_nodes.values())
        level_out = []
        for j, node in enumerate(self.layers[0]):
            res = node
            for k in range(self.arity):
                res = res @ data[j * self.arity + k]
            level_out.append(res)
        for level in range(1, self.depth):
            nxt = []
            for j, node in enumerate(self.layers[level]):
                res = node
                for k in range(self.arity):
                    res = res @ level_out[j * self.arity + k]
                nxt.append(res)
            level_out = nxt
        result = level_out[0]
        order = [n for n in result.axes_names if "batch" in n] + \
                [n for n in result.axes_names if "batch" not in n]
        if order != result.axes_names:
            result = permute_node(result, order)
        return result
