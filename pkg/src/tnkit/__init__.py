"""
tnkit: a small tensor-network machine-learning engine.

Dense float64 kernels, a reverse-mode tape, a node/edge graph with a
shared memory store, cached and traceable network operations, built-in
MPS/MPO/TTN models and a training command line.
"""

from tnkit.autodiff import Variable, no_grad
from tnkit.network import (Axis, Edge, FreedTensorError, MemoryStore, Node, StackEdge,
                           TensorNetwork, connect, disconnect)
from tnkit.operations import (add, contract_between, contract_edge, div, einsum, mul,
                              permute_node, split, stack, stacked_einsum, sub, tprod, unbind)

__version__ = "0.1.0"

__all__ = [
    "Variable", "no_grad",
    "Axis", "Edge", "StackEdge", "Node", "TensorNetwork", "MemoryStore", "FreedTensorError",
    "connect", "disconnect",
    "contract_between", "contract_edge", "split", "stack", "unbind", "einsum",
    "stacked_einsum", "permute_node", "tprod", "add", "sub", "mul", "div",
]
