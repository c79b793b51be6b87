"""Built-in tensor network models, embeddings and MPS analysis tools."""

from tnkit.models.analysis import (canonical_cores, canonicalize, entanglement_entropy,
                                   reduced_density_matrix)
from tnkit.models.embeddings import add_ones, basis, discretize, embed, poly, unit
from tnkit.models.mpo import (MPO, UMPO, TensorizeResult, mpo_to_dense, mps_mpo_contract,
                              mps_to_dense, tensorize_matrix)
from tnkit.models.mps import MPS, UMPS, ChainNetwork, MPSLayer
from tnkit.models.ttn import TTN


def build_uniform(model: str, **spec):
    """Build a uniform network (``"umps"`` or ``"umpo"``) from keyword arguments."""
    kinds = {"umps": UMPS, "umpo": UMPO}
    try:
        cls = kinds[model.lower()]
    except KeyError:
        raise ValueError(f"unknown uniform model {model!r}; choose 'umps' or 'umpo'") from None
    return cls(**spec)


__all__ = [
    "MPS", "MPSLayer", "UMPS", "MPO", "UMPO", "TTN", "ChainNetwork",
    "embed", "unit", "add_ones", "poly", "discretize", "basis",
    "canonicalize", "canonical_cores", "entanglement_entropy", "reduced_density_matrix",
    "mps_mpo_contract", "mps_to_dense", "mpo_to_dense", "tensorize_matrix",
    "TensorizeResult", "build_uniform",
]
