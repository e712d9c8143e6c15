"""capskit: capsule-network pruning, fixed-point routing, and cycle modeling."""

from .fxp import Fx16, FxFormat, FxTensor, Q8_8
from .tensor import ConvLayerWeights, OpCounter, conv2d, count_mac_ops

__version__ = "0.1.0"

__all__ = [
    "Fx16",
    "FxFormat",
    "FxTensor",
    "Q8_8",
    "ConvLayerWeights",
    "OpCounter",
    "conv2d",
    "count_mac_ops",
    "__version__",
]
