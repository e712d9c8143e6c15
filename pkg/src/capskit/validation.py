"""Input validation helpers shared by the estimators and the engine."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_conv_weights(w, name="weights") -> np.ndarray:
    """Validate a 4-D (C_out, C_in, kh, kw) conv weight tensor with square kernels."""
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (C_out, C_in, kh, kw), got {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ShapeError(f"{name} kernels must be square, got {arr.shape[2:]}")
    return arr


def check_stack_compatible(layers):
    """Adjacent layers must agree on channel counts: C_out[i] == C_in[i+1]."""
    for i in range(len(layers) - 1):
        c_out = layers[i].shape[0]
        c_in = layers[i + 1].shape[1]
        if c_out != c_in:
            raise ShapeError(
                f"layer {i} has {c_out} output channels but layer {i + 1} "
                f"expects {c_in} input channels"
            )


def check_sparsity(s, name="sparsity") -> float:
    s = float(s)
    if not 0.0 <= s < 1.0:
        raise ShapeError(f"{name} must be in [0, 1), got {s}")
    return s


def check_mask_shape(mask, weights, layer=None) -> np.ndarray:
    """A kernel mask must be (C_out, C_in) boolean for its weight tensor."""
    m = np.asarray(mask, dtype=bool)
    expected = weights.shape[:2]
    if m.shape != expected:
        where = f" for layer {layer}" if layer is not None else ""
        raise ShapeError(f"mask shape {m.shape} != kernel grid {expected}{where}")
    return m
