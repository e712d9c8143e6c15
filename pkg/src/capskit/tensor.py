"""Dense valid-padding convolution with index-table kernel skipping.

The convolution is plain cross-correlation plus bias (no padding, matching
the 28 -> 20 -> 6 spatial chain of the capsule architecture). A kernel here
is the 2-D slice at one (out_ch, in_ch) pair; a prune mask is a boolean
(C_out, C_in) grid. Masked kernels are skipped via per-channel index lists,
which an `OpCounter` makes observable, and contribute exactly zero.

Fixed-point inputs run on their integer raws through float64 BLAS: every
product and partial sum stays far below 2^53, so the arithmetic is exact
integer math and independent of summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fxp import FxTensor, _INT16_MAX, _INT16_MIN
from .validation import check_mask_shape


@dataclass
class ConvLayerWeights:
    """Conv layer parameters: kernels (C_out, C_in, kh, kw), bias (C_out,)."""

    kernels: np.ndarray | FxTensor
    bias: np.ndarray | FxTensor | None = None
    stride: int = 1

    def __post_init__(self):
        shape = self.kernels.shape
        if len(shape) != 4:
            raise ShapeError(f"kernels must be 4-D, got {shape}")
        if shape[2] != shape[3]:
            raise ShapeError(f"kernels must be square, got {shape[2:]}")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.bias is not None and self.bias.shape != (shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} != ({shape[0]},)"
            )

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]


@dataclass
class OpCounter:
    """Tallies the scalar multiply-accumulates a convolution executed."""

    macs: int = 0
    skipped: int = 0

    def reset(self):
        self.macs = 0
        self.skipped = 0


def out_hw(in_hw, k: int, stride: int):
    """Valid-padding output spatial dims."""
    h, w = in_hw
    if h < k or w < k:
        raise ShapeError(f"input {in_hw} smaller than kernel {k}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int):
    """(C, H, W) -> (C, k*k, P) patch matrix, positions row-major."""
    c, h, w = x.shape
    ho, wo = out_hw((h, w), k, stride)
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = x[:, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride]
    return cols.reshape(c, k * k, ho * wo), (ho, wo)


def conv2d(
    x: np.ndarray | FxTensor,
    weights: ConvLayerWeights,
    mask: np.ndarray | None = None,
    counter: OpCounter | None = None,
):
    """Cross-correlate (C_in, H, W) input with the layer's kernels plus bias.

    `mask` is a (C_out, C_in) kernel-survival grid; masked kernels are
    skipped through per-channel index tables. Fixed-point inputs require
    fixed-point weights and produce an FxTensor in the input's format.
    """
    fx = isinstance(x, FxTensor)
    if fx != isinstance(weights.kernels, FxTensor):
        raise ShapeError("input and kernels must both be real or both fixed-point")
    kern = weights.kernels.raw if fx else np.asarray(weights.kernels, dtype=np.float64)
    data = x.raw if fx else np.asarray(x, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"input must be (C_in, H, W), got {data.shape}")
    c_out, c_in, k, _ = kern.shape
    if data.shape[0] != c_in:
        raise ShapeError(f"input has {data.shape[0]} channels, kernels expect {c_in}")
    if mask is not None:
        mask = check_mask_shape(mask, kern)

    if fx:
        # exact integer arithmetic through float64 BLAS
        fa = x.fmt.frac_bits
        fw = weights.kernels.fmt.frac_bits
        data = data.astype(np.float64)
        kern = kern.astype(np.float64)
        bias_wide = None
        if weights.bias is not None:
            fb = weights.bias.fmt.frac_bits
            if fb > fa + fw:
                raise ShapeError("bias format finer than the product format")
            bias_wide = weights.bias.raw.astype(np.float64) * float(1 << (fa + fw - fb))
    else:
        bias_wide = None if weights.bias is None else np.asarray(weights.bias, dtype=np.float64)

    cols, (ho, wo) = _im2col(data, k, weights.stride)
    positions = ho * wo

    if mask is None or mask.all():
        out = kern.reshape(c_out, c_in * k * k) @ cols.reshape(c_in * k * k, positions)
        executed = c_out * c_in
    else:
        out = np.zeros((c_out, positions), dtype=np.float64)
        executed = 0
        index_table = [np.flatnonzero(mask[o]) for o in range(c_out)]
        for o, in_idx in enumerate(index_table):
            if in_idx.size == 0:
                continue
            sub = cols[in_idx].reshape(in_idx.size * k * k, positions)
            out[o] = kern[o, in_idx].reshape(-1) @ sub
            executed += in_idx.size

    if bias_wide is not None:
        if mask is not None:
            # fully pruned output channels lose their bias as well
            bias_wide = bias_wide * mask.any(axis=1)
        out += bias_wide[:, None]

    if counter is not None:
        counter.macs += executed * k * k * positions
        counter.skipped += (c_out * c_in - executed) * k * k * positions

    if fx:
        raw = _writeback_wide(out, shift=fw)
        return FxTensor(raw.reshape(c_out, ho, wo), x.fmt)
    return out.reshape(c_out, ho, wo)


def _writeback_wide(wide: np.ndarray, shift: int) -> np.ndarray:
    """Round float64-carried exact integers down `shift` bits, saturate to int16."""
    scaled = wide / float(1 << shift)
    rounded = np.round(scaled)  # half-to-even on exact dyadic ratios
    return np.clip(rounded, _INT16_MIN, _INT16_MAX).astype(np.int16)


def count_mac_ops(weights: ConvLayerWeights, mask=None, in_shape=None) -> int:
    """Exact scalar MAC count a conv2d call will execute."""
    if in_shape is None:
        raise ShapeError("in_shape (C_in, H, W) is required")
    c_in, h, w = in_shape
    if c_in != weights.in_channels:
        raise ShapeError(
            f"in_shape has {c_in} channels, kernels expect {weights.in_channels}"
        )
    k = weights.kernel_size
    ho, wo = out_hw((h, w), k, weights.stride)
    if mask is None:
        kernels = weights.out_channels * weights.in_channels
    else:
        kernels = int(np.count_nonzero(check_mask_shape(mask, weights.kernels)))
    return kernels * k * k * ho * wo


def relu(x: np.ndarray | FxTensor):
    """max(0, x); on fixed-point tensors this clamps the raw at zero."""
    if isinstance(x, FxTensor):
        return FxTensor(np.maximum(x.raw, 0), x.fmt)
    return np.maximum(x, 0.0)
