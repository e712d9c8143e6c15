"""Look-ahead kernel pruning, its magnitude baseline, and dead-structure cleanup.

A weight's look-ahead score is its magnitude times the Frobenius norms of the
adjacent layers' connected slices: for weight w at (o, c, y, x), the incoming
factor is the norm of the previous layer's slice that produces channel c and
the outgoing factor is the norm of the next layer's slice that consumes
channel o; a missing neighbor contributes 1. A kernel (one kh x kw slice at
an (out_ch, in_ch) pair) scores the sum of its weights' scores; each layer
masks its floor(sparsity * N) lowest-scoring units, ties broken toward lower
kernel ids. The magnitude baseline is the same schedule with plain |w| sums.

`LookAheadKernelPruner` / `MagnitudeKernelPruner` wrap the schedule as
fit/transform estimators. `propagate_dead_structures` then removes channels
whose kernels are all masked, kernels consuming dead channels (to a
fixpoint), and capsule types whose channel block died entirely, shrinking the
routing weight table accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .capsnet import CapsNetSpec
from .errors import SeveredNetworkError, ShapeError
from .validation import as_conv_weights, check_sparsity, check_stack_compatible

GRANULARITIES = ("kernel", "capsule_group")


@dataclass
class LayerStack:
    """Ordered conv weight tensors with per-layer target sparsities."""

    layers: list
    sparsities: list
    granularities: list | None = None

    def __post_init__(self):
        self.layers = [as_conv_weights(w, f"layer {i}") for i, w in enumerate(self.layers)]
        check_stack_compatible(self.layers)
        if np.isscalar(self.sparsities):
            self.sparsities = [self.sparsities] * len(self.layers)
        if len(self.sparsities) != len(self.layers):
            raise ShapeError("need one sparsity per layer")
        self.sparsities = [check_sparsity(s) for s in self.sparsities]
        if self.granularities is None:
            self.granularities = ["kernel"] * len(self.layers)
        elif isinstance(self.granularities, str):
            self.granularities = [self.granularities] * len(self.layers)
        for g in self.granularities:
            if g not in GRANULARITIES:
                raise ShapeError(f"unknown granularity {g!r}")


@dataclass
class PruneMask:
    """Kernel-survival grid for one layer; True = kernel kept."""

    mask: np.ndarray
    granularity: str = "kernel"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeError("mask must be (C_out, C_in)")

    @property
    def kernel_count(self) -> int:
        return self.mask.size

    @property
    def surviving_ids(self) -> np.ndarray:
        """Flat kernel ids (out_ch * C_in + in_ch) of surviving kernels."""
        return np.flatnonzero(self.mask.ravel())

    @property
    def survived_fraction(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.mask.size


def lookahead_scores(w_prev, w, w_next):
    """Per-weight look-ahead scores for one layer; neighbors may be None."""
    w = as_conv_weights(w, "w")
    score = np.abs(w)
    if w_prev is not None:
        w_prev = as_conv_weights(w_prev, "w_prev")
        if w_prev.shape[0] != w.shape[1]:
            raise ShapeError(
                f"w_prev produces {w_prev.shape[0]} channels, w consumes {w.shape[1]}"
            )
        f_in = np.sqrt(np.sum(w_prev * w_prev, axis=(1, 2, 3)))
        score = score * f_in[None, :, None, None]
    if w_next is not None:
        w_next = as_conv_weights(w_next, "w_next")
        if w_next.shape[1] != w.shape[0]:
            raise ShapeError(
                f"w produces {w.shape[0]} channels, w_next consumes {w_next.shape[1]}"
            )
        f_out = np.sqrt(np.sum(w_next * w_next, axis=(0, 2, 3)))
        score = score * f_out[:, None, None, None]
    return score


def magnitude_scores(w):
    """Per-weight scores for the magnitude-KP baseline: plain |w|."""
    return np.abs(as_conv_weights(w, "w"))


def kernel_score_table(per_weight_scores) -> np.ndarray:
    """Sum per-weight scores over each kernel's kh*kw slice -> (C_out, C_in)."""
    return per_weight_scores.sum(axis=(2, 3))


def select_mask(kernel_scores, sparsity, granularity="kernel", group_size=8) -> PruneMask:
    """Mask the floor(sparsity * N) lowest-scoring units; lower id pruned first."""
    kernel_scores = np.asarray(kernel_scores, dtype=np.float64)
    sparsity = check_sparsity(sparsity)
    c_out, c_in = kernel_scores.shape
    mask = np.ones((c_out, c_in), dtype=bool)
    if granularity == "kernel":
        order = np.argsort(kernel_scores.ravel(), kind="stable")
        n_prune = int(np.floor(sparsity * kernel_scores.size))
        mask.ravel()[order[:n_prune]] = False
    elif granularity == "capsule_group":
        if c_out % group_size != 0:
            raise ShapeError(f"{c_out} channels not divisible by group_size={group_size}")
        units = c_out // group_size
        group_scores = kernel_scores.reshape(units, group_size * c_in).sum(axis=1)
        order = np.argsort(group_scores, kind="stable")
        n_prune = int(np.floor(sparsity * units))
        for g in order[:n_prune]:
            mask[g * group_size : (g + 1) * group_size] = False
    else:
        raise ShapeError(f"unknown granularity {granularity!r}")
    return PruneMask(mask, granularity)


def _score_tables(layers, look_ahead: bool):
    tables = []
    for i, w in enumerate(layers):
        if look_ahead:
            w_prev = layers[i - 1] if i > 0 else None
            w_next = layers[i + 1] if i < len(layers) - 1 else None
            per_weight = lookahead_scores(w_prev, w, w_next)
        else:
            per_weight = magnitude_scores(w)
        tables.append(kernel_score_table(per_weight))
    return tables


def _prune(stack: LayerStack, look_ahead: bool, group_size: int):
    tables = _score_tables(stack.layers, look_ahead)
    masks = [
        select_mask(t, s, g, group_size)
        for t, s, g in zip(tables, stack.sparsities, stack.granularities)
    ]
    pruned = [w * m.mask[:, :, None, None] for w, m in zip(stack.layers, masks)]
    return masks, pruned


def lakp_prune(stack: LayerStack, granularity=None, group_size: int = 8):
    """Look-ahead kernel pruning over the whole stack in one pass."""
    if granularity is not None:
        stack = LayerStack(stack.layers, stack.sparsities, granularity)
    return _prune(stack, look_ahead=True, group_size=group_size)


def kp_prune(stack: LayerStack, granularity=None, group_size: int = 8):
    """Magnitude-based kernel pruning: same schedule, scores are plain |w| sums."""
    if granularity is not None:
        stack = LayerStack(stack.layers, stack.sparsities, granularity)
    return _prune(stack, look_ahead=False, group_size=group_size)


# ---------------------------------------------------------------------------
# estimators


class _KernelPrunerBase(BaseEstimator, TransformerMixin):
    """Shared fit/transform plumbing for the two pruning criteria."""

    _look_ahead = False

    def __init__(self, sparsity=0.5, granularity="kernel", group_size=8):
        self.sparsity = sparsity
        self.granularity = granularity
        self.group_size = group_size

    def fit(self, X, y=None):
        """Compute kernel scores and survival masks for a list of weight tensors."""
        stack = LayerStack(list(X), self.sparsity, self.granularity)
        self.kernel_scores_ = _score_tables(stack.layers, self._look_ahead)
        self.masks_ = [
            select_mask(t, s, g, self.group_size)
            for t, s, g in zip(self.kernel_scores_, stack.sparsities, stack.granularities)
        ]
        self.n_layers_ = len(stack.layers)
        return self

    def transform(self, X):
        """Zero out pruned kernels; shapes are preserved."""
        if not hasattr(self, "masks_"):
            raise NotFittedError("call fit before transform")
        if len(X) != self.n_layers_:
            raise ShapeError(f"expected {self.n_layers_} layers, got {len(X)}")
        return [
            as_conv_weights(w) * m.mask[:, :, None, None] for w, m in zip(X, self.masks_)
        ]


class LookAheadKernelPruner(_KernelPrunerBase):
    """Structured pruner ranking kernels by summed look-ahead scores."""

    _look_ahead = True


class MagnitudeKernelPruner(_KernelPrunerBase):
    """Baseline structured pruner ranking kernels by summed |w|."""

    _look_ahead = False


# ---------------------------------------------------------------------------
# dead-structure propagation


@dataclass
class NetTopology:
    """Capsule grouping and routing fan-out of the conv stack's tail."""

    group_size: int = 8
    grid: tuple[int, int] = (6, 6)
    digit_caps: int = 10
    digit_dim: int = 16
    caps_dim: int = 8

    @property
    def grid_size(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def weights_per_capsule(self) -> int:
        return self.digit_caps * self.digit_dim * self.caps_dim


@dataclass
class PropagationResult:
    masks: list
    alive_out: list
    surviving_types: np.ndarray
    surviving_capsules: np.ndarray
    spec: CapsNetSpec
    index_tables: list
    rounds: int


def _as_mask_arrays(masks):
    out = []
    for m in masks:
        out.append(m.mask.copy() if isinstance(m, PruneMask) else np.asarray(m, bool).copy())
    return out


def propagate_dead_structures(masks, topology: NetTopology) -> PropagationResult:
    """Kill channels with no incoming kernels and everything they feed.

    Iterates to a fixpoint (at most one round per layer): a dead channel
    masks every kernel consuming it, which can in turn kill channels further
    down. Capsule types whose whole channel block died are removed from the
    routing table. Raises if any layer loses all output channels.
    """
    grids = _as_mask_arrays(masks)
    grans = [m.granularity if isinstance(m, PruneMask) else "kernel" for m in masks]
    rounds = 0
    changed = True
    while changed:
        changed = False
        rounds += 1
        alive_in = np.ones(grids[0].shape[1], dtype=bool)
        for g in grids:
            refined = g & alive_in[None, :]
            if not np.array_equal(refined, g):
                g[:] = refined
                changed = True
            alive_in = g.any(axis=1)
        if rounds > len(grids) + 1:
            raise RuntimeError("dead-structure propagation failed to converge")
    alive_out = [g.any(axis=1) for g in grids]
    for i, alive in enumerate(alive_out):
        if not alive.any():
            raise SeveredNetworkError(f"layer {i} has zero surviving output channels")

    last = alive_out[-1]
    if last.size % topology.group_size != 0:
        raise ShapeError(
            f"last layer has {last.size} channels, not divisible by "
            f"group_size={topology.group_size}"
        )
    types = last.reshape(-1, topology.group_size).any(axis=1)
    surviving_types = np.flatnonzero(types)
    gs = topology.grid_size
    surviving_capsules = (surviving_types[:, None] * gs + np.arange(gs)[None, :]).ravel()

    spec = CapsNetSpec(
        capsule_types=len(surviving_types),
        caps_dim=topology.caps_dim,
        grid=topology.grid,
        digit_caps=topology.digit_caps,
        digit_dim=topology.digit_dim,
    )
    refined = [PruneMask(g, gr) for g, gr in zip(grids, grans)]
    return PropagationResult(
        masks=refined,
        alive_out=alive_out,
        surviving_types=surviving_types,
        surviving_capsules=surviving_capsules,
        spec=spec,
        index_tables=[m.surviving_ids for m in refined],
        rounds=rounds,
    )


def compact_capsnet_weights(
    conv1_w,
    conv1_b,
    primary_w,
    primary_b,
    routing_w,
    result: PropagationResult,
    topology: NetTopology,
):
    """Slice dead structures out of the weight tensors.

    Dead conv1 channels are removed outright; the primary layer keeps whole
    `group_size` channel blocks of surviving capsule types (dead channels
    inside a surviving type stay as masked rows so grouping is preserved);
    the routing table keeps only surviving capsule rows. Returns the
    compacted tensors plus masks re-indexed to the compacted shapes.
    """
    alive1 = result.alive_out[0]
    rows = (
        result.surviving_types[:, None] * topology.group_size
        + np.arange(topology.group_size)[None, :]
    ).ravel()
    out = {
        "conv1.weight": conv1_w[alive1],
        "conv1.bias": None if conv1_b is None else conv1_b[alive1],
        "primary_caps.weight": primary_w[rows][:, alive1],
        "primary_caps.bias": None if primary_b is None else primary_b[rows],
        "digit_caps.weight": routing_w[result.surviving_capsules],
    }
    m1, m2 = result.masks[0], result.masks[1]
    compact_masks = [
        PruneMask(m1.mask[alive1], m1.granularity),
        PruneMask(m2.mask[rows][:, alive1], m2.granularity),
    ]
    return out, compact_masks


def compression_report(result: PropagationResult, stack: LayerStack, topology: NetTopology) -> dict:
    """Exact integer compression accounting after propagation."""
    conv_total = 0
    conv_survived = 0
    for w, m in zip(stack.layers, result.masks):
        k2 = w.shape[2] * w.shape[3]
        conv_total += w.shape[0] * w.shape[1] * k2
        conv_survived += int(np.count_nonzero(m.mask)) * k2
    original_types = stack.layers[-1].shape[0] // topology.group_size
    routing_total = original_types * topology.grid_size * topology.weights_per_capsule
    routing_survived = len(result.surviving_capsules) * topology.weights_per_capsule

    survived = conv_survived + routing_survived
    total = conv_total + routing_total
    index_entries = sum(len(t) for t in result.index_tables) + len(result.surviving_capsules)
    return {
        "total_weight_count": total,
        "surviving_weight_count": survived,
        "survived_weight_pct": 100.0 * survived / total,
        "survived_capsules": len(result.surviving_capsules),
        "total_capsules": original_types * topology.grid_size,
        "routing_weight_count": routing_survived,
        "index_entries": index_entries,
        "index_overhead_pct": 100.0 * index_entries / survived,
        # informational byte-level view: u32 index entries vs int16 payload
        "index_storage_bytes": 4 * index_entries,
        "surviving_payload_bytes_int16": 2 * survived,
    }
