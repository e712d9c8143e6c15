"""Capsule-network inference: capsule formation, prediction, dynamic routing.

Routing follows the agreement scheme: logits start at zero, couplings are the
softmax of the logits over output capsules, the weighted prediction sum is
squashed, and (on all but the last pass) logits grow by the dot product of
each prediction with the output it voted for. `route_reference` uses exact
softmax and the straight i->j->k agreement loop; `route_optimized` swaps in
the polynomial softmax and the loop-reordered, PE-batched agreement.

Both routing variants and the full pipeline run in real (float64) or
fixed-point arithmetic. Fixed-point agreement accumulates products exactly in
a wide integer carrier, so any batching factor produces bit-identical logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .fxp import (
    FxFormat,
    FxTensor,
    _INT16_MAX,
    _INT16_MIN,
    _shift_round_vec,
    _softmax_raw,
    quantize_array,
    softmax_approx,
)
from .tensor import ConvLayerWeights, OpCounter, conv2d, relu


@dataclass
class CapsNetSpec:
    """Architecture description: capsule grouping and routing fan-out."""

    capsule_types: int = 32
    caps_dim: int = 8
    grid: tuple[int, int] = (6, 6)
    digit_caps: int = 10
    digit_dim: int = 16
    routing_iters: int = 3

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def in_caps(self) -> int:
        return self.capsule_types * self.grid_size

    @property
    def weights_per_capsule(self) -> int:
        return self.digit_caps * self.digit_dim * self.caps_dim

    @property
    def routing_weight_count(self) -> int:
        return self.in_caps * self.weights_per_capsule


@dataclass
class RoutingState:
    """Working set of one routing run (final-iteration values)."""

    u_hat: object
    b: object
    c: object
    s: object
    v: object


@dataclass
class InferResult:
    label: int
    caps_norms: np.ndarray
    state: RoutingState | None = None


def squash(s, axis=-1):
    """Scale vectors to norm ||s||^2 / (1 + ||s||^2); zero maps to zero."""
    s = np.asarray(s, dtype=np.float64)
    n2 = np.sum(s * s, axis=axis, keepdims=True)
    return s * (np.sqrt(n2) / (1.0 + n2))


def squash_fx(t: FxTensor, axis=-1) -> FxTensor:
    """Squash on the float scalar path, requantized at writeback."""
    return FxTensor(quantize_array(squash(t.to_real(), axis=axis), t.fmt), t.fmt)


def primary_caps(features, caps_dim: int = 8, squash_output: bool = True):
    """Group conv features (C, gh, gw) into (C/caps_dim * gh*gw, caps_dim) capsules.

    Channels are grouped in consecutive blocks of `caps_dim`; capsule index is
    capsule_type * grid_size + grid_position (row-major).
    """
    fx = isinstance(features, FxTensor)
    data = features.raw if fx else np.asarray(features, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"features must be (C, gh, gw), got {data.shape}")
    c, gh, gw = data.shape
    if c % caps_dim != 0:
        raise ShapeError(f"{c} channels not divisible by caps_dim={caps_dim}")
    types = c // caps_dim
    caps = (
        data.reshape(types, caps_dim, gh * gw)
        .transpose(0, 2, 1)
        .reshape(types * gh * gw, caps_dim)
    )
    out = FxTensor(caps, features.fmt) if fx else caps
    if squash_output:
        out = squash_fx(out) if fx else squash(out)
    return out


def predict_vectors(capsules, w):
    """u_hat[i,j,k] = sum_d W[i,j,k,d] * capsules[i,d]."""
    fx = isinstance(capsules, FxTensor)
    if fx != isinstance(w, FxTensor):
        raise ShapeError("capsules and weights must share an arithmetic kind")
    caps = capsules.raw if fx else np.asarray(capsules, dtype=np.float64)
    wdat = w.raw if fx else np.asarray(w, dtype=np.float64)
    if caps.ndim != 2 or wdat.ndim != 4:
        raise ShapeError("expected capsules (IN, D) and weights (IN, OUT, OUT_DIM, D)")
    if wdat.shape[0] != caps.shape[0] or wdat.shape[3] != caps.shape[1]:
        raise ShapeError(
            f"weights {wdat.shape} inconsistent with capsules {caps.shape}"
        )
    if fx:
        # 8-term dots on int16 raws: exact in float64
        wide = np.einsum("ijkd,id->ijk", wdat.astype(np.float64), caps.astype(np.float64))
        shift = w.fmt.frac_bits
        raw = np.clip(np.round(wide / float(1 << shift)), _INT16_MIN, _INT16_MAX)
        return FxTensor(raw.astype(np.int16), capsules.fmt)
    return np.einsum("ijkd,id->ijk", wdat, caps)


def agreement_reference(u_hat, v):
    """delta_b[i,j] = sum_k u_hat[i,j,k] * v[j,k], plain i->j->k loop order.

    Real mode returns float64; fixed-point mode returns the exact wide
    integer accumulator (fraction bits doubled), rounded only by the caller.
    """
    fx = isinstance(u_hat, FxTensor)
    u = u_hat.raw if fx else np.asarray(u_hat, dtype=np.float64)
    vv = v.raw if fx else np.asarray(v, dtype=np.float64)
    _check_agreement_shapes(u, vv)
    if fx:
        wide = np.einsum("ijk,jk->ij", u.astype(np.float64), vv.astype(np.float64))
        return wide.astype(np.int64)
    return np.einsum("ijk,jk->ij", u, vv)


def agreement_parallel(u_hat, v, fact: int, counter: OpCounter | None = None):
    """Loop-reordered agreement: j -> k outer, input capsules in PE batches.

    `fact` lanes are dispatched per PE call and must divide the input capsule
    count (no padding). Fixed-point results are bit-identical to
    `agreement_reference` because accumulation is exact integer addition.
    """
    fx = isinstance(u_hat, FxTensor)
    u = u_hat.raw if fx else np.asarray(u_hat, dtype=np.float64)
    vv = v.raw if fx else np.asarray(v, dtype=np.float64)
    _check_agreement_shapes(u, vv)
    in_ch, out_ch, out_dim = u.shape
    if fact < 1 or in_ch % fact != 0:
        raise ShapeError(f"fact={fact} does not divide IN_CH={in_ch}")
    if fx:
        u = u.astype(np.int64)
        vv = vv.astype(np.int64)
        delta = np.zeros((in_ch, out_ch), dtype=np.int64)
    else:
        delta = np.zeros((in_ch, out_ch), dtype=np.float64)
    # every lane accumulates its k-terms in the same order as the reference;
    # the `fact`-wide batches are data-parallel so the whole i axis vectorizes
    for j in range(out_ch):
        col = delta[:, j]
        for k in range(out_dim):
            col += u[:, j, k] * vv[j, k]
    if counter is not None:
        counter.macs += in_ch * out_ch * out_dim
        counter.skipped += 0
        counter.dispatches = getattr(counter, "dispatches", 0) + out_ch * out_dim * (in_ch // fact)
    return delta


def _check_agreement_shapes(u, v):
    if u.ndim != 3 or v.ndim != 2 or u.shape[1:] != v.shape:
        raise ShapeError(f"u_hat {u.shape} inconsistent with v {v.shape}")


def _exact_softmax_rows(b):
    e = np.exp(b - b.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _route(u_hat, iters: int, softmax_fn, agreement_fn, update_last: bool):
    if iters < 1:
        raise ValueError("iters must be >= 1")
    fx = isinstance(u_hat, FxTensor)
    if fx:
        return _route_fx(u_hat, iters, softmax_fn, agreement_fn, update_last)
    u = np.asarray(u_hat, dtype=np.float64)
    in_ch, out_ch, _ = u.shape
    b = np.zeros((in_ch, out_ch))
    c = s = v = None
    for it in range(iters):
        c = softmax_fn(b)
        s = np.einsum("ij,ijk->jk", c, u)
        v = squash(s)
        if update_last or it < iters - 1:
            b = b + agreement_fn(u, v)
    return RoutingState(u_hat=u, b=b, c=c, s=s, v=v)


def _route_fx(u_hat: FxTensor, iters, softmax_fn, agreement_fn, update_last):
    fmt = u_hat.fmt
    f = fmt.frac_bits
    u = u_hat.raw
    in_ch, out_ch, _ = u.shape
    b = np.zeros((in_ch, out_ch), dtype=np.int64)
    c = s = v = None
    for it in range(iters):
        c = softmax_fn(FxTensor(_sat16(b), fmt))
        # weighted sum: exact wide product (frac 2f), rounded once at writeback
        wide = np.einsum(
            "ij,ijk->jk", c.raw.astype(np.float64), u.astype(np.float64)
        ).astype(np.int64)
        s = FxTensor(_sat16(_shift_round_vec(wide, f)), fmt)
        v = squash_fx(s)
        if update_last or it < iters - 1:
            delta = agreement_fn(FxTensor(u, fmt), v)  # wide, frac 2f
            b = np.clip(b + _shift_round_vec(delta, f), _INT16_MIN, _INT16_MAX)
    return RoutingState(u_hat=u_hat, b=FxTensor(_sat16(b), fmt), c=c, s=s, v=v)


def _sat16(raw):
    return np.clip(raw, _INT16_MIN, _INT16_MAX).astype(np.int16)


def route_reference(u_hat, iters: int = 3, update_last: bool = False) -> RoutingState:
    """Routing with exact softmax and the straight agreement loop."""

    def sm(b):
        if isinstance(b, FxTensor):
            return FxTensor(quantize_array(_exact_softmax_rows(b.to_real()), b.fmt), b.fmt)
        return _exact_softmax_rows(b)

    return _route(u_hat, iters, sm, agreement_reference, update_last)


def route_optimized(
    u_hat,
    iters: int = 3,
    fact: int = 10,
    update_last: bool = False,
    counter: OpCounter | None = None,
) -> RoutingState:
    """Routing with polynomial softmax and PE-batched agreement."""

    def sm(b):
        if isinstance(b, FxTensor):
            return FxTensor(_sat16(_softmax_raw(b.raw, b.fmt.frac_bits)), b.fmt)
        return softmax_approx(b)

    def agree(u, v):
        return agreement_parallel(u, v, fact, counter=counter)

    return _route(u_hat, iters, sm, agree, update_last)


# ---------------------------------------------------------------------------
# full model


@dataclass
class CapsNetModel:
    """Loaded weights plus the architecture spec; immutable once built."""

    conv1: ConvLayerWeights
    primary_conv: ConvLayerWeights
    routing_w: np.ndarray | FxTensor
    spec: CapsNetSpec = field(default_factory=CapsNetSpec)
    squash_primary: bool = True
    conv1_mask: np.ndarray | None = None
    primary_mask: np.ndarray | None = None
    capsule_ids: np.ndarray | None = None

    def infer_one(
        self,
        image,
        mode: str = "reference",
        fact: int = 10,
        counter: OpCounter | None = None,
        keep_state: bool = False,
    ) -> InferResult:
        """Run one image through conv1 -> PrimaryCaps -> routing."""
        if mode not in ("reference", "optimized"):
            raise ValueError(f"unknown mode {mode!r}")
        x = relu(conv2d(image, self.conv1, mask=self.conv1_mask, counter=counter))
        feats = conv2d(x, self.primary_conv, mask=self.primary_mask, counter=counter)
        caps = primary_caps(
            feats, caps_dim=self.spec.caps_dim, squash_output=self.squash_primary
        )
        u_hat = predict_vectors(caps, self.routing_w)
        if mode == "reference":
            state = route_reference(u_hat, self.spec.routing_iters)
        else:
            state = route_optimized(u_hat, self.spec.routing_iters, fact=fact, counter=counter)
        v = state.v.to_real() if isinstance(state.v, FxTensor) else state.v
        norms = np.linalg.norm(v, axis=-1)
        label = int(np.argmax(norms))  # argmax takes the lowest index on ties
        return InferResult(label, norms, state if keep_state else None)

    def predict(self, images, mode: str = "reference", fact: int = 10) -> np.ndarray:
        """Classify a batch of (N, C, H, W) or list of (C, H, W) images."""
        return np.array(
            [self.infer_one(img, mode=mode, fact=fact).label for img in images]
        )

    def quantized(self, act_fmt: FxFormat, weight_fmts: dict | None = None) -> "CapsNetModel":
        """Fixed-point copy: per-tensor weight formats, one activation format."""
        weight_fmts = weight_fmts or {}

        def q(arr, name):
            if isinstance(arr, FxTensor):
                return arr
            fmt = weight_fmts.get(name) or fit_format(arr)
            return FxTensor.from_real(arr, fmt)

        def qlayer(layer, name):
            if isinstance(layer.kernels, FxTensor):
                return layer
            return ConvLayerWeights(
                q(layer.kernels, f"{name}.weight"),
                None if layer.bias is None else q(layer.bias, f"{name}.bias"),
                layer.stride,
            )

        return CapsNetModel(
            conv1=qlayer(self.conv1, "conv1"),
            primary_conv=qlayer(self.primary_conv, "primary_caps"),
            routing_w=q(self.routing_w, "digit_caps.weight"),
            spec=self.spec,
            squash_primary=self.squash_primary,
            conv1_mask=self.conv1_mask,
            primary_mask=self.primary_mask,
            capsule_ids=self.capsule_ids,
        )


def fit_format(arr) -> FxFormat:
    """Most fractional 16-bit format whose range covers max|arr|."""
    peak = float(np.max(np.abs(arr))) if np.asarray(arr).size else 0.0
    frac = 15
    while frac > 1 and peak >= (1 << (15 - frac)):
        frac -= 1
    return FxFormat(frac)


def random_model(
    seed: int,
    capsule_types: int = 32,
    caps_dim: int = 8,
    digit_caps: int = 10,
    digit_dim: int = 16,
    routing_iters: int = 3,
    image_hw: int = 28,
    kernel: int = 9,
) -> CapsNetModel:
    """Seeded uniform [-0.1, 0.1] weights, for oracle and property runs.

    The capsule grid follows from the conv geometry: valid 9x9 stride-1 then
    stride-2 convolutions turn 28x28 into a 6x6 grid.
    """
    o1 = image_hw - kernel + 1
    g = (o1 - kernel) // 2 + 1
    if o1 < kernel or g < 1:
        raise ShapeError(f"image {image_hw} too small for kernel {kernel}")
    spec = CapsNetSpec(
        capsule_types=capsule_types,
        caps_dim=caps_dim,
        grid=(g, g),
        digit_caps=digit_caps,
        digit_dim=digit_dim,
        routing_iters=routing_iters,
    )
    rng = np.random.default_rng(seed)
    conv_ch = spec.capsule_types * spec.caps_dim

    def u(*shape):
        return rng.uniform(-0.1, 0.1, shape)

    conv1 = ConvLayerWeights(u(conv_ch, 1, kernel, kernel), u(conv_ch), stride=1)
    primary = ConvLayerWeights(u(conv_ch, conv_ch, kernel, kernel), u(conv_ch), stride=2)
    routing = u(spec.in_caps, spec.digit_caps, spec.digit_dim, spec.caps_dim)
    return CapsNetModel(conv1, primary, routing, spec)
