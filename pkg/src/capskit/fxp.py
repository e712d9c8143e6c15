"""16-bit fixed-point arithmetic and hardware-friendly nonlinearities.

Scalars are carried as int16 raws with a per-value Q-format (`FxFormat`);
tensors as `FxTensor` (int16 raw array + one shared format). Every writeback
to 16 bits rounds half-to-even and saturates. Multiply-accumulate runs on an
exact wide accumulator, so any reordering of the same MAC sequence produces
identical raw bits.

exp is the printed 5th-degree Horner polynomial scaled by e^0.5, made global
by the reduction x = r + k*ln2 with r kept near the polynomial's anchor 0.5;
the 2^k post-scale is a shift in fixed point. log decomposes x = m*2^e with
m in [1, 2) and evaluates a committed degree-5 fit (see
scripts/regen_log_coeffs.py). div is exp(log a - log b) with a zero-numerator
bypass and sign extraction, and softmax is max-subtract / exp / div. The
fixed-point paths evaluate the same recurrences on integer raws at a
13-fraction-bit working precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AccumulatorOverflowError,
    DomainError,
    FormatMismatchError,
)

LN2 = math.log(2.0)

# exp polynomial: e^0.5 * (c0 + x(c1 + x(c2 + x(c3 + x(c4 + c5 x))))),
# accurate near its anchor 0.5; c1 is intentionally not e^-0.5.
EXP_COEFFS = (0.60653, 0.60659, 0.30260, 0.10347, 0.02118, 0.00833)
EXP_ANCHOR = 0.5
_EXP_SCALE = math.exp(EXP_ANCHOR)

# degree-5 fit of ln(m) on [1, 2), highest power first; max abs error 1.2e-5.
# Frozen output of scripts/regen_log_coeffs.py.
LOG_COEFFS = (
    0.029808765243,
    -0.279001023876,
    1.101739626133,
    -2.418999477901,
    3.498906747699,
    -1.932443190201,
)

# fraction bits used inside the fixed-point exp/log recurrences; the carrier
# format is too coarse to hold the polynomial constants.
_WORK_FRAC = 13

_INT16_MIN = -(1 << 15)
_INT16_MAX = (1 << 15) - 1
_INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class FxFormat:
    """Q-format descriptor: 16 total bits, `frac_bits` of them fractional."""

    frac_bits: int
    total_bits: int = 16

    def __post_init__(self):
        if self.total_bits != 16:
            raise ValueError("only 16-bit formats are supported")
        if not 1 <= self.frac_bits <= 15:
            raise ValueError("frac_bits must be in [1, 15]")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def min_value(self) -> float:
        return _INT16_MIN / self.scale

    @property
    def max_value(self) -> float:
        return _INT16_MAX / self.scale

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def __str__(self):
        return f"Q{16 - self.frac_bits}.{self.frac_bits}"


Q8_8 = FxFormat(8)


@dataclass(frozen=True)
class Fx16:
    """One fixed-point scalar: signed 16-bit raw plus its format."""

    raw: int
    fmt: FxFormat

    def __post_init__(self):
        if not _INT16_MIN <= self.raw <= _INT16_MAX:
            raise ValueError(f"raw {self.raw} outside int16 range")

    def to_real(self) -> float:
        return self.raw / self.fmt.scale

    @classmethod
    def from_real(cls, x: float, fmt: FxFormat) -> "Fx16":
        return quantize(x, fmt)


@dataclass(frozen=True)
class WideAcc:
    """Exact MAC accumulator; fraction bits are 2x the operand format's."""

    raw: int
    fmt: FxFormat  # operand format; accumulator fraction = 2 * frac_bits

    def to_real(self) -> float:
        return self.raw / (1 << (2 * self.fmt.frac_bits))


@dataclass
class FxTensor:
    """Dense fixed-point tensor: int16 raw array sharing one format."""

    raw: np.ndarray
    fmt: FxFormat

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.int16)

    @property
    def shape(self):
        return self.raw.shape

    def to_real(self) -> np.ndarray:
        return self.raw.astype(np.float64) / self.fmt.scale

    @classmethod
    def from_real(cls, x, fmt: FxFormat) -> "FxTensor":
        return cls(quantize_array(x, fmt), fmt)


def _check_same_format(*fmts: FxFormat):
    first = fmts[0]
    for f in fmts[1:]:
        if f != first:
            raise FormatMismatchError(f"format mismatch: {first} vs {f}")


# ---------------------------------------------------------------------------
# quantization


def quantize(x: float, fmt: FxFormat, with_flag: bool = False):
    """Round `x` to the nearest representable value (half-to-even), saturating.

    With `with_flag=True` also returns whether saturation occurred.
    """
    scaled = float(np.round(x * fmt.scale))
    raw = int(min(max(scaled, _INT16_MIN), _INT16_MAX))
    value = Fx16(raw, fmt)
    if with_flag:
        return value, raw != scaled
    return value


def quantize_array(x, fmt: FxFormat, with_flag: bool = False):
    """Vectorized quantize; returns an int16 array (and a saturation flag)."""
    scaled = np.round(np.asarray(x, dtype=np.float64) * fmt.scale)
    raw = np.clip(scaled, _INT16_MIN, _INT16_MAX)
    out = raw.astype(np.int16)
    if with_flag:
        return out, bool(np.any(raw != scaled))
    return out


def dequantize_array(raw, fmt: FxFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / fmt.scale


# ---------------------------------------------------------------------------
# MAC / accumulator


def wide_zero(fmt: FxFormat) -> WideAcc:
    return WideAcc(0, fmt)


def fx_mac(acc: WideAcc, a: Fx16, b: Fx16, checked: bool = False) -> WideAcc:
    """acc + a*b, exactly; rounding happens once at `writeback`.

    In checked mode an accumulator outside the signed 32-bit range raises.
    """
    _check_same_format(acc.fmt, a.fmt, b.fmt)
    raw = acc.raw + a.raw * b.raw
    if checked and not -_INT32_MAX - 1 <= raw <= _INT32_MAX:
        raise AccumulatorOverflowError(f"accumulator raw {raw} exceeds 32 bits")
    return WideAcc(raw, acc.fmt)


def writeback(acc: WideAcc, with_flag: bool = False):
    """Round the wide accumulator once back to an Fx16 in the operand format."""
    raw = _shift_round_half_even(acc.raw, acc.fmt.frac_bits)
    sat = min(max(raw, _INT16_MIN), _INT16_MAX)
    value = Fx16(sat, acc.fmt)
    if with_flag:
        return value, sat != raw
    return value


def _shift_round_half_even(v: int, shift: int) -> int:
    """Arithmetic right shift with round-half-to-even (left shift if negative)."""
    if shift <= 0:
        return v << (-shift)
    half = 1 << (shift - 1)
    q = v >> shift
    rem = v & ((1 << shift) - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def _shift_round_vec(v: np.ndarray, shift) -> np.ndarray:
    """Vectorized `_shift_round_half_even` with per-element shift counts."""
    v = np.asarray(v, dtype=np.int64)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.int64), v.shape)
    left = np.maximum(-shift, 0)
    right = np.maximum(shift, 0)
    x = v << left
    q = x >> right
    mask = (np.int64(1) << right) - 1
    rem = x & mask
    half = np.where(right > 0, np.int64(1) << np.maximum(right - 1, 0), np.int64(0))
    pos = right > 0
    bump = (pos & (rem > half)) | (pos & (rem == half) & ((q & 1) == 1))
    return q + bump


def _saturate16_vec(v: np.ndarray):
    clipped = np.clip(v, _INT16_MIN, _INT16_MAX)
    return clipped, bool(np.any(clipped != v))


# ---------------------------------------------------------------------------
# approximated nonlinearities, real path


def _horner_exp_real(r):
    acc = np.full_like(np.asarray(r, dtype=np.float64), EXP_COEFFS[5])
    for c in EXP_COEFFS[4::-1]:
        acc = acc * r + c
    return _EXP_SCALE * acc


def _exp_real(x):
    x = np.asarray(x, dtype=np.float64)
    k = np.round((x - EXP_ANCHOR) / LN2)
    r = x - k * LN2
    return _horner_exp_real(r) * np.exp2(k)


def _log_real(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.floor(np.log2(x))
    m = x / np.exp2(e)
    return e * LN2 + np.polyval(LOG_COEFFS, m)


def exp_reduced_interval() -> tuple[float, float]:
    """Interval the range reduction maps every argument into."""
    return (EXP_ANCHOR - LN2 / 2, EXP_ANCHOR + LN2 / 2)


# ---------------------------------------------------------------------------
# approximated nonlinearities, fixed-point path (vectorized over int64 raws)

_EXP_COEFFS_W = tuple(round(c * (1 << _WORK_FRAC)) for c in EXP_COEFFS)
_EXP_SCALE_W = round(_EXP_SCALE * (1 << _WORK_FRAC))
_LOG_COEFFS_W = tuple(round(c * (1 << _WORK_FRAC)) for c in LOG_COEFFS)
_LN2_W = round(LN2 * (1 << _WORK_FRAC))


def _exp_raw(raw, in_frac: int, out_frac: int):
    """Fixed-point exp on integer raws; returns (int64 raws, saturated?)."""
    raw = np.asarray(raw, dtype=np.int64)
    x = raw.astype(np.float64) / (1 << in_frac)
    k = np.round((x - EXP_ANCHOR) / LN2).astype(np.int64)
    # subtract k*ln2 rounded as one constant per element so the reduction
    # error stays sub-ulp instead of growing with |k|
    kln2 = np.round(k * LN2 * (1 << in_frac)).astype(np.int64)
    r = raw - kln2
    acc = np.full(raw.shape, _EXP_COEFFS_W[5], dtype=np.int64)
    for c in _EXP_COEFFS_W[4::-1]:
        acc = _shift_round_vec(acc * r, in_frac) + c
    acc = _shift_round_vec(acc * _EXP_SCALE_W, _WORK_FRAC)
    # convert Q[_WORK_FRAC] to Q[out_frac] and apply the 2^k post-scale
    net = _WORK_FRAC - out_frac - k
    hard_sat = net < -18  # value >= 2^18: beyond any 16-bit format
    out = _shift_round_vec(acc, np.maximum(net, -18))
    out[hard_sat] = _INT16_MAX + 1
    out, flag = _saturate16_vec(out)
    return out, flag


def _log_raw(raw, in_frac: int, out_frac: int):
    """Fixed-point ln on positive integer raws.

    Returns unsaturated int64 raws; only Fx16 writebacks saturate.
    """
    raw = np.asarray(raw, dtype=np.int64)
    if np.any(raw <= 0):
        raise DomainError("log_approx requires strictly positive input")
    # x = m * 2^e with m in [1, 2): e from the raw's bit length
    bits = np.frexp(raw.astype(np.float64))[1].astype(np.int64)  # floor(log2)+1
    e = bits - 1 - in_frac
    m = _shift_round_vec(raw, in_frac + e - _WORK_FRAC)
    acc = np.full(raw.shape, _LOG_COEFFS_W[0], dtype=np.int64)
    for c in _LOG_COEFFS_W[1:]:
        acc = _shift_round_vec(acc * m, _WORK_FRAC) + c
    acc = acc + e * _LN2_W
    return _shift_round_vec(acc, _WORK_FRAC - out_frac)


def _div_raw(a_raw, b_raw, frac: int):
    """Fixed-point a/b via exp(log a - log b); zero numerators short-circuit."""
    a_raw = np.asarray(a_raw, dtype=np.int64)
    b_raw = np.asarray(b_raw, dtype=np.int64)
    if np.any(b_raw <= 0):
        raise DomainError("div_approx requires a strictly positive denominator")
    sign = np.sign(a_raw)
    mag = np.abs(a_raw)
    safe = np.where(mag == 0, 1, mag)
    la = _log_raw(safe, frac, _WORK_FRAC)
    lb = _log_raw(b_raw, frac, _WORK_FRAC)
    q, _ = _exp_raw(la - lb, _WORK_FRAC, frac)
    return np.where(mag == 0, 0, sign * q)


def _softmax_raw(raw, frac: int):
    """Row-wise fixed-point softmax over the last axis of an int raw array."""
    raw = np.asarray(raw, dtype=np.int64)
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e, _ = _exp_raw(shifted, frac, frac)
    s = np.broadcast_to(e.sum(axis=-1, keepdims=True), e.shape)
    return _div_raw(e, s, frac)


# ---------------------------------------------------------------------------
# public type-dispatched operations


def exp_approx(x):
    """Polynomial exp; accepts a float, ndarray, Fx16, or FxTensor."""
    if isinstance(x, Fx16):
        out, _ = _exp_raw(np.asarray([x.raw]), x.fmt.frac_bits, x.fmt.frac_bits)
        return Fx16(int(out[0]), x.fmt)
    if isinstance(x, FxTensor):
        out, _ = _exp_raw(x.raw, x.fmt.frac_bits, x.fmt.frac_bits)
        return FxTensor(out.astype(np.int16), x.fmt)
    out = _exp_real(x)
    return float(out) if np.isscalar(x) else out


def log_approx(x):
    """Polynomial ln; domain error for any input <= 0."""
    if isinstance(x, Fx16):
        out = _log_raw(np.asarray([x.raw]), x.fmt.frac_bits, x.fmt.frac_bits)
        out, _ = _saturate16_vec(out)
        return Fx16(int(out[0]), x.fmt)
    if isinstance(x, FxTensor):
        out = _log_raw(x.raw, x.fmt.frac_bits, x.fmt.frac_bits)
        out, _ = _saturate16_vec(out)
        return FxTensor(out.astype(np.int16), x.fmt)
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0):
        raise DomainError("log_approx requires strictly positive input")
    out = _log_real(arr)
    return float(out) if np.isscalar(x) else out


def div_approx(a, b):
    """a/b as exp(log a - log b); exact-zero bypass, sign reattached."""
    if isinstance(a, Fx16):
        if not isinstance(b, Fx16):
            b = quantize(float(b), a.fmt)
        _check_same_format(a.fmt, b.fmt)
        out = _div_raw(np.asarray([a.raw]), np.asarray([b.raw]), a.fmt.frac_bits)
        return Fx16(int(out[0]), a.fmt)
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any(b_arr <= 0):
        raise DomainError("div_approx requires a strictly positive denominator")
    sign = np.sign(a_arr)
    mag = np.abs(a_arr)
    safe = np.where(mag == 0, 1.0, mag)
    out = np.where(mag == 0, 0.0, sign * _exp_real(_log_real(safe) - _log_real(b_arr)))
    if np.isscalar(a) and np.isscalar(b):
        return float(out)
    return out


def softmax_approx(v):
    """Approximated softmax over the last axis; rows sum to ~1."""
    if isinstance(v, FxTensor):
        if v.raw.shape[-1] == 0:
            raise DomainError("softmax_approx requires a nonempty vector")
        out = _softmax_raw(v.raw, v.fmt.frac_bits)
        return FxTensor(out.astype(np.int16), v.fmt)
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape[-1] == 0:
        raise DomainError("softmax_approx requires a nonempty vector")
    e = _exp_real(arr - arr.max(axis=-1, keepdims=True))
    s = e.sum(axis=-1, keepdims=True)
    return div_approx(e, np.broadcast_to(s, e.shape))
