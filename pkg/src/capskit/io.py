"""Bit-exact file formats: weight container, mask/index tables, IDX, config.

Weight container layout (all little-endian):

    magic "FASTCAPS" | version u32 | tensor_count u32
    per tensor: name_len u16 + UTF-8 name | dtype u8 (0 = float32,
    1 = int16 fixed-point) | frac_bits u8 (0 for float) | ndim u8 |
    dims ndim x u32 | payload row-major

Mask file layout (little-endian):

    magic "FCAPMASK" | version u32 | layer_count u32
    per layer: name_len u16 + name | granularity u8 (0 = kernel,
    1 = capsule_group) | kernel_count u32 | survival bitset
    (ceil(kernel_count / 8) bytes, LSB-first) | index_count u32 |
    surviving kernel ids index_count x u32

The explicit index list realizes the structured-pruning storage argument
(only surviving-kernel ids are kept); index_count must equal the bitset
popcount and the ids must match the set bits, or loading fails with an
integrity error. IDX files follow that format's big-endian convention.
All loaders raise ParseError with a byte offset instead of crashing on
truncated or corrupt input, and never read past declared lengths.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError
from .fxp import FxFormat, FxTensor

WEIGHT_MAGIC = b"FASTCAPS"
MASK_MAGIC = b"FCAPMASK"
FORMAT_VERSION = 1

_GRAN_CODES = {"kernel": 0, "capsule_group": 1}
_GRAN_NAMES = {v: k for k, v in _GRAN_CODES.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class _Reader:
    """Cursor over bytes that raises ParseError with the failing offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def done(self):
        if self.pos != len(self.data):
            raise ParseError(
                f"{len(self.data) - self.pos} trailing bytes after declared content",
                offset=self.pos,
            )


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {name!r}")
    return struct.pack("<H", len(raw)) + raw


def _read_name(r: _Reader) -> str:
    n = r.u16("name length")
    raw = r.take(n, "name")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"name is not valid UTF-8: {exc}", offset=r.pos - n) from None


# ---------------------------------------------------------------------------
# weight container


def save_weights(path, tensors: dict) -> None:
    """Write named tensors; float arrays as float32, FxTensor as int16+format."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    blob = [WEIGHT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(names))]
    for name in names:
        t = tensors[name]
        blob.append(_pack_name(name))
        if isinstance(t, FxTensor):
            arr = np.ascontiguousarray(t.raw, dtype="<i2")
            blob.append(struct.pack("<BBB", 1, t.fmt.frac_bits, arr.ndim))
        else:
            arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
            blob.append(struct.pack("<BBB", 0, 0, arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_weights(path) -> dict:
    """Parse a weight container back into an ordered name -> tensor dict."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(8, "magic")
    if magic != WEIGHT_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=8)
    count = r.u32("tensor count")
    out: dict = {}
    for _ in range(count):
        name = _read_name(r)
        if name in out:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        dtype = r.u8("dtype")
        frac = r.u8("frac_bits")
        ndim = r.u8("ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if dtype == 0:
            if frac != 0:
                raise ParseError(f"float tensor {name!r} has frac_bits {frac}", offset=r.pos)
            payload = r.take(4 * n, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        elif dtype == 1:
            if not 1 <= frac <= 15:
                raise ParseError(f"fixed tensor {name!r} has frac_bits {frac}", offset=r.pos)
            payload = r.take(2 * n, f"payload of {name!r}")
            raw = np.frombuffer(payload, dtype="<i2").reshape(dims).copy()
            out[name] = FxTensor(raw, FxFormat(frac))
        else:
            raise ParseError(f"unknown dtype {dtype} for tensor {name!r}", offset=r.pos - 3)
    r.done()
    return out


# ---------------------------------------------------------------------------
# mask / index file


@dataclass
class MaskEntry:
    """One layer's flat survival bitset plus its surviving-kernel id list."""

    name: str
    granularity: str
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).ravel()
        if self.granularity not in _GRAN_CODES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def kernel_count(self) -> int:
        return self.bits.size

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits).astype(np.uint32)


def save_mask(path, entries) -> None:
    blob = [MASK_MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for e in entries:
        blob.append(_pack_name(e.name))
        blob.append(struct.pack("<BI", _GRAN_CODES[e.granularity], e.kernel_count))
        blob.append(np.packbits(e.bits, bitorder="little").tobytes())
        idx = e.indices
        blob.append(struct.pack("<I", idx.size))
        blob.append(np.ascontiguousarray(idx, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_mask(path) -> list[MaskEntry]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(8, "magic")
    if magic != MASK_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MASK_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=8)
    count = r.u32("layer count")
    entries = []
    for _ in range(count):
        name = _read_name(r)
        gran = r.u8("granularity")
        if gran not in _GRAN_NAMES:
            raise ParseError(f"unknown granularity code {gran}", offset=r.pos - 1)
        kernels = r.u32("kernel count")
        nbytes = math.ceil(kernels / 8)
        bits = np.unpackbits(
            np.frombuffer(r.take(nbytes, "bitset"), dtype=np.uint8), bitorder="little"
        )[:kernels].astype(bool)
        n_idx = r.u32("index count")
        idx = np.frombuffer(r.take(4 * n_idx, "index list"), dtype="<u4")
        entry = MaskEntry(name, _GRAN_NAMES[gran], bits)
        if n_idx != int(bits.sum()) or not np.array_equal(idx, entry.indices):
            raise IntegrityError(
                f"layer {name!r}: index list disagrees with bitset popcount"
            )
        entries.append(entry)
    r.done()
    return entries


# ---------------------------------------------------------------------------
# IDX datasets


def load_idx(path, expect: str | None = None):
    """Load an IDX file: images -> (N, H, W) float32 in [0, 1], labels -> int64.

    `expect` may be "images" or "labels" to enforce the magic.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = struct.unpack(">I", r.take(4, "magic"))[0]
    if magic == IDX_IMAGES_MAGIC:
        kind = "images"
    elif magic == IDX_LABELS_MAGIC:
        kind = "labels"
    else:
        raise ParseError(f"unknown IDX magic 0x{magic:08x}", offset=0)
    if expect is not None and kind != expect:
        raise ParseError(f"expected {expect[:-1]} magic, found {kind}", offset=0)
    if kind == "images":
        n, h, w = struct.unpack(">III", r.take(12, "image dims"))
        payload = r.take(n * h * w, "image payload")
        r.done()
        data = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
        return data.astype(np.float32) / 255.0
    n = struct.unpack(">I", r.take(4, "label count"))[0]
    payload = r.take(n, "label payload")
    r.done()
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, images) -> None:
    """Write (N, H, W) images as IDX ubyte, scaling [0, 1] floats to 0..255."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("images must be (N, H, W)")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape))
        fh.write(arr.tobytes())


def save_idx_labels(path, labels) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, arr.size))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Typed view of a `key = value` config file, defaults filled in."""

    routing_iters: int = 3
    frac_bits: int = 8
    pe_count: int = 10
    fact: int = 10
    clock_hz: float = 100e6
    mode: str = "reference"
    sparsity: dict = field(default_factory=dict)
    granularity: dict = field(default_factory=dict)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        try:
            _apply_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def parse_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _apply_key(cfg: RunConfig, key: str, value: str):
    def as_int(lo=None, hi=None):
        try:
            v = int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ConfigError(f"{key} must be <= {hi}, got {v}")
        return v

    if key == "routing_iters":
        cfg.routing_iters = as_int(lo=1)
    elif key == "frac_bits":
        cfg.frac_bits = as_int(lo=1, hi=15)
    elif key == "pe_count":
        cfg.pe_count = as_int(lo=1)
    elif key == "fact":
        cfg.fact = as_int(lo=1)
    elif key == "clock_hz":
        try:
            v = float(value)
        except ValueError:
            raise ConfigError(f"clock_hz must be a number, got {value!r}")
        if v <= 0:
            raise ConfigError(f"clock_hz must be positive, got {v}")
        cfg.clock_hz = v
    elif key == "mode":
        if value not in ("reference", "optimized"):
            raise ConfigError(f"mode must be reference or optimized, got {value!r}")
        cfg.mode = value
    elif key.startswith("sparsity."):
        layer = key[len("sparsity.") :]
        try:
            v = float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}")
        if not 0.0 <= v < 1.0:
            raise ConfigError(f"{key} must be in [0, 1), got {v}")
        cfg.sparsity[layer] = v
    elif key.startswith("granularity."):
        layer = key[len("granularity.") :]
        if value not in _GRAN_CODES:
            raise ConfigError(f"{key} must be kernel or capsule_group, got {value!r}")
        cfg.granularity[layer] = value
    else:
        raise ConfigError(f"unknown key {key!r}")
