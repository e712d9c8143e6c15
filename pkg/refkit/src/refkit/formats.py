"""Independent readers/writers for the engine's binary interchange formats.

This module deliberately re-implements the weight-container, mask-file and
IDX layouts from their byte-level documentation rather than importing the
engine package: round-tripping files between the two implementations is the
cross-validation the formats exist for.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

WEIGHT_MAGIC = b"FASTCAPS"
MASK_MAGIC = b"FCAPMASK"
VERSION = 1

GRANULARITY_CODES = {0: "kernel", 1: "capsule_group"}


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_container(path, tensors: dict) -> None:
    """Write float32 arrays (or (int16 array, frac_bits) pairs) by name."""
    blob = [WEIGHT_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        blob.append(_name_bytes(name))
        if isinstance(value, tuple):
            raw, frac = value
            arr = np.ascontiguousarray(raw, dtype="<i2")
            blob.append(struct.pack("<BBB", 1, frac, arr.ndim))
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            blob.append(struct.pack("<BBB", 0, 0, arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def read_container(path) -> dict:
    """Read a weight container; fixed-point tensors come back as (raw, frac)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: bad weight-container magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        dtype, frac, ndim = struct.unpack_from("<BBB", data, pos)
        pos += 3
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if dtype == 0:
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
            out[name] = arr
        elif dtype == 1:
            raw = np.frombuffer(data, dtype="<i2", count=n, offset=pos).reshape(dims).copy()
            pos += 2 * n
            out[name] = (raw, frac)
        else:
            raise ValueError(f"{path}: unknown dtype {dtype}")
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return out


@dataclass
class MaskLayer:
    name: str
    granularity: str
    bits: np.ndarray


def read_mask(path) -> list[MaskLayer]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MASK_MAGIC:
        raise ValueError(f"{path}: bad mask-file magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 16
    layers = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        gran, kernels = struct.unpack_from("<BI", data, pos)
        pos += 5
        nbytes = math.ceil(kernels / 8)
        bits = np.unpackbits(
            np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos),
            bitorder="little",
        )[:kernels].astype(bool)
        pos += nbytes
        (nidx,) = struct.unpack_from("<I", data, pos)
        pos += 4
        idx = np.frombuffer(data, dtype="<u4", count=nidx, offset=pos)
        pos += 4 * nidx
        if nidx != int(bits.sum()) or not np.array_equal(idx, np.flatnonzero(bits)):
            raise ValueError(f"{path}: layer {name!r} index/bitset mismatch")
        layers.append(MaskLayer(name, GRANULARITY_CODES.get(gran, "kernel"), bits))
    return layers


def write_idx_images(path, images: np.ndarray) -> None:
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, *arr.shape))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, arr.size))
        fh.write(arr.tobytes())


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, n, h, w = struct.unpack_from(">IIII", data, 0)
    if magic != 0x00000803:
        raise ValueError(f"{path}: not an IDX image file")
    return (
        np.frombuffer(data, dtype=np.uint8, count=n * h * w, offset=16)
        .reshape(n, h, w)
        .astype(np.float32)
        / 255.0
    )


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != 0x00000801:
        raise ValueError(f"{path}: not an IDX label file")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(np.int64)
