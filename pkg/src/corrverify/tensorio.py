"""Binary tensor records (``CVT1``).

Layout, little-endian::

    b"CVT1" | u8 rank | u32 extent * rank | u8 dtype tag | [f32 scale, f32 zero] | payload

Tag 0 is a float32 payload; tag 1 is a uint8 payload carrying the affine
quantization scale and zero point.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVT1"
TAG_F32 = 0
TAG_U8Q = 1


class FormatError(ValueError):
    pass


def write_tensor(fh, arr: np.ndarray) -> int:
    """Write a float32 record; returns bytes written."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", TAG_F32)
    fh.write(head)
    fh.write(arr.tobytes())
    return len(head) + arr.nbytes


def write_quantized(fh, codes: np.ndarray, scale: float, zero: float) -> int:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    head = MAGIC + struct.pack("<B", codes.ndim) + struct.pack(f"<{codes.ndim}I", *codes.shape)
    head += struct.pack("<Bff", TAG_U8Q, scale, zero)
    fh.write(head)
    fh.write(codes.tobytes())
    return len(head) + codes.nbytes


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record ({what})")
    return buf


def read_record(fh):
    """Read one record.

    Returns ``("f32", array)`` or ``("u8q", (codes, scale, zero))``; ``None`` at
    a clean end of stream.
    """
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
    if not 1 <= rank <= 6:
        raise FormatError(f"unsupported tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    if any(n < 1 for n in shape):
        raise FormatError(f"degenerate extents {shape}")
    (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
    count = int(np.prod(shape))
    if tag == TAG_F32:
        data = np.frombuffer(_read_exact(fh, 4 * count, "payload"), dtype="<f4")
        return "f32", data.reshape(shape).astype(np.float32)
    if tag == TAG_U8Q:
        scale, zero = struct.unpack("<ff", _read_exact(fh, 8, "quantization"))
        codes = np.frombuffer(_read_exact(fh, count, "payload"), dtype=np.uint8).reshape(shape).copy()
        return "u8q", (codes, scale, zero)
    raise FormatError(f"unknown dtype tag {tag}")


def read_tensor(fh) -> np.ndarray:
    """Read one float32 record."""
    rec = read_record(fh)
    if rec is None:
        raise FormatError("unexpected end of stream")
    kind, payload = rec
    if kind != "f32":
        raise FormatError("expected a float32 tensor record")
    return payload


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
