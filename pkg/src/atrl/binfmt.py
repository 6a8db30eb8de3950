"""The "ATRL" binary envelope shared by model checkpoints and spectra.

Layout (all little-endian)::

    b"ATRL" | u32 version | 4-byte section tag | u64 payload length | payload

Section ``MODL``: u64[9] budget, u32 length + UTF-8 JSON config, u32 tensor
count, then per tensor: u16 name length, name, u32 ndim, u64[ndim] dims,
float64 data in row-major order.

Section ``SPEC``: u64 K (singular values), u64 N (grid points), u32 length +
UTF-8 basis id, then float64 arrays sigma[K], points[N], weights[N],
left[N, K], right[N, K].
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATRL"
VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class SectionError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def text(self) -> str:
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _floats(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_envelope(path, tag: bytes, payload: bytes) -> None:
    if len(tag) != 4:
        raise ValueError("section tag must be 4 bytes")
    Path(path).write_bytes(MAGIC + struct.pack("<I", VERSION) + tag + struct.pack("<Q", len(payload)) + payload)


def read_envelope(path, tag: bytes) -> _Reader:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not an ATRL file")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    found = r.take(4)
    if found != tag:
        raise SectionError(f"{path}: section {found!r}, expected {tag!r}")
    (length,) = r.unpack("Q")
    return _Reader(r.take(length))


def write_model(path, budget: tuple[int, ...], config: dict, arrays: dict[str, np.ndarray]) -> None:
    out = io.BytesIO()
    out.write(struct.pack("<9Q", *budget))
    out.write(_text(json.dumps(config, sort_keys=True)))
    out.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.write(_floats(a))
    write_envelope(path, b"MODL", out.getvalue())


def read_model(path) -> tuple[tuple[int, ...], dict, dict[str, np.ndarray]]:
    r = read_envelope(path, b"MODL")
    budget = r.unpack("9Q")
    config = json.loads(r.text())
    (count,) = r.unpack("I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("I")
        dims = r.unpack(f"{ndim}Q")
        arrays[name] = r.floats(int(np.prod(dims))).reshape(dims)
    return budget, config, arrays


def write_spectral(path, sigma, points, weights, left, right, basis: str | None) -> None:
    k, n = len(sigma), len(points)
    if left.shape != (n, k) or right.shape != (n, k):
        raise ValueError(f"left/right must be ({n}, {k}), got {left.shape}, {right.shape}")
    payload = (
        struct.pack("<QQ", k, n)
        + _text(basis or "")
        + _floats(sigma)
        + _floats(points)
        + _floats(weights)
        + _floats(left)
        + _floats(right)
    )
    write_envelope(path, b"SPEC", payload)


def read_spectral(path):
    r = read_envelope(path, b"SPEC")
    k, n = r.unpack("QQ")
    basis = r.text() or None
    sigma = r.floats(k)
    points = r.floats(n)
    weights = r.floats(n)
    left = r.floats(n * k).reshape(n, k)
    right = r.floats(n * k).reshape(n, k)
    return sigma, points, weights, left, right, basis
