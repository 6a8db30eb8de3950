"""Synthetic sequence datasets: N-body gravity, causal convolutions, and
samples of exactly evaluable targets, plus the SEQD binary format.

SEQD layout (little-endian)::

    b"SEQD" | u32 version | u32 tau | u32 d | u32 d_out | u64 count
    | u32 filter flag [| u32 kind code | f64[tau] rho]
    | count * (f64[d * tau] x, f64[d_out * tau] y)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binfmt import BadMagicError, FormatError, TruncatedError, VersionError, _Reader
from .targets import TargetSpec, eval_target

SEQD_MAGIC = b"SEQD"
SEQD_VERSION = 1
FILTER_KINDS = ("exponential", "random")
GRAVITY_EPS = 0.05
MASS_RANGE = (0.1, 1.0)


@dataclass(frozen=True)
class ConvolutionFilter:
    rho: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"filter kind must be one of {FILTER_KINDS}, got {self.kind!r}")


@dataclass
class Dataset:
    x: np.ndarray  # (count, d, tau)
    y: np.ndarray  # (count, d_out, tau)
    filter: ConvolutionFilter | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 3 or self.y.ndim != 3:
            raise ValueError(f"x and y must be (count, dim, tau), got {self.x.shape}, {self.y.shape}")
        if self.x.shape[0] != self.y.shape[0] or self.x.shape[2] != self.y.shape[2]:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} disagree on count or tau")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def tau(self) -> int:
        return self.x.shape[2]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def d_out(self) -> int:
        return self.y.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.filter, dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        same_filter = (self.filter is None and other.filter is None) or (
            self.filter is not None
            and other.filter is not None
            and self.filter.kind == other.filter.kind
            and np.array_equal(self.filter.rho, other.filter.rho)
        )
        return same_filter and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)


# ---------------------------------------------------------------------------
# gravity


def gravity_accelerations(x: np.ndarray, eps: float = GRAVITY_EPS, causal: bool = False) -> np.ndarray:
    """``(..., 3, tau)`` particles (x, y, mass) to ``(..., 2, tau)`` accelerations.

    Pull of s on t is M(s) / max(dist, eps)^2 along the unit vector from t
    to s, with G = 1. ``causal`` keeps only sources s < t.
    """
    pos, mass = x[..., :2, :], x[..., 2, :]
    diff = pos[..., :, None, :] - pos[..., :, :, None]  # [.., c, t, s] = pos_s - pos_t
    dist = np.sqrt(np.sum(diff * diff, axis=-3))
    tau = x.shape[-1]
    mask = ~np.eye(tau, dtype=bool)
    if causal:
        mask &= np.tril(np.ones((tau, tau), dtype=bool), k=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None, :, :] > 0, diff / dist[..., None, :, :], 0.0)
    strength = np.where(mask, mass[..., None, :] / np.maximum(dist, eps) ** 2, 0.0)
    return np.sum(strength[..., None, :, :] * unit, axis=-1)


def gen_gravity(
    tau: int, count: int, seed: int, eps: float = GRAVITY_EPS, causal: bool = False, mass_range=MASS_RANGE
) -> Dataset:
    if tau < 2:
        raise ValueError("gravity needs at least two particles")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    pos = rng.random((count, 2, tau))
    mass = rng.uniform(*mass_range, size=(count, 1, tau))
    x = np.concatenate([pos, mass], axis=1)
    return Dataset(x, gravity_accelerations(x, eps, causal), meta={"kind": "gravity", "eps": eps, "causal": causal})


def gravity_graph(x, eps: float = GRAVITY_EPS) -> np.ndarray:
    """Row-normalised M(s) / dist(t, s)^2 with zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    pos, mass = x[..., :2, :], x[..., 2, :]
    diff = pos[..., :, None, :] - pos[..., :, :, None]
    dist = np.sqrt(np.sum(diff * diff, axis=-3))
    tau = x.shape[-1]
    w = np.where(~np.eye(tau, dtype=bool), mass[..., None, :] / np.maximum(dist, eps) ** 2, 0.0)
    rows = w.sum(axis=-1, keepdims=True)
    if np.any(rows <= 0):
        raise ValueError("gravity graph has a row with no positive weight")
    return w / rows


# ---------------------------------------------------------------------------
# convolutions


def make_filter(kind: str, tau: int, rng: np.random.Generator | None = None) -> ConvolutionFilter:
    if kind == "exponential":
        return ConvolutionFilter(np.exp(-np.arange(tau, dtype=float)), kind)
    if kind == "random":
        if rng is None:
            raise ValueError("a random filter needs a generator")
        return ConvolutionFilter(rng.random(tau), kind)
    raise ValueError(f"filter kind must be one of {FILTER_KINDS}, got {kind!r}")


def convolve(rho: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y(t) = sum_{s=0}^t rho(s) x(t - s) along the last axis."""
    tau = x.shape[-1]
    lag = np.arange(tau)[:, None] - np.arange(tau)[None, :]  # [t, j] = t - j
    T = np.where(lag >= 0, np.asarray(rho)[np.clip(lag, 0, tau - 1)], 0.0)
    return x @ T.T


def gen_linear_functional(kind: str, tau: int = 32, count: int = 10_000, seed: int = 0) -> Dataset:
    """Scalar U[0, 1] inputs through a causal filter drawn once per dataset."""
    rng = np.random.default_rng(seed)
    filt = make_filter(kind, tau, rng)
    x = rng.random((count, 1, tau))
    return Dataset(x, convolve(filt.rho, x), filt, {"kind": f"linear-{kind}"})


def rotate_left(tau: int, k: int = 10) -> np.ndarray:
    """Index array moving the first k positions to the end."""
    return np.roll(np.arange(tau), -k)


def apply_permutation(ds: Dataset, p) -> Dataset:
    """Reorder every input sequence as x[..., p]; targets stay put."""
    p = np.asarray(p)
    if p.ndim != 1 or len(p) != ds.tau:
        raise ValueError(f"permutation of length {p.size} for sequences of length {ds.tau}")
    if not np.array_equal(np.sort(p), np.arange(ds.tau)):
        raise ValueError("not a permutation")
    return Dataset(ds.x[..., p], ds.y.copy(), ds.filter, dict(ds.meta))


def inverse_permutation(p) -> np.ndarray:
    p = np.asarray(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


# ---------------------------------------------------------------------------
# target-form samples


def gen_target_form_dataset(spec: TargetSpec, count: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.random((count, spec.d, spec.tau))
    y = eval_target(spec, x)[:, None, :] if count else np.zeros((0, 1, spec.tau))
    return Dataset(x, y, meta={"kind": "target"})


# ---------------------------------------------------------------------------
# I/O


def save_dataset(ds: Dataset, path) -> None:
    parts = [SEQD_MAGIC, struct.pack("<IIIIQ", SEQD_VERSION, ds.tau, ds.d, ds.d_out, len(ds))]
    if ds.filter is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<II", 1, FILTER_KINDS.index(ds.filter.kind)))
        parts.append(np.ascontiguousarray(ds.filter.rho, dtype="<f8").tobytes())
    flat = np.concatenate([ds.x.reshape(len(ds), -1), ds.y.reshape(len(ds), -1)], axis=1)
    parts.append(np.ascontiguousarray(flat, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != SEQD_MAGIC:
        raise BadMagicError(f"{path}: not a SEQD file")
    (version,) = r.unpack("I")
    if version != SEQD_VERSION:
        raise VersionError(f"{path}: dataset version {version}, expected {SEQD_VERSION}")
    tau, d, d_out, count = r.unpack("IIIQ")
    (flag,) = r.unpack("I")
    filt = None
    if flag:
        (code,) = r.unpack("I")
        if code >= len(FILTER_KINDS):
            raise FormatError(f"{path}: unknown filter code {code}")
        filt = ConvolutionFilter(r.floats(tau), FILTER_KINDS[code])
    flat = r.floats(count * (d + d_out) * tau).reshape(count, (d + d_out) * tau)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    x = flat[:, : d * tau].reshape(count, d, tau)
    y = flat[:, d * tau :].reshape(count, d_out, tau)
    return Dataset(x, y, filt)


def export_csv(ds: Dataset, path) -> None:
    """One row per (sample, t) with columns sample, t, x0.., y0.."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t"] + [f"x{i}" for i in range(ds.d)] + [f"y{i}" for i in range(ds.d_out)])
        for i in range(len(ds)):
            for t in range(ds.tau):
                w.writerow([i, t] + [repr(float(v)) for v in ds.x[i, :, t]] + [repr(float(v)) for v in ds.y[i, :, t]])
