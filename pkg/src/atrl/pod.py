"""Proper orthogonal decomposition of bivariate functions on quadrature grids.

A kernel G sampled on a grid with weights w is reduced to the matrix
``W^{1/2} G W^{1/2}`` whose SVD ``U S V^T`` gives singular values S and
singular functions ``phi_k = U[:, k] / sqrt(w)``, ``psi_k = V[:, k] / sqrt(w)``,
orthonormal in the weighted inner product ``<f, g>_w = sum_i w_i f_i g_i``.

The SVD is a one-sided (Hestenes) Jacobi iteration with a round-robin pair
ordering, so each step rotates n/2 disjoint column pairs at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binfmt


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureGrid:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p, w = np.asarray(self.points, float), np.asarray(self.weights, float)
        if p.ndim != 1 or p.shape != w.shape or p.size < 1:
            raise ValueError("points and weights must be equal-length 1-D arrays")
        if np.any(np.diff(p) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")

    @classmethod
    def midpoint(cls, n: int = 256, a: float = 0.0, b: float = 1.0) -> "QuadratureGrid":
        """Composite midpoint rule with ``n`` cells on ``[a, b]``."""
        if n < 1 or not b > a:
            raise ValueError("need n >= 1 and b > a")
        h = (b - a) / n
        return cls(a + h * (np.arange(n) + 0.5), np.full(n, h))

    @property
    def size(self) -> int:
        return len(self.points)

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return (f * self.weights[:, None]).T @ g if f.ndim == 2 else np.sum(self.weights * f * g)


@dataclass
class SpectralFactorization:
    """``G(u, v) = sum_k sigma[k] left[:, k](u) right[:, k](v)`` on ``grid``.

    ``basis`` names an analytic family for the singular functions (so G can
    be evaluated off the grid); it is None for factorizations found by POD.
    """

    sigma: np.ndarray
    left: np.ndarray  # (N, K)
    right: np.ndarray  # (N, K)
    grid: QuadratureGrid
    basis: str | None = None

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(nonzero_mask(self.sigma)))

    def matrix(self, r: int | None = None) -> np.ndarray:
        """Grid samples of the rank-r truncation (all terms when r is None)."""
        k = len(self.sigma) if r is None else min(r, len(self.sigma))
        return (self.left[:, :k] * self.sigma[:k]) @ self.right[:, :k].T

    def evaluate(self, u, v) -> np.ndarray:
        if self.basis is None:
            raise ValueError("factorization has no analytic basis; evaluate on the grid with matrix()")
        left, right = basis_pair(self.basis)
        phi = basis_functions(left, len(self.sigma), u)
        psi = basis_functions(right, len(self.sigma), v)
        return np.einsum("...k,k,...k->...", phi, self.sigma, psi)

    def save(self, path) -> None:
        binfmt.write_spectral(path, self.sigma, self.grid.points, self.grid.weights, self.left, self.right, self.basis)

    @classmethod
    def load(cls, path) -> "SpectralFactorization":
        sigma, points, weights, left, right, basis = binfmt.read_spectral(path)
        return cls(sigma, left, right, QuadratureGrid(points, weights), basis)


# basis id -> (family of the left functions phi_k, family of the right functions psi_k)
BASES = {"cosine": ("cosine", "cosine"), "cosine-sine": ("cosine", "sine")}


def basis_pair(basis: str) -> tuple[str, str]:
    try:
        return BASES[basis]
    except KeyError:
        raise ValueError(f"unknown basis {basis!r}; known: {sorted(BASES)}") from None


def basis_functions(family: str, k: int, u) -> np.ndarray:
    """``(..., k)`` array of sqrt(2) cos(j pi u) or sqrt(2) sin(j pi u), j = 1..k.

    Both families are orthonormal on [0, 1], and exactly so under the
    midpoint rule with more than k cells.
    """
    u = np.asarray(u, dtype=float)
    ks = np.arange(1, k + 1)
    if family == "cosine":
        return np.sqrt(2.0) * np.cos(np.pi * u[..., None] * ks)
    if family == "sine":
        return np.sqrt(2.0) * np.sin(np.pi * u[..., None] * ks)
    raise ValueError(f"unknown basis family {family!r}")


# ---------------------------------------------------------------------------
# one-sided Jacobi SVD


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint pairs covering all pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        a = np.array(players[:half])
        b = np.array(players[half:][::-1])
        rounds.append((np.minimum(a, b), np.maximum(a, b)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd(M, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``M = U diag(S) V^T`` with S decreasing.

    For an (m, n) input with k = min(m, n), U is (m, k) and V is (n, k).
    Raises ConvergenceError when the largest normalised column inner
    product is still above ``tol`` after ``max_sweeps`` sweeps.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError(f"svd needs a non-empty matrix, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("svd: non-finite entries")
    if A.shape[0] < A.shape[1]:
        V, S, U = svd(A.T, tol, max_sweeps)
        return U, S, V

    m, n = A.shape
    npad = n + (n % 2)
    # rows of Ut / Vt are the columns being rotated; row gathers are contiguous
    Ut = np.zeros((npad, m))
    Ut[:n] = A.T
    Vt = np.eye(npad)
    scale = np.linalg.norm(A)
    # columns below this norm are numerically zero and are left unrotated
    tiny = max((scale * np.finfo(np.float64).eps) ** 2, np.finfo(np.float64).tiny)
    schedule = _round_robin(npad) if npad > 1 else []

    off = np.inf
    for _sweep in range(max_sweeps):
        off = 0.0
        for p, q in schedule:
            up, uq = Ut[p], Ut[q]
            alpha = np.einsum("ij,ij->i", up, up)
            beta = np.einsum("ij,ij->i", uq, uq)
            gamma = np.einsum("ij,ij->i", up, uq)
            denom = np.sqrt(alpha * beta)
            active = (alpha > tiny) & (beta > tiny) & (np.abs(gamma) > tol * denom)
            if not active.any():
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / denom[active])))
            if not active.all():
                p, q, up, uq = p[active], q[active], up[active], uq[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            Ut[p] = c * up - s * uq
            Ut[q] = s * up + c * uq
            vp, vq = Vt[p], Vt[q]
            Vt[p] = c * vp - s * vq
            Vt[q] = s * vp + c * vq
        if off <= tol:
            break
    else:
        G = Ut[:n] @ Ut[:n].T
        resid = np.linalg.norm(G - np.diag(np.diag(G)))
        raise ConvergenceError(
            f"one-sided Jacobi did not converge in {max_sweeps} sweeps: "
            f"max normalised off-diagonal {off:.3e}, Gram residual {resid:.3e}"
        )
    U, V = Ut[:n].T, Vt[:n, :n].T
    S = np.linalg.norm(U, axis=0)
    order = np.argsort(-S, kind="stable")
    S, U, V = S[order], U[:, order], V[:, order]
    good = S > scale * 1e-15 * max(m, n)
    U[:, good] /= S[good]
    U = _complete_orthonormal(U, good)
    return U, S, V


def _complete_orthonormal(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns not flagged ``good`` by an orthonormal completion."""
    if good.all():
        return U
    B = U[:, good]
    Q, _ = np.linalg.qr(np.hstack([B, np.eye(U.shape[0])]), mode="complete")
    filled = U.copy()
    filled[:, ~good] = Q[:, B.shape[1] : B.shape[1] + int((~good).sum())]
    return filled


# ---------------------------------------------------------------------------
# POD and truncation


def sample_kernel(G, grid: QuadratureGrid) -> np.ndarray:
    if callable(G):
        u, v = np.meshgrid(grid.points, grid.points, indexing="ij")
        vals = np.asarray(G(u, v), dtype=float)
        vals = np.broadcast_to(vals, u.shape)
    else:
        vals = np.asarray(G, dtype=float)
    if vals.shape != (grid.size, grid.size):
        raise ValueError(f"kernel samples have shape {vals.shape}, grid needs {(grid.size, grid.size)}")
    if not np.isfinite(vals).all():
        raise ValueError("kernel has non-finite values on the grid")
    return vals


def pod(G, grid: QuadratureGrid) -> SpectralFactorization:
    """POD of ``G`` (a vectorised ``G(u, v)`` or an (N, N) sample matrix)."""
    if grid.size < 2:
        raise ValueError("POD needs at least 2 grid points")
    vals = sample_kernel(G, grid)
    sw = np.sqrt(grid.weights)
    U, S, V = svd(sw[:, None] * vals * sw[None, :])
    return SpectralFactorization(S, U / sw[:, None], V / sw[:, None], grid)


def truncation_error(fact: SpectralFactorization, r: int) -> float:
    """Root-sum-square of the discarded singular values (best rank-r error)."""
    if r < 0:
        raise ValueError("rank must be non-negative")
    tail = np.asarray(fact.sigma, float)[r:]
    return float(np.sqrt(np.sum(tail * tail)))


def weighted_l2(fact_or_grid, E: np.ndarray) -> float:
    grid = fact_or_grid.grid if isinstance(fact_or_grid, SpectralFactorization) else fact_or_grid
    w = grid.weights
    return float(np.sqrt(np.sum(w[:, None] * w[None, :] * E * E)))


def nonzero_mask(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, float)
    if sigma.size == 0 or sigma.max() <= 0:
        return np.zeros(sigma.shape, bool)
    return sigma > sigma.max() * 1e-12


def fit_decay_exponent(sigma) -> tuple[float, float]:
    """Power-law fit ``sigma_k <= c k^-alpha``.

    alpha is minus the least-squares slope of log sigma_k against log k over
    the nonzero values; c = max_k sigma_k k^alpha so the bound holds on
    every data point.
    """
    sigma = np.asarray(sigma, float)
    mask = nonzero_mask(sigma)
    if mask.sum() < 3:
        raise ValueError(f"need at least 3 nonzero singular values, got {int(mask.sum())}")
    k = np.arange(1, len(sigma) + 1)[mask]
    s = sigma[mask]
    slope, _ = np.polyfit(np.log(k), np.log(s), 1)
    alpha = -float(slope)
    c = float(np.max(s * k**alpha))
    return c, alpha


def decay_fit_residual(sigma) -> float:
    """RMS residual of the log-log regression used by fit_decay_exponent."""
    sigma = np.asarray(sigma, float)
    mask = nonzero_mask(sigma)
    k = np.log(np.arange(1, len(sigma) + 1)[mask])
    s = np.log(sigma[mask])
    coef = np.polyfit(k, s, 1)
    return float(np.sqrt(np.mean((np.polyval(coef, k) - s) ** 2)))
