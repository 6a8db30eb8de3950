"""Exactly evaluable targets H_t(x) = F(sum_s softmax_s[G(x(t), x(s))] rho(x(s))).

F is a scalar expression in ``z0 .. z{n_rho-1}``, rho a list of expressions
in ``u0 .. u{d-1}`` and G either a spectral factorization with an analytic
basis (d = 1) or an expression in ``u0 .., v0 ..``. For d = 1 the names
``u``/``v`` and, for n_rho = 1, ``z`` are accepted as aliases.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import softmax_np
from .expr import Expr
from .pod import QuadratureGrid, SpectralFactorization, nonzero_mask, basis_functions, basis_pair, fit_decay_exponent, pod

SPEC_VERSION = 1
DEFAULT_K = 64


class DomainError(ValueError):
    pass


class LipschitzError(ValueError):
    pass


@dataclass
class TargetSpec:
    F: Expr
    rho: list[Expr]
    G: SpectralFactorization | Expr
    tau: int
    d: int = 1

    def __post_init__(self):
        if self.tau < 1 or self.d < 1:
            raise ValueError("tau and d must be positive")
        if not self.rho:
            raise ValueError("rho needs at least one component")
        if isinstance(self.G, SpectralFactorization) and (self.G.basis is None or self.d != 1):
            raise ValueError("spectral G needs an analytic basis and d = 1")
        # rho must map into the unit cube; checked on a sample of the domain
        us = _sample_cube(self.d, 1001).T[None]  # (1, d, P)
        vals = rho_values(self, us)
        if not np.isfinite(vals).all() or vals.min() < -1e-12 or vals.max() > 1 + 1e-12:
            raise DomainError("rho leaves [0, 1] on sampled inputs")

    @property
    def n_rho(self) -> int:
        return len(self.rho)


@dataclass
class ComplexityReport:
    C0: float
    C1: float
    alpha: float
    K_F: float
    sup_rho: float
    sup_phi_psi: float
    truncated_index_range: bool = False


# ---------------------------------------------------------------------------
# construction


def make_spectral_G(
    alpha: float,
    r: int | None,
    basis: str = "cosine",
    grid: QuadratureGrid | None = None,
    K: int = DEFAULT_K,
    allow_outside_theory: bool = False,
) -> SpectralFactorization:
    """sigma_k = k^-alpha for k <= r (all K terms when r is None), zero beyond.

    With ``basis="cosine"`` both singular families are sqrt(2) cos(k pi u);
    ``"cosine-sine"`` pairs them with right functions sqrt(2) sin(k pi u),
    which removes the diagonal peak a symmetric positive kernel has.
    Functions are sampled on ``grid`` (midpoint, 256 points by default).
    """
    if alpha <= 0.5:
        if not allow_outside_theory:
            raise ValueError(f"decay exponent must exceed 1/2, got {alpha}")
        warnings.warn(f"decay exponent {alpha} <= 1/2 is outside the rate theorem's regime", stacklevel=2)
    if r is not None and not 1 <= r <= K:
        raise ValueError(f"rank must be in [1, {K}] or None for infinite, got {r}")
    grid = grid or QuadratureGrid.midpoint(256)
    k = np.arange(1, K + 1, dtype=float)
    sigma = k**-alpha
    if r is not None:
        sigma[r:] = 0.0
    left, right = basis_pair(basis)
    phi = basis_functions(left, K, grid.points)
    psi = basis_functions(right, K, grid.points)
    return SpectralFactorization(sigma, phi, psi, grid, basis)


def sigmoid_sum_F(n_rho: int, terms: int = 3, seed: int = 0, gain: float = 4.0) -> Expr:
    """F(z) = sum_j a_j sigmoid(w_j . z + b_j) with seeded, rounded coefficients."""
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(terms):
        a = round(float(rng.uniform(0.5, 1.5)), 4)
        w = np.round(rng.normal(0.0, gain, size=n_rho), 4)
        b = round(float(-w.sum() / 2 + rng.normal(0.0, 0.5)), 4)
        lin = " + ".join(f"{float(wi)!r}*z{i}" for i, wi in enumerate(w))
        parts.append(f"{a!r}*sigmoid({lin} + {b!r})")
    return Expr(" + ".join(parts))


def smooth_rho(n_rho: int = 4, d: int = 1) -> list[Expr]:
    """Coordinatewise maps into [0, 1]: 0.5 + 0.5 sin((i+1) pi u + i)."""
    comps = []
    for i in range(n_rho):
        var = f"u{i % d}"
        comps.append(Expr(f"0.5 + 0.5*sin({i + 1}*pi*{var} + {i})"))
    return comps


SWEEP_BASIS = "cosine-sine"


def sweep_target(
    alpha: float, r: int | None, tau: int = 4, n_rho: int = 4, seed: int = 0, basis: str = SWEEP_BASIS, **kw
) -> TargetSpec:
    """Default target for the width sweep: fixed sigmoid-sum F, smooth rho, spectral G."""
    return TargetSpec(sigmoid_sum_F(n_rho, seed=seed), smooth_rho(n_rho), make_spectral_G(alpha, r, basis, **kw), tau, 1)


# ---------------------------------------------------------------------------
# evaluation


def _env(prefix: str, values: np.ndarray, alias: bool) -> dict:
    # values has the variable index on axis 0
    env = {f"{prefix}{i}": values[i] for i in range(values.shape[0])}
    if alias:
        env[prefix] = values[0]
    return env


def _check_domain(spec: TargetSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    if xb.ndim != 3 or xb.shape[1:] != (spec.d, spec.tau):
        raise DomainError(f"expected (d, tau) = {(spec.d, spec.tau)} sequences, got {x.shape}")
    if not np.isfinite(xb).all() or xb.min(initial=0.0) < 0.0 or xb.max(initial=0.0) > 1.0:
        raise DomainError("inputs must lie in [0, 1]")
    return xb, single


def kernel_matrix(spec: TargetSpec, xb: np.ndarray) -> np.ndarray:
    """``(B, tau, tau)`` array of G(x(t), x(s)) with t on axis 1."""
    if isinstance(spec.G, SpectralFactorization):
        u = xb[:, 0, :]
        left, right = basis_pair(spec.G.basis)
        phi = basis_functions(left, len(spec.G.sigma), u)  # (B, tau, K)
        psi = basis_functions(right, len(spec.G.sigma), u)
        return np.einsum("btk,k,bsk->bts", phi, spec.G.sigma, psi)
    u = np.moveaxis(xb, 1, 0)[:, :, :, None]  # (d, B, tau, 1)
    v = np.moveaxis(xb, 1, 0)[:, :, None, :]  # (d, B, 1, tau)
    env = {**_env("u", u, spec.d == 1), **_env("v", v, spec.d == 1)}
    vals = np.broadcast_to(spec.G(**env), (xb.shape[0], spec.tau, spec.tau))
    if not np.isfinite(vals).all():
        raise DomainError("G is not finite on these inputs")
    return np.array(vals)


def kernel_function(spec: TargetSpec):
    """Vectorised ``(u, v) -> G(u, v)`` for a target with scalar inputs (d = 1)."""
    if spec.d != 1:
        raise ValueError("kernel_function needs d = 1")
    if isinstance(spec.G, SpectralFactorization):
        return spec.G.evaluate
    return lambda u, v: spec.G(**_env("u", np.asarray(u)[None], True), **_env("v", np.asarray(v)[None], True))


def rho_values(spec: TargetSpec, xb: np.ndarray) -> np.ndarray:
    """``(B, tau, n_rho)`` array of rho(x(s))."""
    u = np.moveaxis(xb, 1, 0)  # (d, B, tau)
    env = _env("u", u, spec.d == 1)
    return np.stack([np.broadcast_to(c(**env), u.shape[1:]) for c in spec.rho], axis=-1)


def eval_F(spec: TargetSpec, z: np.ndarray) -> np.ndarray:
    """F on ``(..., n_rho)`` arguments."""
    env = _env("z", np.moveaxis(z, -1, 0), spec.n_rho == 1)
    return np.broadcast_to(spec.F(**env), z.shape[:-1]).copy()


def ground_truth_graph(spec: TargetSpec, x) -> np.ndarray:
    """Row-stochastic matrix softmax_s G(x(t), x(s)) per sequence."""
    xb, single = _check_domain(spec, x)
    a = softmax_np(kernel_matrix(spec, xb), axis=-1)
    return a[0] if single else a


def eval_target(spec: TargetSpec, x) -> np.ndarray:
    """H_t(x) for every t: ``(tau,)`` for one sequence, ``(B, tau)`` for a batch."""
    xb, single = _check_domain(spec, x)
    a = softmax_np(kernel_matrix(spec, xb), axis=-1)
    z = a @ rho_values(spec, xb)  # (B, tau, n_rho)
    y = eval_F(spec, z)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# complexity measures


def _central_grad(f, pts: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grads = np.empty_like(pts)
    for j in range(pts.shape[-1]):
        hi, lo = pts.copy(), pts.copy()
        hi[:, j] += step
        lo[:, j] -= step
        grads[:, j] = (f(hi) - f(lo)) / (hi[:, j] - lo[:, j])
    return grads


def _sample_cube(dim: int, per_dim: int, seed: int = 0) -> np.ndarray:
    if dim == 1:
        return np.linspace(0.0, 1.0, per_dim)[:, None]
    rng = np.random.default_rng(seed)
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * dim)).reshape(dim, -1).T if dim <= 10 else np.empty((0, dim))
    return np.vstack([corners, rng.random((per_dim * dim, dim))])


def complexity_measures(spec: TargetSpec, alpha: float, per_dim: int = 10_000, blowup: float = 1e6) -> ComplexityReport:
    """Complexity of the stored representation (F, G, rho), not an infimum.

    K_F is the largest central-difference gradient norm of F over [0,1]^n_rho;
    sup norms are maxima over a dense grid (d = 1) or ``per_dim * dim``
    seeded samples plus the cube corners. For infinite-rank spectra the max
    over basis functions runs over the stored terms only, which is flagged.
    """
    zs = _sample_cube(spec.n_rho, per_dim)
    g = _central_grad(lambda z: eval_F(spec, z), zs)
    norms = np.sqrt(np.sum(g * g, axis=1))
    if not np.isfinite(norms).all() or norms.max() > blowup:
        raise LipschitzError(f"F gradient blows up on the sample grid (max {norms.max():.3e})")
    K_F = float(norms.max())

    us = _sample_cube(spec.d, per_dim).T[None]  # (1, d, P)
    rho = rho_values(spec, us)
    sup_rho = float(np.max(np.abs(rho)))

    if isinstance(spec.G, SpectralFactorization):
        sigma = np.asarray(spec.G.sigma, float)
        u = np.linspace(0.0, 1.0, per_dim)
        left, right = basis_pair(spec.G.basis)
        sup_phi = np.max(np.abs(basis_functions(left, len(sigma), u)), axis=0)
        sup_psi = np.max(np.abs(basis_functions(right, len(sigma), u)), axis=0)
    else:
        if spec.d != 1:
            raise ValueError("POD of an expression kernel is only supported for d = 1")
        grid = QuadratureGrid.midpoint(256)
        fact = pod(lambda u, v: spec.G(u=u, v=v, u0=u, v0=v), grid)
        sigma = fact.sigma[:DEFAULT_K]
        sup_phi = np.max(np.abs(fact.left[:, :DEFAULT_K]), axis=0)
        sup_psi = np.max(np.abs(fact.right[:, :DEFAULT_K]), axis=0)
    live = nonzero_mask(sigma)
    k = np.arange(1, len(sigma) + 1)
    C1 = float(np.max(sigma[live] * k[live] ** alpha)) if live.any() else 0.0
    sup_phi_psi = float(np.max((sup_phi + sup_psi)[live])) if live.any() else 0.0
    scale = K_F * sup_rho
    C0 = scale * max(sup_phi_psi, 1.0 / scale) if scale > 0 else 0.0
    return ComplexityReport(C0, C1, alpha, K_F, sup_rho, sup_phi_psi, bool(live.all()))


def measured_decay(spec: TargetSpec) -> tuple[float, float]:
    """(c, alpha) fitted to the spectrum of the stored G."""
    return fit_decay_exponent(spec.G.sigma)


# ---------------------------------------------------------------------------
# text serialisation


def spec_to_dict(spec: TargetSpec) -> dict:
    if isinstance(spec.G, SpectralFactorization):
        G = {
            "kind": "spectral",
            "basis": spec.G.basis,
            "sigma": [float(s) for s in spec.G.sigma],
            "grid": int(spec.G.grid.size),
        }
    else:
        G = {"kind": "expression", "expr": spec.G.text}
    return {
        "version": SPEC_VERSION,
        "tau": spec.tau,
        "d": spec.d,
        "F": spec.F.text,
        "rho": [c.text for c in spec.rho],
        "G": G,
    }


def spec_from_dict(doc: dict) -> TargetSpec:
    allowed = {"version", "tau", "d", "F", "rho", "G"}
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown target spec keys: {sorted(extra)}")
    if doc.get("version") != SPEC_VERSION:
        raise ValueError(f"unsupported target spec version {doc.get('version')!r}")
    g = doc["G"]
    if g["kind"] == "spectral":
        if set(g) - {"kind", "basis", "sigma", "grid"}:
            raise ValueError(f"unknown spectral G keys: {sorted(set(g) - {'kind', 'basis', 'sigma', 'grid'})}")
        sigma = np.array(g["sigma"], dtype=float)
        grid = QuadratureGrid.midpoint(int(g.get("grid", 256)))
        left, right = basis_pair(g["basis"])
        phi = basis_functions(left, len(sigma), grid.points)
        psi = basis_functions(right, len(sigma), grid.points)
        G = SpectralFactorization(sigma, phi, psi, grid, g["basis"])
    elif g["kind"] == "expression":
        G = Expr(g["expr"])
    else:
        raise ValueError(f"unknown G kind {g['kind']!r}")
    return TargetSpec(Expr(doc["F"]), [Expr(t) for t in doc["rho"]], G, int(doc["tau"]), int(doc.get("d", 1)))


def save_spec(spec: TargetSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


def load_spec(path) -> TargetSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))
