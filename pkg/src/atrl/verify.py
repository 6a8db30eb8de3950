"""Invariant suites shared by the `verify` command and the test suite.

Each suite draws its own seeded instances and returns a SuiteResult with
the worst error seen, so callers can print one line per suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .pod import QuadratureGrid, pod, truncation_error, weighted_l2
from .targets import make_spectral_G
from .transformer import (
    ModelBudget,
    TransformerModel,
    attention_forward,
    build_kolmogorov_skeleton,
    init_transformer,
    kolmogorov_dims,
    model_forward,
)

GRAD_TOL = 1e-5
EQUIV_TOL = 1e-10
EY_TOL = 1e-8
ROUNDTRIP_TOL = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3e} (tol {self.tolerance:.0e}, {self.cases} cases)"


# ---------------------------------------------------------------------------
# gradients


def _unary_cases(rng) -> dict[str, Callable]:
    shp = tuple(rng.integers(1, 5, size=rng.integers(2, 4)))
    kinds = ("sigmoid", "tanh", "identity")
    k = kinds[rng.integers(len(kinds))]
    axis = int(rng.integers(-len(shp), len(shp)))
    idx = int(rng.integers(shp[-1]))
    c = float(rng.normal())
    flat = (int(np.prod(shp)),)
    keep = bool(rng.integers(2))
    return {
        "scale": (shp, lambda t: ad.scale(t, c)),
        "transpose": (shp, ad.transpose),
        "activation": (shp, lambda t: ad.activation(t, k)),
        # relu kink avoided by shifting inputs away from zero below
        "activation_relu": (shp, lambda t: ad.activation(t, "relu")),
        "softmax": (shp, lambda t: ad.softmax(t, axis)),
        "sum": (shp, lambda t: ad.tsum(t, axis, keepdims=keep)),
        "sum_all": (shp, ad.tsum),
        "take_last": (shp, lambda t: ad.take_last(t, idx)),
        "reshape": (shp, lambda t: ad.reshape(t, flat)),
    }


def _binary_cases(rng) -> dict[str, tuple]:
    b, m, k, n = (int(v) for v in rng.integers(1, 5, size=4))
    other = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    same = other(b, m, n)
    row = other(1, n)
    Wl = other(m, k)
    Xr = other(b, k, n)
    Wr = other(k, n)
    T = other(b, m, n)
    return {
        "add": ((b, m, n), lambda t: ad.add(t, same)),
        "add_broadcast": ((b, m, n), lambda t: ad.add(row, t)),
        "sub": ((b, m, n), lambda t: ad.sub(same, t)),
        "mul": ((b, m, n), lambda t: ad.mul(t, same)),
        "mul_broadcast": ((1, n), lambda t: ad.mul(same, t)),
        "matmul_left": ((m, k), lambda t: ad.matmul(t, Xr)),
        "matmul_right_batched": ((b, k, n), lambda t: ad.matmul(Wl, t)),
        "matmul_batched": ((b, m, k), lambda t: ad.matmul(t, Wr)),
        "concat_last": ((b, m, n), lambda t: ad.concat_last([T, t, T])),
        "mse": ((b, m, n), lambda t: ad.mse(t, same)),
    }


def _model_param_check(model: TransformerModel, x: np.ndarray, seed: int) -> float:
    """Finite-difference check against every tensor of ``model`` plus the input."""
    worst = grad_check(lambda t: model_forward(model, t), x, seed=seed)
    for name, tensor in model.named_tensors().items():
        owner, attr = _locate(model, name)
        original = getattr(owner, attr)

        def f(t, owner=owner, attr=attr):
            setattr(owner, attr, t)
            return model_forward(model, x)

        try:
            worst = max(worst, grad_check(f, tensor.data, seed=seed))
        finally:
            setattr(owner, attr, original)
    return worst


def _locate(model: TransformerModel, name: str):
    parts = name.split(".")
    if parts[0] == "embed":
        return model.embed, parts[1]
    if parts[0] == "readout":
        return model, "readout"
    blk = model.blocks[int(parts[1])]
    if parts[2] == "heads":
        return blk.heads[int(parts[3])], parts[4]
    return blk.ff, parts[3]


def gradient_suite(instances: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for i in range(instances):
        for name, (shape, fn) in {**_unary_cases(rng), **_binary_cases(rng)}.items():
            x = rng.normal(size=shape)
            if name == "activation_relu":
                x = np.where(np.abs(x) < 0.1, 0.5, x)
            worst = max(worst, grad_check(fn, x, seed=i))
            cases += 1
        b = ModelBudget(n=6, h=2, m_h=3, m_v=3, m_ff=5, l=2, tau=4, d=2, d_out=2)
        model = init_transformer(b, seed=1000 + i, ff_residual=bool(i % 2), scaled_scores=bool(i % 3 == 0))
        worst = max(worst, _model_param_check(model, rng.uniform(size=(2, 2, 4)), seed=i))
        cases += 1
    return SuiteResult("gradients", worst < GRAD_TOL, worst, GRAD_TOL, cases)


# ---------------------------------------------------------------------------
# structural identities


def _random_budget(rng, l: int = 2) -> ModelBudget:
    n = int(rng.integers(2, 9))
    return ModelBudget(
        n=n,
        h=int(rng.integers(1, 4)),
        m_h=int(rng.integers(1, 6)),
        m_v=int(rng.integers(1, 6)),
        m_ff=int(rng.integers(1, 9)),
        l=l,
        tau=int(rng.integers(2, 8)),
        d=int(rng.integers(1, 4)),
        d_out=int(rng.integers(1, 3)),
    )


def equivariance_suite(pairs: int = 50, seed: int = 1) -> SuiteResult:
    """Without positional encoding, permuting time permutes the output."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(pairs):
        b = _random_budget(rng, l=int(rng.integers(1, 4)))
        model = init_transformer(b, seed=i, positional="none", ff_residual=bool(rng.integers(2)))
        x = rng.uniform(size=(3, b.d, b.tau))
        p = rng.permutation(b.tau)
        lhs = model_forward(model, x[:, :, p]).data
        rhs = model_forward(model, x).data[:, :, p]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return SuiteResult("equivariance", worst < EQUIV_TOL, worst, EQUIV_TOL, pairs)


def skeleton_suite(instances: int = 20, seed: int = 2) -> SuiteResult:
    """W_o = 0 makes attention the identity; W_Q = 0 makes it uniform 1/tau.

    Both are checked on random heads, and on the two blocks of the
    density-construction skeleton, where the second block must also add
    the sum over time of its value rows onto the shifted coordinates.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for i in range(instances):
        b = _random_budget(rng)
        m = init_transformer(b, seed=i)
        h = Tensor(rng.normal(size=(2, b.n, b.tau)) * 3)
        heads = m.blocks[0].heads
        for hd in heads:
            hd.W_o.assign_(np.zeros(hd.W_o.shape))
        out = attention_forward(heads, h).data
        worst = max(worst, float(np.max(np.abs(out - h.data))))
        heads = m.blocks[1].heads
        for hd in heads:
            hd.W_Q.assign_(np.zeros(hd.W_Q.shape))
        weights: list = []
        attention_forward(heads, h, weights_out=weights)
        for a in weights:
            worst = max(worst, float(np.max(np.abs(a - 1.0 / b.tau))))
        cases += 2

        tau, d = int(rng.integers(2, 4)), 1
        q, mm, n = kolmogorov_dims(tau, d)
        sk = build_kolmogorov_skeleton(ModelBudget(n=n, h=1, m_h=2, m_v=mm, m_ff=4, l=2, tau=tau, d=d), seed=i)
        hs = Tensor(rng.normal(size=(2, n, tau)))
        worst = max(worst, float(np.max(np.abs(attention_forward(sk.blocks[0].heads, hs).data - hs.data))))
        out2 = attention_forward(sk.blocks[1].heads, hs).data
        expect = hs.data.copy()
        expect[:, mm:, :] += hs.data[:, :mm, :].sum(axis=2, keepdims=True)
        worst = max(worst, float(np.max(np.abs(out2 - expect))))
        cases += 2
    return SuiteResult("kolmogorov-skeleton", worst < EQUIV_TOL, worst, EQUIV_TOL, cases)


# ---------------------------------------------------------------------------
# POD


def eckart_young_suite(instances: int = 20, seed: int = 3, grid_size: int = 256) -> SuiteResult:
    """Rank-r truncation error equals the singular-value tail, and spectra round-trip."""
    rng = np.random.default_rng(seed)
    grid = QuadratureGrid.midpoint(grid_size)
    worst = 0.0
    for _ in range(instances):
        rank = int(rng.integers(1, 9))
        A = rng.normal(size=(grid_size, rank + 4)) @ np.diag(np.exp(-rng.uniform(0, 3, size=rank + 4)))
        K = A @ rng.normal(size=(rank + 4, grid_size))
        fact = pod(K, grid)
        r = int(rng.integers(0, rank + 1))
        direct = weighted_l2(grid, K - fact.matrix(r))
        worst = max(worst, abs(direct - truncation_error(fact, r)))
    rt = 0.0
    for alpha, r in ((1.0, 6), (0.55, 2), (1.0, None), (0.55, None)):
        for basis in ("cosine", "cosine-sine"):
            G = make_spectral_G(alpha, r, basis=basis, grid=grid, K=min(64, grid_size // 2))
            back = pod(G.matrix(), grid)
            rt = max(rt, float(np.max(np.abs(back.sigma[: len(G.sigma)] - G.sigma))))
    passed = worst < EY_TOL and rt < ROUNDTRIP_TOL
    return SuiteResult("eckart-young", passed, max(worst, rt), EY_TOL, instances + 8)


SUITES = {
    "equivariance": equivariance_suite,
    "eckart-young": eckart_young_suite,
    "gradients": gradient_suite,
    "kolmogorov-skeleton": skeleton_suite,
}


def run_all() -> list[SuiteResult]:
    return [fn() for fn in SUITES.values()]
