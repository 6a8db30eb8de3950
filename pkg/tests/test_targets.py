import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atrl.expr import Expr, ExpressionError
from atrl.pod import QuadratureGrid, basis_functions
from atrl.targets import (
    DomainError,
    LipschitzError,
    TargetSpec,
    complexity_measures,
    eval_target,
    ground_truth_graph,
    kernel_function,
    load_spec,
    make_spectral_G,
    measured_decay,
    save_spec,
    sigmoid_sum_F,
    smooth_rho,
    spec_from_dict,
    spec_to_dict,
    sweep_target,
)


def brute_force_target(spec, x):
    """Per-(t, s) loop straight from the defining sum; independent of the vectorised path."""
    tau = x.shape[-1]
    out = np.empty(tau)
    G = kernel_function(spec) if spec.d == 1 else None
    for t in range(tau):
        w = np.array([float(G(x[0, t], x[0, s])) for s in range(tau)])
        w = np.exp(w - w.max())
        w /= w.sum()
        z = sum(w[s] * np.array([float(c(u=x[0, s], u0=x[0, s])) for c in spec.rho]) for s in range(tau))
        out[t] = float(spec.F(**{f"z{i}": z[i] for i in range(len(z))}))
    return out


@given(st.integers(0, 1000))
def test_eval_target_matches_brute_force(seed):
    spec = sweep_target(1.0, 6, tau=5, basis="cosine-sine", K=8)
    x = np.random.default_rng(seed).random((1, 5))
    np.testing.assert_allclose(eval_target(spec, x), brute_force_target(spec, x), rtol=1e-12)


def test_eval_target_expression_kernel():
    spec = TargetSpec(Expr("z0"), [Expr("u")], Expr("u*v"), tau=3)
    x = np.array([[0.2, 0.5, 0.9]])
    np.testing.assert_allclose(eval_target(spec, x), brute_force_target(spec, x), rtol=1e-13)


def test_uv_kernel_graph_values():
    # softmax over s of u_t v_s with u_t = 1: weights e^{v_s} / sum_s e^{v_s}
    spec = TargetSpec(Expr("z0"), [Expr("u")], Expr("u*v"), tau=2)
    a = ground_truth_graph(spec, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(a[0], [np.e / (np.e + 1), 1 / (np.e + 1)], rtol=1e-14)


@given(st.integers(0, 1000), st.integers(1, 8))
def test_ground_truth_row_stochastic(seed, tau):
    spec = sweep_target(0.55, None, tau=tau, K=16)
    a = ground_truth_graph(spec, np.random.default_rng(seed).random((4, 1, tau)))
    assert a.shape == (4, tau, tau) and np.all(a >= 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-14)


def test_constant_kernel_averages():
    # G constant -> uniform weights, so H_t = F(mean_s rho(x_s)) for every t
    spec = TargetSpec(Expr("2*z0"), [Expr("u*u")], Expr("0*u + 0*v + 3"), tau=4)
    x = np.array([[0.1, 0.4, 0.6, 1.0]])
    np.testing.assert_allclose(eval_target(spec, x), np.full(4, 2 * np.mean(x**2)), rtol=1e-14)


def test_domain_errors():
    spec = sweep_target(1.0, 2, K=8)
    with pytest.raises(DomainError):
        eval_target(spec, np.array([[0.1, 0.2, 1.5, 0.3]]))
    with pytest.raises(DomainError):
        TargetSpec(Expr("z0"), [Expr("2*u")], Expr("u*v"), tau=2)


def test_spectral_G_validation():
    with pytest.raises(ValueError):
        make_spectral_G(0.5, 2)
    with pytest.warns(UserWarning):
        make_spectral_G(0.4, 2, allow_outside_theory=True)
    with pytest.raises(ValueError):
        make_spectral_G(1.0, 0)
    with pytest.raises(ValueError):
        make_spectral_G(1.0, 2, basis="legendre")


@pytest.mark.parametrize("r", [2, 6, None])
def test_spectral_G_sigma_and_decay(r):
    G = make_spectral_G(1.0, r)
    k = np.arange(1, 65)
    expect = np.where(k <= (r or 64), 1.0 / k, 0.0)
    np.testing.assert_allclose(G.sigma, expect, rtol=1e-15)
    if r != 2:
        spec = TargetSpec(Expr("z0"), [Expr("u")], G, tau=2)
        assert measured_decay(spec)[1] == pytest.approx(1.0, abs=1e-12)


def test_complexity_rank_one_ones():
    # F(z) = z, rho = u, G = sigma_1 phi_1 psi_1 with sigma_1 = 1: K_F = 1, sup rho = 1, C1 = 1
    spec = TargetSpec(Expr("z0"), [Expr("u")], make_spectral_G(1.0, 1, K=4), tau=2)
    rep = complexity_measures(spec, 1.0, per_dim=2000)
    assert rep.K_F == pytest.approx(1.0, abs=1e-6)
    assert rep.sup_rho == 1.0
    assert rep.C1 == 1.0
    # sup |sqrt2 cos(pi u)| + sup |sqrt2 cos(pi u)| = 2 sqrt 2
    assert rep.sup_phi_psi == pytest.approx(2 * np.sqrt(2), rel=1e-12)
    assert rep.C0 == pytest.approx(2 * np.sqrt(2), rel=1e-6)
    assert rep.truncated_index_range is False


def test_complexity_C1_power_law():
    spec = sweep_target(0.55, None, K=32)
    rep = complexity_measures(spec, 0.55, per_dim=500)
    assert rep.C1 == pytest.approx(1.0, rel=1e-12)  # sigma_k k^alpha = 1 for every k
    assert rep.truncated_index_range is True
    # the same spectrum measured against a faster rate grows like k^(1 - 0.55)
    assert complexity_measures(spec, 1.0, per_dim=500).C1 == pytest.approx(32**0.45, rel=1e-12)


def test_complexity_expression_kernel_ignores_roundoff():
    spec = TargetSpec(Expr("z0"), [Expr("u")], Expr("u*v"), tau=2)
    rep = complexity_measures(spec, 1.0, per_dim=500)
    assert rep.C1 == pytest.approx(1 / 3, rel=1e-4)
    assert rep.sup_phi_psi == pytest.approx(2 * np.sqrt(3), rel=1e-2)  # |u| / ||u|| peaks at sqrt 3


def test_lipschitz_blowup():
    spec = TargetSpec(Expr("sqrt(z0)"), [Expr("u")], Expr("u*v"), tau=2)
    with pytest.raises(LipschitzError):
        complexity_measures(spec, 1.0, per_dim=2000, blowup=100.0)


def test_spec_json_roundtrip(tmp_path):
    for spec in (
        sweep_target(0.55, 6, K=16),
        TargetSpec(Expr("z0 + z1"), [Expr("u0"), Expr("u1")], Expr("u0*v1"), tau=3, d=2),
    ):
        save_spec(spec, tmp_path / "s.json")
        back = load_spec(tmp_path / "s.json")
        assert spec_to_dict(back) == spec_to_dict(spec)
        x = np.random.default_rng(0).random((2, spec.d, spec.tau))
        assert np.array_equal(eval_target(back, x), eval_target(spec, x))


def test_spec_strict_keys():
    doc = spec_to_dict(sweep_target(1.0, 2, K=8))
    with pytest.raises(ValueError):
        spec_from_dict({**doc, "extra": 1})
    with pytest.raises(ValueError):
        spec_from_dict({**doc, "version": 2})
    with pytest.raises(ValueError):
        spec_from_dict({**doc, "G": {**doc["G"], "kind": "other"}})


def test_spec_file_rejects_code():
    doc = spec_to_dict(sweep_target(1.0, 2, K=8))
    doc["F"] = "__import__('os').system('true')"
    with pytest.raises(ExpressionError):
        spec_from_dict(json.loads(json.dumps(doc)))


def test_sigmoid_sum_deterministic_and_bounded():
    assert sigmoid_sum_F(4, seed=3).text == sigmoid_sum_F(4, seed=3).text
    assert sigmoid_sum_F(4, seed=3).text != sigmoid_sum_F(4, seed=4).text
    z = np.random.default_rng(0).random((4, 100))
    v = sigmoid_sum_F(4)(**{f"z{i}": z[i] for i in range(4)})
    assert np.all(v > 0) and np.all(v < 3 * 1.5)


def test_smooth_rho_in_unit_interval():
    u = np.linspace(0, 1, 1001)
    for c in smooth_rho(6):
        v = c(u=u, u0=u)
        assert v.min() >= 0 and v.max() <= 1


def test_cosine_sine_kernel_has_no_diagonal_peak():
    g = QuadratureGrid.midpoint(256)
    sym = make_spectral_G(1.0, None, basis="cosine")
    mixed = make_spectral_G(1.0, None, basis="cosine-sine")
    assert np.mean(np.diag(sym.matrix())) > 5 * np.mean(np.abs(np.diag(mixed.matrix())))
    np.testing.assert_allclose(mixed.right, basis_functions("sine", 64, g.points))
