import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atrl import binfmt
from atrl.autodiff import ShapeError, Tensor
from atrl.transformer import (
    BudgetError,
    ModelBudget,
    attention_forward,
    build_kolmogorov_skeleton,
    extract_attention_graph,
    init_transformer,
    kolmogorov_dims,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from atrl.verify import equivariance_suite, skeleton_suite

budgets = st.builds(
    ModelBudget,
    n=st.integers(1, 6),
    h=st.integers(1, 3),
    m_h=st.integers(1, 4),
    m_v=st.integers(1, 4),
    m_ff=st.integers(1, 6),
    l=st.integers(1, 3),
    tau=st.integers(1, 6),
    d=st.integers(1, 3),
    d_out=st.integers(1, 2),
)


def small(**kw):
    base = dict(n=5, h=2, m_h=3, m_v=2, m_ff=4, l=2, tau=4, d=2, d_out=1)
    base.update(kw)
    return ModelBudget(**base)


def test_budget_rejects_non_positive():
    with pytest.raises(BudgetError):
        small(m_h=0)
    with pytest.raises(BudgetError):
        small(tau=-1)


@given(budgets, st.integers(0, 1000))
def test_forward_shape(b, seed):
    m = init_transformer(b, seed=seed)
    x = np.random.default_rng(seed).uniform(size=(3, b.d, b.tau))
    assert model_forward(m, x).shape == (3, b.d_out, b.tau)
    assert model_forward(m, x[0]).shape == (b.d_out, b.tau)


@given(budgets, st.integers(0, 1000), st.randoms(use_true_random=False))
def test_equivariance_without_positional_encoding(b, seed, rnd):
    m = init_transformer(b, seed=seed, positional="none", ff_residual=bool(seed % 2))
    x = np.random.default_rng(seed).uniform(size=(2, b.d, b.tau))
    p = list(range(b.tau))
    rnd.shuffle(p)
    np.testing.assert_allclose(model_forward(m, x[:, :, p]).data, model_forward(m, x).data[:, :, p], atol=1e-10, rtol=0)


def test_positional_encoding_breaks_equivariance():
    m = init_transformer(small(), seed=3, positional="trainable")
    x = np.random.default_rng(0).uniform(size=(1, 2, 4))
    p = [1, 0, 3, 2]
    assert np.max(np.abs(model_forward(m, x[:, :, p]).data - model_forward(m, x).data[:, :, p])) > 1e-3


def test_wrong_input_shape():
    m = init_transformer(small(), seed=0)
    with pytest.raises(ShapeError):
        model_forward(m, np.zeros((1, 3, 4)))
    with pytest.raises(ShapeError):
        model_forward(m, np.zeros(4))


@given(budgets, st.integers(0, 1000))
def test_zero_output_projection_is_identity(b, seed):
    m = init_transformer(b, seed=seed)
    for hd in m.blocks[0].heads:
        hd.W_o.assign_(np.zeros(hd.W_o.shape))
    h = Tensor(np.random.default_rng(seed).normal(size=(2, b.n, b.tau)) * 10)
    assert np.array_equal(attention_forward(m.blocks[0].heads, h).data, h.data)


@given(budgets, st.integers(0, 1000))
def test_zero_query_is_uniform(b, seed):
    m = init_transformer(b, seed=seed)
    for hd in m.blocks[0].heads:
        hd.W_Q.assign_(np.zeros(hd.W_Q.shape))
    x = np.random.default_rng(seed).uniform(size=(2, b.d, b.tau))
    a = extract_attention_graph(m, x, 0, b.h - 1)
    assert np.max(np.abs(a - 1.0 / b.tau)) == 0.0


@given(budgets, st.integers(0, 100))
def test_attention_graph_row_stochastic(b, seed):
    m = init_transformer(b, seed=seed)
    x = np.random.default_rng(seed).uniform(size=(3, b.d, b.tau))
    a = extract_attention_graph(m, x, b.l - 1, 0)
    assert a.shape == (3, b.tau, b.tau)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_attention_graph_index_errors():
    m = init_transformer(small(), seed=0)
    with pytest.raises(IndexError):
        extract_attention_graph(m, np.zeros((2, 4)), 2, 0)
    with pytest.raises(IndexError):
        extract_attention_graph(m, np.zeros((2, 4)), 0, 2)


def test_attention_single_head_by_hand():
    # one head, n = 1: scores[t, s] = (q x_t)(k x_s), output adds w_o * sum_s a[t, s] v x_s
    m = init_transformer(ModelBudget(1, 1, 1, 1, 1, 1, 3, 1), seed=0, positional="none")
    hd = m.blocks[0].heads[0]
    for name, v in (("W_Q", 0.5), ("W_K", 2.0), ("W_V", 3.0), ("W_o", -1.0)):
        getattr(hd, name).assign_(np.array([[v]]))
    h = np.array([[[0.1, -0.4, 0.9]]])
    s = np.outer(0.5 * h[0, 0], 2.0 * h[0, 0])
    a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    expect = h[0, 0] - a @ (3.0 * h[0, 0])
    got = attention_forward(m.blocks[0].heads, Tensor(h)).data[0, 0]
    np.testing.assert_allclose(got, expect, rtol=1e-14)


def test_scaled_scores_flag_divides_by_sqrt_mh():
    b = small(m_h=4)
    m1 = init_transformer(b, seed=2)
    m2 = init_transformer(b, seed=2, scaled_scores=True)
    for hd in m1.blocks[0].heads:
        hd.W_Q.assign_(hd.W_Q.data / 2.0)  # 1/sqrt(4)
    x = np.random.default_rng(1).uniform(size=(2, 2, 4))
    np.testing.assert_allclose(extract_attention_graph(m1, x, 0, 1), extract_attention_graph(m2, x, 0, 1), rtol=1e-13)


def test_unknown_positional():
    with pytest.raises(ValueError):
        init_transformer(small(), positional="rotary")


def test_sinusoidal_encoding_frozen():
    m = init_transformer(small(), positional="sinusoidal")
    assert "embed.e" in m.frozen
    assert all(t is not m.embed.e for t in m.parameters())


# -- density-construction skeleton ------------------------------------------


def test_kolmogorov_dims_values():
    # Q = 2 tau d + 1, M = Q tau, n = 2 M
    assert kolmogorov_dims(4, 1) == (9, 36, 72)
    assert kolmogorov_dims(2, 3) == (13, 26, 52)


def skeleton(tau=3, d=1, seed=0, **kw):
    q, m, n = kolmogorov_dims(tau, d)
    return build_kolmogorov_skeleton(ModelBudget(n=n, h=1, m_h=2, m_v=m, m_ff=6, l=2, tau=tau, d=d), seed=seed, **kw)


def test_skeleton_only_feed_forward_trainable():
    sk = skeleton()
    names = {k for k, t in sk.named_tensors().items() if t.requires_grad}
    assert names == {f"blocks.{i}.ff.{p}" for i in (0, 1) for p in ("W1", "b1", "W2", "b2")}


def test_skeleton_attention_structure():
    sk = skeleton(tau=3)
    assert not sk.blocks[0].heads[0].W_o.data.any()
    assert not sk.blocks[1].heads[0].W_Q.data.any()
    x = np.random.default_rng(0).uniform(size=(4, 1, 3))
    np.testing.assert_array_equal(extract_attention_graph(sk, x, 1, 0), np.full((4, 3, 3), 1 / 3))


def test_skeleton_carries_shifts_and_sum():
    # after block 2's attention the last M rows hold b_t + sum_s (block-1 output)(s)
    tau = 3
    q, m, n = kolmogorov_dims(tau, 1)
    shifts = np.array([0.5, 1.5, 2.5])
    sk = skeleton(tau=tau, shifts=shifts)
    x = np.random.default_rng(1).uniform(size=(2, 1, tau))
    from atrl.transformer import embed_forward, ff_forward

    h = embed_forward(sk.embed, Tensor(x))
    np.testing.assert_array_equal(h.data[:, m:, :], np.broadcast_to(shifts, (2, m, tau)))
    h = attention_forward(sk.blocks[0].heads, h)
    h1 = ff_forward(sk.blocks[0].ff, h, sk.blocks[0].activation, True)
    np.testing.assert_array_equal(h1.data[:, m:, :], h.data[:, m:, :])
    h2 = attention_forward(sk.blocks[1].heads, h1).data
    expect = h1.data[:, m:, :] + h1.data[:, :m, :].sum(-1, keepdims=True)
    np.testing.assert_allclose(h2[:, m:, :], expect, rtol=1e-13)


def test_skeleton_budget_mismatch():
    with pytest.raises(BudgetError):
        build_kolmogorov_skeleton(ModelBudget(n=10, h=1, m_h=2, m_v=5, m_ff=3, l=2, tau=3, d=1))


def test_suites_small():
    assert equivariance_suite(pairs=10).passed
    assert skeleton_suite(instances=5).passed


# -- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("positional", ["trainable", "none", "sinusoidal"])
def test_checkpoint_roundtrip(tmp_path, positional):
    m = init_transformer(small(), seed=4, positional=positional, ff_residual=True, scaled_scores=True)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.budget == m.budget and back.frozen == m.frozen
    for k, t in m.named_tensors().items():
        assert np.array_equal(back.named_tensors()[k].data, t.data)
    x = np.random.default_rng(0).uniform(size=(2, 2, 4))
    assert np.array_equal(model_forward(back, x).data, model_forward(m, x).data)


def test_skeleton_checkpoint_keeps_frozen(tmp_path):
    sk = skeleton()
    save_checkpoint(sk, tmp_path / "s.ckpt")
    assert load_checkpoint(tmp_path / "s.ckpt").frozen == sk.frozen


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(init_transformer(small(), seed=0), p)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(binfmt.BadMagicError):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "version").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(binfmt.VersionError):
        load_checkpoint(tmp_path / "version")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(binfmt.TruncatedError):
        load_checkpoint(tmp_path / "short")
