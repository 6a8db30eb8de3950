import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atrl.autodiff import Tensor, grad_check
from atrl.datasets import Dataset, gen_linear_functional
from atrl.training import (
    Adam,
    DivergenceError,
    ExperimentRecord,
    ResultStore,
    RNNModel,
    TrainConfig,
    config_hash,
    evaluate_mse,
    init_rnn,
    restore,
    rnn_forward,
    run_jobs,
    snapshot,
    thread_count,
    train,
    trainable,
)
from atrl.transformer import ModelBudget, init_transformer


def numpy_rnn(m: RNNModel, x):
    B, d, tau = x.shape
    h = np.zeros((B, m.hidden))
    out = []
    for t in range(tau):
        h = x[:, :, t] @ m.W_in.data.T + h @ m.W_rec.data.T + m.b.data
        if m.activation == "tanh":
            h = np.tanh(h)
        out.append(h @ m.W_out.data.T + m.b_out.data)
    return np.stack(out, axis=-1)


@pytest.mark.parametrize("act", ["identity", "tanh"])
def test_rnn_forward_matches_loop(act):
    m = init_rnn(2, 3, hidden=5, seed=1, activation=act)
    x = np.random.default_rng(0).normal(size=(4, 2, 6))
    np.testing.assert_allclose(rnn_forward(m, x).data, numpy_rnn(m, x), rtol=1e-13, atol=1e-14)
    assert rnn_forward(m, x[0]).shape == (3, 6)


def test_rnn_is_causal():
    m = init_rnn(1, 1, hidden=4, seed=2)
    x = np.random.default_rng(1).normal(size=(1, 1, 8))
    x2 = x.copy()
    x2[..., 5:] += 1.0
    np.testing.assert_array_equal(rnn_forward(m, x).data[..., :5], rnn_forward(m, x2).data[..., :5])


def test_rnn_gradients():
    m = init_rnn(1, 1, hidden=3, seed=0, activation="tanh")
    x = np.random.default_rng(0).normal(size=(2, 1, 4))
    assert grad_check(lambda t: rnn_forward(m, t), x) < 1e-7
    W = m.W_rec

    def f(t):
        m.W_rec = t
        return rnn_forward(m, x)

    try:
        assert grad_check(f, W.data) < 1e-7
    finally:
        m.W_rec = W


def test_rnn_init_range_and_shapes():
    m = init_rnn(1, 1, hidden=128, seed=0)
    assert all(np.abs(t.data).max() <= 1 / np.sqrt(128) for t in m.parameters())
    with pytest.raises(ValueError):
        RNNModel(Tensor(np.ones((3, 1))), Tensor(np.ones((2, 2))), Tensor(np.ones(3)), Tensor(np.ones((1, 3))), Tensor(np.ones(1)))


def reference_adam(grads, x0, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0.copy(), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8), st.floats(1e-4, 1e-1))
def test_adam_matches_reference(gs, lr):
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], lr=lr)
    for g in gs:
        p.grad = np.array([g])
        opt.step()
    np.testing.assert_allclose(p.data, reference_adam([np.array([g]) for g in gs], np.array([0.5]), lr), rtol=1e-12, atol=1e-15)


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([1e-3, -50.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, 1.01], rtol=1e-4)


def linear_regression_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 3))
    return Dataset(x, 2.0 * x - 0.5)


def test_train_decreases_loss_and_is_deterministic():
    ds = linear_regression_data()
    cfg = TrainConfig(lr=1e-2, epochs=15, batch_size=32, seed=3)
    results = []
    for _ in range(2):
        m = init_rnn(1, 1, hidden=4, seed=0)
        results.append(train(m, ds, ds, cfg))
    a, b = results
    assert a.history == b.history
    assert a.best_train < 0.2 * a.history[0][1]
    assert a.history[0][0] == 0 and a.epochs_run == 15
    assert a.final_test == a.history[-1][2]


def test_best_params_reproduce_best_train():
    ds = linear_regression_data()
    m = init_rnn(1, 1, hidden=4, seed=0)
    res = train(m, ds, None, TrainConfig(lr=5e-2, epochs=10, batch_size=16))
    restore(m, res.best_params)
    assert evaluate_mse(m, ds) == res.best_train
    assert np.isnan(res.final_test)


def test_cosine_with_unit_floor_equals_constant():
    ds = linear_regression_data(64)
    runs = []
    for sched in ("constant", "cosine"):
        m = init_rnn(1, 1, hidden=3, seed=0)
        hist = train(m, ds, None, TrainConfig(lr=1e-2, epochs=3, schedule=sched, lr_floor=1.0)).history
        runs.append([(e, tr) for e, tr, _ in hist])
    assert runs[0] == runs[1]


def test_plateau_stop():
    ds = linear_regression_data(32)
    m = init_rnn(1, 1, hidden=3, seed=0)
    res = train(m, ds, None, TrainConfig(lr=0.0, epochs=50, plateau_tol=1e-6, plateau_window=5))
    assert res.epochs_run == 5


def test_divergence_carries_checkpoint():
    ds = linear_regression_data(64)
    m = init_rnn(1, 1, hidden=8, seed=0)
    start = snapshot(m)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(m, ds, None, TrainConfig(lr=1e150, epochs=20, batch_size=8))
    assert info.value.epoch >= 1
    assert set(info.value.checkpoint) == set(start)
    for v in info.value.checkpoint.values():
        assert np.isfinite(v).all()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        train(init_rnn(1, 1, 2), Dataset(np.zeros((0, 1, 2)), np.zeros((0, 1, 2))), None, TrainConfig())


def test_frozen_parameters_untouched():
    b = ModelBudget(n=4, h=1, m_h=2, m_v=2, m_ff=3, l=1, tau=3, d=1)
    m = init_transformer(b, seed=0, positional="sinusoidal")
    e0 = m.embed.e.data.copy()
    assert all(t is not m.embed.e for t in trainable(m))
    x = np.random.default_rng(0).random((20, 1, 3))
    train(m, Dataset(x, x), None, TrainConfig(lr=1e-2, epochs=2))
    assert np.array_equal(m.embed.e.data, e0)


def test_evaluate_mse_batches_agree():
    ds = gen_linear_functional("exponential", 8, 50, 0)
    m = init_rnn(1, 1, 4, 0)
    assert evaluate_mse(m, ds, batch=7) == pytest.approx(evaluate_mse(m, ds, batch=1000), rel=1e-14)


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


def test_result_store_roundtrip(tmp_path):
    store = ResultStore(tmp_path / "r.jsonl")
    assert store.read() == []
    recs = [
        ExperimentRecord("x", "h", 0, "train_mse", 0.5, {"m_h": 2}, wall_time=1.25),
        ExperimentRecord("x", "h", 0, "graph", [[0.5, 0.5]], {"sample": 0}),
    ]
    store.append(recs)
    store.append(recs[:1])
    back = store.read()
    assert len(back) == 3 and back[0].params == {"m_h": 2} and back[1].value == [[0.5, 0.5]]
    assert back[0].wall_time is None  # timing lives in the sidecar
    assert "wall_time" not in json.loads(store.path.read_text().splitlines()[0])
    assert json.loads(store.timing_path.read_text().splitlines()[0])["wall_time"] == 1.25


def test_run_jobs_keeps_order():
    jobs = [(lambda i=i: [ExperimentRecord("j", str(i), i, "m", float(i))]) for i in range(12)]
    seq = run_jobs(jobs, threads=1)
    par = run_jobs(jobs, threads=4)
    assert [r.seed for r in par] == list(range(12))
    assert [r.to_json() for r in seq] == [r.to_json() for r in par]


def test_parallel_training_matches_sequential():
    ds = linear_regression_data(64)

    def job(seed):
        m = init_rnn(1, 1, hidden=3, seed=seed)
        r = train(m, ds, None, TrainConfig(lr=1e-2, epochs=3, seed=seed))
        return [ExperimentRecord("t", "h", seed, "train_mse", r.best_train)]

    jobs = [(lambda s=s: job(s)) for s in range(4)]
    assert [r.value for r in run_jobs(jobs, 1)] == [r.value for r in run_jobs(jobs, 4)]


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("ATRL_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("ATRL_THREADS", "0")
    with pytest.raises(ValueError):
        thread_count()
