"""Training loop, Adam, the linear RNN baseline and the results store."""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datasets import Dataset


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; ``checkpoint`` holds the last good parameters."""

    def __init__(self, message: str, epoch: int, checkpoint: dict[str, np.ndarray]):
        super().__init__(message)
        self.epoch = epoch
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# RNN baseline


@dataclass
class RNNModel:
    W_in: Tensor  # (H, d)
    W_rec: Tensor  # (H, H)
    b: Tensor  # (H,)
    W_out: Tensor  # (d_out, H)
    b_out: Tensor  # (d_out,)
    activation: str = "identity"

    def __post_init__(self):
        H = self.W_rec.shape[0]
        if self.W_rec.shape != (H, H) or self.W_in.shape[0] != H or self.W_out.shape[1] != H:
            raise ad.ShapeError(
                f"RNN shapes disagree: W_in {self.W_in.shape}, W_rec {self.W_rec.shape}, W_out {self.W_out.shape}"
            )
        if self.b.shape != (H,) or self.b_out.shape != (self.W_out.shape[0],):
            raise ad.ShapeError(f"RNN bias shapes {self.b.shape}, {self.b_out.shape}")
        for t in self.named_tensors().values():
            t.requires_grad = True

    @property
    def hidden(self) -> int:
        return self.W_rec.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        return {"W_in": self.W_in, "W_rec": self.W_rec, "b": self.b, "W_out": self.W_out, "b_out": self.b_out}

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def __call__(self, x) -> Tensor:
        return rnn_forward(self, x)


def init_rnn(d: int, d_out: int, hidden: int = 128, seed: int = 0, activation: str = "identity") -> RNNModel:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init for every weight and bias."""
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)

    def u(*shape):
        return Tensor(rng.uniform(-k, k, size=shape))

    return RNNModel(u(hidden, d), u(hidden, hidden), u(hidden), u(d_out, hidden), u(d_out), activation)


def rnn_forward(model: RNNModel, x) -> Tensor:
    """h(t) = act(W_in x(t) + W_rec h(t-1) + b), h(-1) = 0; y(t) = W_out h(t) + b_out."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    single = xt.ndim == 2
    if single:
        xt = ad.reshape(xt, (1,) + xt.shape)
    if xt.ndim != 3 or xt.shape[1] != model.W_in.shape[1]:
        raise ad.ShapeError(f"rnn_forward: input {xt.shape} vs W_in {model.W_in.shape}")
    B, d, tau = xt.shape
    W_in_T = ad.transpose(model.W_in)
    W_rec_T = ad.transpose(model.W_rec)
    W_out_T = ad.transpose(model.W_out)
    h = None
    outs = []
    for t in range(tau):
        pre = ad.add(ad.matmul(ad.reshape(ad.take_last(xt, t), (B, d)), W_in_T), model.b)
        if h is not None:
            pre = ad.add(pre, ad.matmul(h, W_rec_T))
        h = ad.activation(pre, model.activation)
        y = ad.add(ad.matmul(h, W_out_T), model.b_out)
        outs.append(ad.reshape(y, (B, y.shape[1], 1)))
    out = ad.concat_last(outs)
    return ad.reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    batch_size: int = 64
    seed: int = 0
    # cosine decay of the learning rate to lr * lr_floor over the run
    schedule: str = "constant"
    lr_floor: float = 0.0
    # stop once the best train MSE improved by less than this relative amount
    # over the last plateau_window epochs; None trains for the full budget
    plateau_tol: float | None = None
    plateau_window: int = 100
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError("learning rate must be finite and non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr:
                p.assign_(p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def trainable(model) -> list[Tensor]:
    return [p for p in model.parameters() if p.requires_grad]


def snapshot(model) -> dict[str, np.ndarray]:
    return {k: v.numpy().copy() for k, v in model.named_tensors().items()}


def restore(model, arrays: dict[str, np.ndarray]) -> None:
    for k, t in model.named_tensors().items():
        t.assign_(arrays[k])


def evaluate_mse(model, ds: Dataset, batch: int = 128) -> float:
    if len(ds) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(ds), batch):
        pred = model(ds.x[i : i + batch]).data
        total += float(np.sum((pred - ds.y[i : i + batch]) ** 2))
    return total / ds.y.size


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    best_train: float
    final_train: float
    final_test: float
    epochs_run: int
    best_params: dict[str, np.ndarray] = field(repr=False)


def train(model, train_set: Dataset, test_set: Dataset | None, cfg: TrainConfig, log: Callable | None = None) -> TrainResult:
    """Mini-batch Adam on the mean squared error.

    The history holds (epoch, train MSE, test MSE) measured on the full sets
    after each evaluated epoch, with epoch 0 before any update. On a
    non-finite loss a DivergenceError carries the last good parameters.
    """
    params = trainable(model)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")

    def measure(epoch):
        tr = evaluate_mse(model, train_set)
        te = evaluate_mse(model, test_set) if test_set is not None and len(test_set) else float("nan")
        if not math.isfinite(tr):
            raise DivergenceError(f"train MSE is {tr} at epoch {epoch}", epoch, last_good)
        return tr, te

    last_good = snapshot(model)
    tr, te = measure(0)
    history = [(0, tr, te)]
    best, best_params = tr, last_good
    best_at = [(0, tr)]
    total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    step = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            try:
                with Tape():
                    loss = ad.mse(model(train_set.x[idx]), Tensor(train_set.y[idx]))
                ad.backward(loss)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}: {exc}", epoch, last_good) from exc
            lr = cfg.lr
            if cfg.schedule == "cosine" and total_steps:
                frac = step / total_steps
                lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
            try:
                opt.step(lr)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"non-finite update at epoch {epoch}", epoch, last_good) from exc
            step += 1
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        tr, te = measure(epoch)
        last_good = snapshot(model)
        history.append((epoch, tr, te))
        if log is not None:
            log(epoch, tr, te)
        if tr < best:
            best, best_params = tr, last_good
        best_at.append((epoch, best))
        if cfg.plateau_tol is not None and _plateaued(best_at, cfg.plateau_window, cfg.plateau_tol):
            break
    return TrainResult(history, best, history[-1][1], history[-1][2], epoch, best_params)


def _plateaued(best_at: list[tuple[int, float]], window: int, tol: float) -> bool:
    now_epoch, now = best_at[-1]
    if now_epoch < window:
        return False
    before = next(b for e, b in reversed(best_at) if e <= now_epoch - window)
    return (before - now) <= tol * before


# ---------------------------------------------------------------------------
# records


def config_hash(config: dict) -> str:
    doc = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    experiment: str
    config_hash: str
    seed: int
    metric: str
    value: float | list
    params: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_json(self) -> str:
        doc = asdict(self)
        doc.pop("wall_time")
        return json.dumps(doc, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "ExperimentRecord":
        return cls(**json.loads(line))


class ResultStore:
    """Append-only JSON-lines file of records.

    Wall times go to a ``.timing`` sidecar so the store itself is a pure
    function of configs and seeds.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.timing_path = self.path.with_name(self.path.name + ".timing")

    def append(self, records: Sequence[ExperimentRecord]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh, open(self.timing_path, "a") as th:
            for r in records:
                fh.write(r.to_json() + "\n")
                th.write(json.dumps({"config_hash": r.config_hash, "seed": r.seed, "metric": r.metric, "wall_time": r.wall_time}) + "\n")

    def read(self) -> list[ExperimentRecord]:
        if not self.path.exists():
            return []
        return [ExperimentRecord.from_json(line) for line in self.path.read_text().splitlines() if line.strip()]


def thread_count() -> int:
    raw = os.environ.get("ATRL_THREADS")
    if raw is None:
        return max(1, os.cpu_count() or 1)
    n = int(raw)
    if n < 1:
        raise ValueError("ATRL_THREADS must be a positive integer")
    return n


def run_jobs(jobs: Sequence[Callable[[], list[ExperimentRecord]]], threads: int | None = None) -> list[ExperimentRecord]:
    """Run independent jobs, returning their records in job order."""
    threads = threads or thread_count()
    if threads == 1 or len(jobs) <= 1:
        results = [job() for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda j: j(), jobs))
    return [r for rs in results for r in rs]


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
