"""Simplified transformer: residual multi-head attention and pointwise FF.

Hidden sequences are stored column-wise, ``(batch, n, tau)``; column ``t`` is
the hidden state h(t). One block computes

    Atten(h)(t) = h(t) + sum_i W_o^i sum_s softmax_s[(W_Q^i h(t))^T W_K^i h(s)] W_V^i h(s)
    FF(h)(t)    = f(h(t))            (optionally h(t) + f(h(t)))

and a model is ``readout o block_l o ... o block_1 o embed`` where the embed
is ``x(t) -> A x(t) + e(t)``. Scores are not scaled by 1/sqrt(m_h) unless
``scaled_scores`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelBudget:
    n: int
    h: int
    m_h: int
    m_v: int
    m_ff: int
    l: int
    tau: int
    d: int
    d_out: int = 1

    def __post_init__(self):
        for name in ("n", "h", "m_h", "m_v", "m_ff", "l", "tau", "d", "d_out"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise BudgetError(f"budget field {name} must be a positive integer, got {v!r}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n, self.h, self.m_h, self.m_v, self.m_ff, self.l, self.tau, self.d, self.d_out)


@dataclass
class AttentionHeadParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_o: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_o": self.W_o}


@dataclass
class FeedForwardParams:
    W1: Tensor  # (m_ff, n)
    b1: Tensor  # (m_ff, 1)
    W2: Tensor  # (n, m_ff)
    b2: Tensor  # (n, 1)

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class PositionalEncoding:
    """Lift ``x(t) -> A x(t) + e(t)``; ``e`` is None when encoding is off."""

    A: Tensor  # (n, d)
    e: Tensor | None = None  # (n, tau)
    kind: str = "trainable"  # trainable | sinusoidal | none

    def tensors(self) -> dict[str, Tensor]:
        out = {"A": self.A}
        if self.e is not None:
            out["e"] = self.e
        return out


@dataclass
class Block:
    heads: list[AttentionHeadParams]
    ff: FeedForwardParams
    activation: str = "sigmoid"
    ff_residual: bool = False


@dataclass
class TransformerModel:
    budget: ModelBudget
    embed: PositionalEncoding
    blocks: list[Block]
    readout: Tensor  # (d_out, n)
    scaled_scores: bool = False
    frozen: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        b = self.budget
        if len(self.blocks) != b.l:
            raise BudgetError(f"model has {len(self.blocks)} blocks, budget says l={b.l}")
        _expect("embed.A", self.embed.A, (b.n, b.d))
        if self.embed.e is not None:
            _expect("embed.e", self.embed.e, (b.n, b.tau))
        for li, blk in enumerate(self.blocks):
            if len(blk.heads) != b.h:
                raise BudgetError(f"block {li} has {len(blk.heads)} heads, budget says h={b.h}")
            for hi, hd in enumerate(blk.heads):
                p = f"blocks.{li}.heads.{hi}"
                _expect(f"{p}.W_Q", hd.W_Q, (b.m_h, b.n))
                _expect(f"{p}.W_K", hd.W_K, (b.m_h, b.n))
                _expect(f"{p}.W_V", hd.W_V, (b.m_v, b.n))
                _expect(f"{p}.W_o", hd.W_o, (b.n, b.m_v))
            p = f"blocks.{li}.ff"
            _expect(f"{p}.W1", blk.ff.W1, (b.m_ff, b.n))
            _expect(f"{p}.b1", blk.ff.b1, (b.m_ff, 1))
            _expect(f"{p}.W2", blk.ff.W2, (b.n, b.m_ff))
            _expect(f"{p}.b2", blk.ff.b2, (b.n, 1))
            ad.activation(Tensor(0.0), blk.activation)  # rejects unknown names
        _expect("readout", self.readout, (b.d_out, b.n))
        unknown = set(self.frozen) - set(self.named_tensors())
        if unknown:
            raise BudgetError(f"frozen names not in model: {sorted(unknown)}")
        for name, t in self.named_tensors().items():
            t.requires_grad = name not in self.frozen

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.tensors().items()}
        for li, blk in enumerate(self.blocks):
            for hi, hd in enumerate(blk.heads):
                for k, v in hd.tensors().items():
                    out[f"blocks.{li}.heads.{hi}.{k}"] = v
            for k, v in blk.ff.tensors().items():
                out[f"blocks.{li}.ff.{k}"] = v
        out["readout"] = self.readout
        return out

    def parameters(self) -> list[Tensor]:
        return [t for name, t in self.named_tensors().items() if name not in self.frozen]

    def __call__(self, x) -> Tensor:
        return model_forward(self, x)


def _expect(name: str, t: Tensor, shape: tuple[int, ...]) -> None:
    if t.shape != shape:
        raise BudgetError(f"{name} has shape {t.shape}, expected {shape}")


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        return ad.reshape(t, (1,) + t.shape)
    if t.ndim != 3:
        raise ad.ShapeError(f"expected a (d, tau) or (batch, d, tau) sequence, got {t.shape}")
    return t


# ---------------------------------------------------------------------------
# forward pieces


def attention_forward(
    heads: list[AttentionHeadParams],
    h: Tensor,
    scaled: bool = False,
    weights_out: list | None = None,
) -> Tensor:
    """Residual multi-head attention on ``h`` of shape ``(..., n, tau)``.

    Rows of each head's attention matrix are indexed by the query position
    t and normalised over the key position s. When ``weights_out`` is a list
    the per-head attention matrices ``(..., tau, tau)`` are appended to it.
    """
    out = h
    for hd in heads:
        if hd.W_Q.shape[1] != h.shape[-2]:
            raise ad.ShapeError(f"attention: W_Q {hd.W_Q.shape} vs hidden {h.shape}")
        q = ad.matmul(hd.W_Q, h)  # (..., m_h, tau)
        k = ad.matmul(hd.W_K, h)
        v = ad.matmul(hd.W_V, h)  # (..., m_v, tau)
        scores = ad.matmul(ad.transpose(q), k)  # [t, s]
        if scaled:
            scores = ad.scale(scores, 1.0 / math.sqrt(hd.W_Q.shape[0]))
        a = ad.softmax(scores, axis=-1)
        if weights_out is not None:
            weights_out.append(a.data)
        mixed = ad.matmul(v, ad.transpose(a))  # column t = sum_s a[t, s] v(s)
        out = ad.add(out, ad.matmul(hd.W_o, mixed))
    return out


def ff_forward(ff: FeedForwardParams, h: Tensor, activation: str = "sigmoid", residual: bool = False) -> Tensor:
    z = ad.activation(ad.add(ad.matmul(ff.W1, h), ff.b1), activation)
    out = ad.add(ad.matmul(ff.W2, z), ff.b2)
    return ad.add(h, out) if residual else out


def embed_forward(embed: PositionalEncoding, x: Tensor) -> Tensor:
    h = ad.matmul(embed.A, x)
    if embed.e is not None:
        h = ad.add(h, embed.e)
    return h


def model_forward(model: TransformerModel, x, attention_out: list | None = None) -> Tensor:
    """``(batch, d, tau) -> (batch, d_out, tau)``; a single ``(d, tau)`` maps to ``(d_out, tau)``.

    ``attention_out`` collects one list of per-head matrices per block.
    """
    xb = _as_batch(x)
    single = xb.ndim == 3 and (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == 2
    b = model.budget
    if xb.shape[1:] != (b.d, b.tau):
        raise ad.ShapeError(f"model_forward: input {xb.shape[1:]} but budget wants {(b.d, b.tau)}")
    h = embed_forward(model.embed, xb)
    for blk in model.blocks:
        weights = [] if attention_out is not None else None
        h = attention_forward(blk.heads, h, model.scaled_scores, weights)
        if attention_out is not None:
            attention_out.append(weights)
        h = ff_forward(blk.ff, h, blk.activation, blk.ff_residual)
    y = ad.matmul(model.readout, h)
    return ad.reshape(y, y.shape[1:]) if single else y


def extract_attention_graph(model: TransformerModel, x, layer_index: int, head_index: int) -> np.ndarray:
    """Post-softmax attention matrix of one head: ``(tau, tau)`` per sequence."""
    if not 0 <= layer_index < model.budget.l:
        raise IndexError(f"layer_index {layer_index} out of range for l={model.budget.l}")
    if not 0 <= head_index < model.budget.h:
        raise IndexError(f"head_index {head_index} out of range for h={model.budget.h}")
    single = np.asarray(x.data if isinstance(x, Tensor) else x).ndim == 2
    collected: list = []
    model_forward(model, x, attention_out=collected)
    a = collected[layer_index][head_index]
    return a[0] if single else a


# ---------------------------------------------------------------------------
# construction


def sinusoidal_encoding(n: int, tau: int) -> np.ndarray:
    pos = np.arange(tau)[None, :]
    i = np.arange(n)[:, None]
    freq = 1.0 / (10000.0 ** ((2 * (i // 2)) / n))
    return np.where(i % 2 == 0, np.sin(pos * freq), np.cos(pos * freq))


def init_transformer(
    budget: ModelBudget,
    seed: int = 0,
    activation: str = "sigmoid",
    positional: str = "trainable",
    ff_residual: bool = False,
    scaled_scores: bool = False,
    init_gain: float = 1.0,
) -> TransformerModel:
    """Random model with fan-in scaled Gaussian weights.

    ``positional`` is ``trainable`` (random small e(t)), ``sinusoidal``
    (fixed e(t)) or ``none`` (no encoding; the model is then permutation
    equivariant).
    """
    rng = np.random.default_rng(seed)
    b = budget

    def w(rows, cols, gain=init_gain):
        return Tensor(rng.standard_normal((rows, cols)) * gain / math.sqrt(cols))

    A = w(b.n, b.d)
    frozen = set()
    if positional == "trainable":
        e = Tensor(rng.standard_normal((b.n, b.tau)))
    elif positional == "sinusoidal":
        e = Tensor(sinusoidal_encoding(b.n, b.tau))
        frozen.add("embed.e")
    elif positional == "none":
        e = None
    else:
        raise ValueError(f"unknown positional encoding {positional!r}")
    blocks = []
    for _ in range(b.l):
        heads = [AttentionHeadParams(w(b.m_h, b.n), w(b.m_h, b.n), w(b.m_v, b.n), w(b.n, b.m_v)) for _ in range(b.h)]
        ff = FeedForwardParams(
            w(b.m_ff, b.n),
            Tensor(rng.standard_normal((b.m_ff, 1))),
            w(b.n, b.m_ff),
            Tensor(np.zeros((b.n, 1))),
        )
        blocks.append(Block(heads, ff, activation, ff_residual))
    return TransformerModel(
        b, PositionalEncoding(A, e, positional), blocks, w(b.d_out, b.n), scaled_scores, frozenset(frozen)
    )


def kolmogorov_dims(tau: int, d: int) -> tuple[int, int, int]:
    """(groups Q = 2 tau d + 1, value width M = Q tau, hidden n = 2 M)."""
    q = 2 * tau * d + 1
    return q, q * tau, 2 * q * tau


def build_kolmogorov_skeleton(
    budget: ModelBudget,
    shifts=None,
    seed: int = 0,
    activation: str = "sigmoid",
) -> TransformerModel:
    """Two-layer model wired like the density construction.

    Layer 1 attention is the identity (W_o = 0); its FF (with skip) writes
    the inner functions into the first M coordinates while the last M carry
    the per-timestep shift ``shifts[t]`` from the positional encoding. Layer 2
    attention is constant (W_Q = 0), W_V copies the first M coordinates and
    W_o adds tau times their mean (the sum over s) onto the last M. The
    layer-2 FF produces the outer functions in the first Q coordinates and
    the readout sums them. Only the two FF networks are trainable.
    """
    b = budget
    q, m, n = kolmogorov_dims(b.tau, b.d)
    if b.l != 2 or b.h != 1 or b.d_out != 1 or b.n != n or b.m_v != m:
        raise BudgetError(
            f"skeleton needs l=2, h=1, d_out=1, n={n}, m_v={m} for tau={b.tau}, d={b.d}; got {b}"
        )
    shifts = np.arange(1, b.tau + 1, dtype=float) if shifts is None else np.asarray(shifts, dtype=float)
    if shifts.shape != (b.tau,):
        raise BudgetError(f"need {b.tau} shifts, got shape {shifts.shape}")
    rng = np.random.default_rng(seed)

    A = np.zeros((n, b.d))
    A[: b.d, : b.d] = np.eye(b.d)
    e = np.zeros((n, b.tau))
    e[m:, :] = shifts[None, :]

    zeros_head = AttentionHeadParams(
        Tensor(np.zeros((b.m_h, n))), Tensor(np.zeros((b.m_h, n))), Tensor(np.zeros((m, n))), Tensor(np.zeros((n, m)))
    )
    W_V = np.zeros((m, n))
    W_V[:, :m] = np.eye(m)
    W_o = np.zeros((n, m))
    W_o[m:, :] = b.tau * np.eye(m)
    const_head = AttentionHeadParams(
        Tensor(np.zeros((b.m_h, n))), Tensor(np.zeros((b.m_h, n))), Tensor(W_V), Tensor(W_o)
    )

    def ff(out_rows):
        W2 = np.zeros((n, b.m_ff))
        W2[:out_rows] = rng.standard_normal((out_rows, b.m_ff)) / math.sqrt(b.m_ff)
        return FeedForwardParams(
            Tensor(rng.standard_normal((b.m_ff, n)) / math.sqrt(n)),
            Tensor(rng.standard_normal((b.m_ff, 1))),
            Tensor(W2),
            Tensor(np.zeros((n, 1))),
        )

    blocks = [Block([zeros_head], ff(m), activation, ff_residual=True), Block([const_head], ff(q), activation, False)]
    c = np.zeros((1, n))
    c[0, :q] = 1.0
    frozen = {"embed.A", "embed.e", "readout"}
    for li in (0, 1):
        frozen.update(f"blocks.{li}.heads.0.{k}" for k in ("W_Q", "W_K", "W_V", "W_o"))
    return TransformerModel(b, PositionalEncoding(Tensor(A), Tensor(e), "fixed"), blocks, Tensor(c), False, frozenset(frozen))


# ---------------------------------------------------------------------------
# checkpoints


def model_config(model: TransformerModel) -> dict:
    return {
        "positional": model.embed.kind,
        "has_e": model.embed.e is not None,
        "scaled_scores": model.scaled_scores,
        "activations": [blk.activation for blk in model.blocks],
        "ff_residual": [blk.ff_residual for blk in model.blocks],
        "frozen": sorted(model.frozen),
    }


def model_from_arrays(budget: ModelBudget, config: dict, arrays: dict[str, np.ndarray]) -> TransformerModel:
    def t(name):
        return Tensor(arrays[name])

    embed = PositionalEncoding(t("embed.A"), t("embed.e") if config["has_e"] else None, config["positional"])
    blocks = []
    for li in range(budget.l):
        heads = [
            AttentionHeadParams(*(t(f"blocks.{li}.heads.{hi}.{k}") for k in ("W_Q", "W_K", "W_V", "W_o")))
            for hi in range(budget.h)
        ]
        ff = FeedForwardParams(*(t(f"blocks.{li}.ff.{k}") for k in ("W1", "b1", "W2", "b2")))
        blocks.append(Block(heads, ff, config["activations"][li], config["ff_residual"][li]))
    return TransformerModel(budget, embed, blocks, t("readout"), config["scaled_scores"], frozenset(config["frozen"]))


def save_checkpoint(model: TransformerModel, path) -> None:
    from .binfmt import write_model

    write_model(path, model.budget.as_tuple(), model_config(model), {k: v.data for k, v in model.named_tensors().items()})


def load_checkpoint(path) -> TransformerModel:
    from .binfmt import read_model

    budget_tuple, config, arrays = read_model(path)
    return model_from_arrays(ModelBudget(*budget_tuple), config, arrays)
