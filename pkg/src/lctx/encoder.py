"""Hierarchical context encoder with relevance scoring over past utterances.

Per turn t the encoder mean-pools token embeddings into b_t, runs a stacked
GRU over the b sequence, predicts the encoding of the upcoming utterance,
and scores every cached b_1..b_t against that prediction with additive
attention. The attention weights give a context vector X_t.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .tensor import RngState, Tensor, init_params, layer_norm, log_softmax, softmax, stack

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    d_att: int | None = None
    dropout: float = 0.2
    freeze_embeddings: bool = False

    def __post_init__(self):
        if self.d_att is None:
            self.d_att = self.d
        if self.d <= 0 or self.layers <= 0 or self.d_att <= 0 or self.vocab_size <= 0:
            raise ValueError("d, layers, d_att and vocab_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    """Recurrent state h (layers x d) and the cache B of utterance encodings."""
    h: list[Tensor]
    B: list[Tensor] = field(default_factory=list)
    keys: list[Tensor] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.B)

    def snapshot(self) -> dict:
        return {"t": self.t,
                "h": np.stack([x.data for x in self.h]).copy(),
                "B": np.stack([b.data for b in self.B]).copy() if self.B else np.zeros((0,))}


@dataclass
class RelevanceResult:
    b_next_pred: Tensor
    alpha: Tensor
    X: Tensor


@dataclass
class TurnOutput:
    t: int
    state: dict
    relevance: RelevanceResult
    losses: dict | None  # Tensors: pred, bow, enc


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


# -- primitive computations ------------------------------------------------------

def encode_utterance(token_ids: Sequence[int], emb: Tensor) -> Tensor:
    """Mean of the token embedding rows."""
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty utterance")
    return emb[np.asarray(token_ids, dtype=np.int64)].mean(axis=0)


def gru_cell(x: Tensor, h: Tensor, p: dict, prefix: str) -> Tensor:
    """One GRU layer update.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    c = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*c
    """
    d = h.shape[-1]
    xw = x @ p[prefix + "W"] + p[prefix + "b"]  # d -> 3d
    hu = h @ p[prefix + "U"]                     # d -> 2d (z, r)
    z = (xw[:d] + hu[:d]).sigmoid()
    r = (xw[d:2 * d] + hu[d:]).sigmoid()
    c = (xw[2 * d:] + (r * h) @ p[prefix + "Uh"]).tanh()
    return h + z * (c - h)


def gru_step(b: Tensor, h_prev: Sequence[Tensor], p: dict,
             rate: float = 0.0, rng: np.random.Generator | None = None):
    """Stacked GRU step. Returns (top-layer output e_t, per-layer states h_t)."""
    if b.shape[-1] != h_prev[0].shape[-1]:
        raise ValueError(f"input dim {b.shape} does not match state dim {h_prev[0].shape}")
    x = b
    new_h = []
    for i, h in enumerate(h_prev):
        if h.shape != b.shape:
            raise ValueError(f"layer {i} state has shape {h.shape}, expected {b.shape}")
        h_new = gru_cell(x, h, p, f"gru{i}.")
        new_h.append(h_new)
        x = dropout(h_new, rate, rng)
    return x, new_h


def feed_forward_ln(x: Tensor, p: dict, prefix: str, rate: float = 0.0,
                    rng: np.random.Generator | None = None) -> Tensor:
    """LayerNorm(W2 tanh(W1 x + c1) + c2)."""
    hid = dropout((x @ p[prefix + "W1"] + p[prefix + "c1"]).tanh(), rate, rng)
    out = hid @ p[prefix + "W2"] + p[prefix + "c2"]
    return layer_norm(out, p[prefix + "ln_g"], p[prefix + "ln_b"], LN_EPS)


def attention_keys(B: Tensor, p: dict) -> Tensor:
    return B @ p["att.Wb"]


def relevance_scores(B: Tensor, b_pred: Tensor, p: dict, keys: Tensor | None = None) -> Tensor:
    """alpha_i = softmax_i(v . tanh(b_i Wb + b' Wq))."""
    if B.ndim != 2 or B.shape[0] == 0:
        raise ValueError("relevance needs at least one cached utterance")
    if keys is None:
        keys = attention_keys(B, p)
    scores = (keys + b_pred @ p["att.Wq"]).tanh() @ p["att.v"]
    return softmax(scores)


def context_vector(B: Tensor, alpha: Tensor) -> Tensor:
    if alpha.shape[0] != B.shape[0]:
        raise ValueError(f"alpha has {alpha.shape[0]} weights for {B.shape[0]} rows")
    if abs(alpha.data.sum() - 1.0) > 1e-9:
        raise ValueError("alpha must sum to 1")
    return alpha @ B


def bow_loss(vec: Tensor, target_ids: Sequence[int], W: Tensor, c: Tensor) -> Tensor:
    """Negative log-likelihood of every target token (duplicates counted) under softmax(vec W + c)."""
    if len(target_ids) == 0:
        raise ValueError("bag-of-words target is empty")
    logp = log_softmax(vec @ W + c)
    counts = np.bincount(np.asarray(target_ids), minlength=W.shape[1]).astype(np.float64)
    return -(logp * counts).sum()


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return (target - pred).abs().sum()


# -- model --------------------------------------------------------------------------

class ContextEncoder:
    def __init__(self, cfg: EncoderConfig, rng: RngState | np.random.Generator | None = None,
                 params: dict | None = None):
        self.cfg = cfg
        if params is None:
            g = (rng or RngState(0))
            g = g.generator() if isinstance(g, RngState) else g
            params = self.init_params(cfg, g)
        self.params = params

    @staticmethod
    def init_params(cfg: EncoderConfig, g: np.random.Generator) -> dict:
        d, V, da = cfg.d, cfg.vocab_size, cfg.d_att
        p = {"emb": init_params((V, d), g)}
        for i in range(cfg.layers):
            p[f"gru{i}.W"] = init_params((d, 3 * d), g)
            p[f"gru{i}.U"] = init_params((d, 2 * d), g)
            p[f"gru{i}.Uh"] = init_params((d, d), g)
            p[f"gru{i}.b"] = init_params((3 * d,), g, "zeros")
        p["pred.W1"] = init_params((d, d), g)
        p["pred.c1"] = init_params((d,), g, "zeros")
        p["pred.W2"] = init_params((d, d), g)
        p["pred.c2"] = init_params((d,), g, "zeros")
        p["pred.ln_g"] = init_params((d,), g, "ones")
        p["pred.ln_b"] = init_params((d,), g, "zeros")
        p["att.Wb"] = init_params((d, da), g)
        p["att.Wq"] = init_params((d, da), g)
        p["att.v"] = init_params((da,), g)
        p["bow.W"] = init_params((d, V), g)
        p["bow.c"] = init_params((V,), g, "zeros")
        if cfg.freeze_embeddings:
            p["emb"].requires_grad = False
        return p

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def initial_state(self) -> EncoderState:
        d = self.cfg.d
        return EncoderState(h=[Tensor(np.zeros(d)) for _ in range(self.cfg.layers)])

    def step(self, state: EncoderState, token_ids: Sequence[int],
             rng: np.random.Generator | None = None) -> tuple[EncoderState, RelevanceResult]:
        """Consume utterance u_t, return the new state and relevance over b_1..b_t."""
        p = self.params
        rate = self.cfg.dropout if rng is not None else 0.0
        b = encode_utterance(token_ids, p["emb"])
        e, h = gru_step(b, state.h, p, rate, rng)
        b_pred = feed_forward_ln(e, p, "pred.", rate, rng)
        new = EncoderState(h=h, B=state.B + [b], keys=state.keys + [b @ p["att.Wb"]])
        Bm = stack(new.B)
        alpha = relevance_scores(Bm, b_pred, p, keys=stack(new.keys))
        X = context_vector(Bm, alpha)
        return new, RelevanceResult(b_pred, alpha, X)

    def turn_losses(self, rel: RelevanceResult, next_ids: Sequence[int]) -> dict:
        p = self.params
        b_next = encode_utterance(next_ids, p["emb"])
        pred = l1_loss(rel.b_next_pred, b_next)
        bow = bow_loss(rel.X, next_ids, p["bow.W"], p["bow.c"])
        return {"pred": pred, "bow": bow, "enc": pred + bow}

    def encode_dialogue(self, turn_ids: Sequence[Sequence[int]],
                        rng: np.random.Generator | None = None,
                        with_losses: bool = True) -> list[TurnOutput]:
        """Run turns 1..T-1, each scored against the following utterance.

        ``rng`` switches on dropout (training mode).
        """
        if len(turn_ids) < 2:
            raise ValueError("a dialogue needs at least 2 turns")
        state = self.initial_state()
        out = []
        for t in range(1, len(turn_ids)):
            state, rel = self.step(state, turn_ids[t - 1], rng)
            losses = self.turn_losses(rel, turn_ids[t]) if with_losses else None
            out.append(TurnOutput(t, state.snapshot(), rel, losses))
        return out

    def dialogue_loss(self, turn_ids, rng=None) -> tuple[Tensor, list[TurnOutput]]:
        outs = self.encode_dialogue(turn_ids, rng)
        total = outs[0].losses["enc"]
        for o in outs[1:]:
            total = total + o.losses["enc"]
        return total, outs
