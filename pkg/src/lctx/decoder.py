"""Causal self-attentive language model conditioned on a composed context, plus beam search."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .composer import (DecoderContext, SelectionConfig, build_context,
                       compose_decoder_context, decoder_bow_loss)
from .tensor import RngState, Tensor, concat, gelu, init_params, layer_norm, log_softmax, softmax

LN_EPS = 1e-5
MASK_VALUE = -1e9


class SequenceOverflowError(ValueError):
    pass


@dataclass
class DecoderConfig:
    vocab_size: int
    d_enc: int = 64
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    max_positions: int = 256
    lam: float = 0.5
    dropout: float = 0.2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if min(self.vocab_size, self.d_enc, self.d_model, self.layers, self.max_positions) <= 0:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationParams:
    beam_width: int = 5
    max_len: int = 40
    min_len: int = 11
    length_penalty: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    def to_dict(self) -> dict:
        return asdict(self)


def decoder_loss(lm: float | Tensor, bow: float | Tensor, lam: float):
    """L_dec = L_LM + lam * L_bow'."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return lm + bow * lam


def _drop(x: Tensor, rate: float, rng):
    if rng is None or rate == 0.0:
        return x
    return x * ((rng.random(x.shape) >= rate) / (1.0 - rate))


class DecoderLM:
    """Decoder-stage model: context unifier, decoder BoW head and the causal LM."""

    def __init__(self, cfg: DecoderConfig, rng: RngState | np.random.Generator | None = None,
                 params: dict | None = None):
        self.cfg = cfg
        if params is None:
            g = rng or RngState(1)
            g = g.generator() if isinstance(g, RngState) else g
            params = self.init_params(cfg, g)
        self.params = params

    @staticmethod
    def init_params(cfg: DecoderConfig, g: np.random.Generator) -> dict:
        D, V = cfg.d_model, cfg.vocab_size
        p = {
            "unify.W": init_params((2 * cfg.d_enc, D), g),
            "unify.c": init_params((D,), g, "zeros"),
            "unify.ln_g": init_params((D,), g, "ones"),
            "unify.ln_b": init_params((D,), g, "zeros"),
            "bow2.W": init_params((D, V), g),
            "bow2.c": init_params((V,), g, "zeros"),
            "tok_emb": init_params((V, D), g),
            "pos_emb": init_params((cfg.max_positions, D), g),
        }
        for i in range(cfg.layers):
            p[f"blk{i}.ln1_g"] = init_params((D,), g, "ones")
            p[f"blk{i}.ln1_b"] = init_params((D,), g, "zeros")
            p[f"blk{i}.Wqkv"] = init_params((D, 3 * D), g)
            p[f"blk{i}.bqkv"] = init_params((3 * D,), g, "zeros")
            p[f"blk{i}.Wo"] = init_params((D, D), g)
            p[f"blk{i}.bo"] = init_params((D,), g, "zeros")
            p[f"blk{i}.ln2_g"] = init_params((D,), g, "ones")
            p[f"blk{i}.ln2_b"] = init_params((D,), g, "zeros")
            p[f"blk{i}.W1"] = init_params((D, 4 * D), g)
            p[f"blk{i}.b1"] = init_params((4 * D,), g, "zeros")
            p[f"blk{i}.W2"] = init_params((4 * D, D), g)
            p[f"blk{i}.b2"] = init_params((D,), g, "zeros")
        p["lnf_g"] = init_params((D,), g, "ones")
        p["lnf_b"] = init_params((D,), g, "zeros")
        p["out.W"] = init_params((D, V), g)
        p["out.c"] = init_params((V,), g, "zeros")
        return p

    def frozen(self) -> "DecoderLM":
        """Same weights without gradient tracking, for inference."""
        return DecoderLM(self.cfg, params={k: Tensor(v.data) for k, v in self.params.items()})

    # -- forward ---------------------------------------------------------------
    def hidden(self, rows: Tensor, rng=None) -> Tensor:
        p, cfg = self.params, self.cfg
        n, D = rows.shape
        if n > cfg.max_positions:
            raise SequenceOverflowError(f"sequence of {n} rows exceeds {cfg.max_positions} positions")
        H = cfg.heads
        dh = D // H
        rate = cfg.dropout if rng is not None else 0.0
        mask = np.triu(np.full((n, n), MASK_VALUE), k=1)
        x = rows + p["pos_emb"][:n]
        for i in range(cfg.layers):
            pre = f"blk{i}."
            h = layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"], LN_EPS)
            qkv = h @ p[pre + "Wqkv"] + p[pre + "bqkv"]
            q = qkv[:, :D].reshape(n, H, dh).transpose(1, 0, 2)
            k = qkv[:, D:2 * D].reshape(n, H, dh).transpose(1, 2, 0)
            v = qkv[:, 2 * D:].reshape(n, H, dh).transpose(1, 0, 2)
            att = softmax((q @ k) * (1.0 / math.sqrt(dh)) + mask)
            mixed = (att @ v).transpose(1, 0, 2).reshape(n, D)
            x = x + _drop(mixed @ p[pre + "Wo"] + p[pre + "bo"], rate, rng)
            h = layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"], LN_EPS)
            ff = gelu(h @ p[pre + "W1"] + p[pre + "b1"]) @ p[pre + "W2"] + p[pre + "b2"]
            x = x + _drop(ff, rate, rng)
        return layer_norm(x, p["lnf_g"], p["lnf_b"], LN_EPS)

    def logits(self, rows: Tensor, rng=None) -> Tensor:
        return self.hidden(rows, rng) @ self.params["out.W"] + self.params["out.c"]

    def lm_inputs(self, C: Tensor, target_ids: Sequence[int]) -> Tensor:
        if len(target_ids) > 1:
            emb = self.params["tok_emb"][np.asarray(target_ids[:-1], dtype=np.int64)]
            return concat([C, emb], axis=0)
        return C

    def lm_forward(self, C: Tensor, target_ids: Sequence[int], rng=None) -> Tensor:
        """Summed next-token NLL of ``target_ids`` following the context rows."""
        if len(target_ids) == 0:
            raise ValueError("empty LM target")
        n0, T = C.shape[0], len(target_ids)
        logits = self.logits(self.lm_inputs(C, target_ids), rng)
        logp = log_softmax(logits[n0 - 1:n0 - 1 + T])
        onehot = np.zeros(logp.shape)
        onehot[np.arange(T), np.asarray(target_ids)] = 1.0
        return -(logp * onehot).sum()

    def context(self, rel, t: int, turn_ids, sel: SelectionConfig, sep_id: int):
        ctx = build_context(rel, t, turn_ids, self.params, sel, sep_id)
        return ctx, compose_decoder_context(ctx.Z, ctx.Y_token_ids, self.params["tok_emb"])

    def turn_losses(self, ctx: DecoderContext, C: Tensor, next_ids: Sequence[int],
                    sep_id: int, rng=None) -> dict:
        """LM loss on u_{t+1} + SEP, BoW loss on the tokens of u_{t+1}."""
        lm = self.lm_forward(C, list(next_ids) + [sep_id], rng)
        bow = decoder_bow_loss(ctx.Z, next_ids, self.params)
        return {"lm": lm, "bow": bow, "dec": decoder_loss(lm, bow, self.cfg.lam)}

    # -- generation ---------------------------------------------------------------
    def next_logprobs(self, C: Tensor, prefix: Sequence[int]) -> np.ndarray:
        rows = C
        if prefix:
            emb = self.params["tok_emb"][np.asarray(prefix, dtype=np.int64)]
            rows = concat([C, emb], axis=0)
        logits = self.logits(rows)
        return log_softmax(logits[rows.shape[0] - 1]).data

    def generate(self, C: Tensor, gen: GenerationParams, end_id: int) -> list[int]:
        if C.shape[0] == 0:
            raise ValueError("empty context")
        model = self.frozen()
        C = Tensor(C.data)
        limit = self.cfg.max_positions - C.shape[0] + 1
        if gen.max_len > limit:
            gen = GenerationParams(gen.beam_width, limit, min(gen.min_len, limit),
                                   gen.length_penalty, gen.seed)
        return beam_search(lambda prefix: model.next_logprobs(C, prefix), end_id, gen)


# -- beam search -------------------------------------------------------------------

def hypothesis_score(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (length ** length_penalty)


def beam_search(logprob_fn: Callable[[tuple], np.ndarray], end_id: int,
                gen: GenerationParams) -> list[int]:
    """Beam search over next-token log-probabilities.

    The end token is masked until ``min_len`` tokens would be reached, and
    hypotheses still open at ``max_len`` are closed there. Finished
    hypotheses are ranked by logprob / length**length_penalty, where length
    counts the end token. Ties go to the lexicographically smaller sequence.
    """
    live: list[tuple[float, tuple]] = [(0.0, ())]
    finished: list[tuple[float, tuple]] = []
    for step in range(1, gen.max_len + 1):
        cands = []
        for lp, seq in live:
            scores = np.asarray(logprob_fn(seq), dtype=float)
            if step < gen.min_len:
                scores = scores.copy()
                scores[end_id] = -np.inf
            for tok in np.flatnonzero(np.isfinite(scores)):
                cands.append((lp + float(scores[tok]), seq + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for lp, seq in cands[:gen.beam_width]:
            if seq[-1] == end_id or step == gen.max_len:
                finished.append((hypothesis_score(lp, len(seq), gen.length_penalty), seq))
            else:
                live.append((lp, seq))
        if not live:
            break
    best = min(finished, key=lambda f: (-f[0], f[1]))
    return list(best[1])


def greedy_decode(logprob_fn: Callable[[tuple], np.ndarray], end_id: int,
                  gen: GenerationParams) -> list[int]:
    seq: tuple = ()
    for step in range(1, gen.max_len + 1):
        scores = np.asarray(logprob_fn(seq), dtype=float).copy()
        if step < gen.min_len:
            scores[end_id] = -np.inf
        tok = int(np.argmax(scores))
        seq += (tok,)
        if tok == end_id:
            break
    return list(seq)

