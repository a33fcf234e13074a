"""Decoder-context construction: turn selection, token history, unified vector."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .encoder import bow_loss
from .tensor import Tensor, concat, layer_norm

LN_EPS = 1e-5


@dataclass
class SelectionConfig:
    k: int = 2
    m_last: int = 2
    N: int = 64

    def __post_init__(self):
        if self.k < 0 or self.m_last < 0 or self.c_max < 1:
            raise ValueError("need k >= 0, m_last >= 0 and k + m_last >= 1")
        if self.N < 1:
            raise ValueError("N must be positive")

    @property
    def c_max(self) -> int:
        return self.k + self.m_last

    def row_bound(self) -> int:
        """Upper bound on decoder context rows: c_max * (N + 1) + 1."""
        return self.c_max * (self.N + 1) + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderContext:
    Z: Tensor
    R: list[int]
    Y_token_ids: list[int]

    @property
    def y_token_count(self) -> int:
        return len(self.Y_token_ids)

    @property
    def n_rows(self) -> int:
        return self.y_token_count + 1


def select_relevant(alpha: Sequence[float], cfg: SelectionConfig) -> list[int]:
    """1-based indices of the turns kept for the decoder, in chronological order.

    The last ``m_last`` turns are always kept; the ``k`` highest-scoring turns
    before that window fill the remaining slots (ties go to the later turn).
    """
    alpha = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=float)
    t = alpha.shape[0]
    if t == 0:
        raise ValueError("empty relevance vector")
    if t <= cfg.c_max:
        return list(range(1, t + 1))
    forced = list(range(t - cfg.m_last + 1, t + 1))
    pool = range(1, t - cfg.m_last + 1)
    ranked = sorted(pool, key=lambda i: (-alpha[i - 1], -i))
    return sorted(ranked[:cfg.k] + forced)


def assemble_history(R: Sequence[int], turn_ids: Sequence[Sequence[int]], sep_id: int,
                     N: int = 64) -> list[int]:
    """Up to N tokens of each selected turn, each followed by a separator."""
    if not R:
        raise ValueError("no turns selected")
    out: list[int] = []
    for i in R:
        if not 1 <= i <= len(turn_ids):
            raise IndexError(f"turn {i} out of range 1..{len(turn_ids)}")
        out.extend(turn_ids[i - 1][:N])
        out.append(sep_id)
    return out


def unify_context(X: Tensor, b_pred: Tensor, p: dict) -> Tensor:
    """Z = LayerNorm([X ; b'] W + c), mapping 2d -> d'."""
    if X.shape != b_pred.shape:
        raise ValueError(f"X {X.shape} and b' {b_pred.shape} differ in dimension")
    W = p["unify.W"]
    if W.shape[0] != 2 * X.shape[0]:
        raise ValueError(f"unify weight expects input {W.shape[0]}, got {2 * X.shape[0]}")
    h = concat([X, b_pred]) @ W + p["unify.c"]
    return layer_norm(h, p["unify.ln_g"], p["unify.ln_b"], LN_EPS)


def compose_decoder_context(Z: Tensor, Y_token_ids: Sequence[int], tok_emb: Tensor) -> Tensor:
    """Rows: Z at position 0, then the embeddings of Y."""
    if len(Y_token_ids) == 0:
        raise ValueError("empty token history")
    if Z.shape[-1] != tok_emb.shape[1]:
        raise ValueError(f"Z has dim {Z.shape[-1]}, embeddings have {tok_emb.shape[1]}")
    rows = tok_emb[np.asarray(Y_token_ids, dtype=np.int64)]
    return concat([Z.reshape(1, -1), rows], axis=0)


def decoder_bow_loss(Z: Tensor, target_ids: Sequence[int], p: dict) -> Tensor:
    return bow_loss(Z, target_ids, p["bow2.W"], p["bow2.c"])


def build_context(rel, t: int, turn_ids: Sequence[Sequence[int]], p: dict,
                  cfg: SelectionConfig, sep_id: int) -> DecoderContext:
    """Context for predicting turn t+1 from encoder output at turn t.

    The encoder outputs are treated as constants (the encoder is frozen
    while the decoder trains).
    """
    R = select_relevant(rel.alpha.data, cfg)
    Y = assemble_history(R, turn_ids[:t], sep_id, cfg.N)
    Z = unify_context(Tensor(rel.X.data), Tensor(rel.b_next_pred.data), p)
    return DecoderContext(Z, R, Y)
