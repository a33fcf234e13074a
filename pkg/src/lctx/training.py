"""Two-stage training: encoder first, then the decoder on a frozen encoder."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointError, ModelCheckpoint
from .composer import SelectionConfig
from .decoder import DecoderConfig, DecoderLM
from .encoder import ContextEncoder, EncoderConfig
from .tensor import NonFiniteError, RngState, Tensor
from .text import Dialogue, Vocab

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "encoder"
    lr: float = 5e-4
    epochs: int = 30
    accumulate: int = 4
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.stage not in ("encoder", "decoder"):
            raise ValueError(f"stage must be 'encoder' or 'decoder', got {self.stage!r}")
        if self.lr <= 0 or self.accumulate < 1 or self.epochs < 1:
            raise ValueError("need lr > 0, accumulate >= 1, epochs >= 1")

    @classmethod
    def for_stage(cls, stage: str, **kw) -> "TrainConfig":
        """Stage defaults: encoder lr 5e-4 / 30 epochs, decoder lr 1e-5 / 10 epochs."""
        base = {"encoder": {"lr": 5e-4, "epochs": 30}, "decoder": {"lr": 1e-5, "epochs": 10}}[stage]
        base.update(kw)
        return cls(stage=stage, **base)

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer -------------------------------------------------------------------

def adamw_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update; returns (theta, m, v)."""
    if step < 1:
        raise ValueError("step counter starts at 1")
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite gradient")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * theta
    return theta, m, v


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[k], self.v[k] = adamw_update(
                p.data, g, self.m[k], self.v[k], self.t, c.lr, c.beta1, c.beta2,
                c.adam_eps, c.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- shared loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: dict
    model: object = None


@dataclass
class _Sums:
    parts: dict = field(default_factory=dict)
    turns: int = 0

    def add(self, values: dict, turns: int) -> None:
        for k, v in values.items():
            self.parts[k] = self.parts.get(k, 0.0) + v
        self.turns += turns

    def per_turn(self) -> dict:
        return {k: v / max(self.turns, 1) for k, v in self.parts.items()}


def _run_epochs(params: dict[str, Tensor], train: Sequence, val: Sequence,
                dialogue_loss: Callable, cfg: TrainConfig, keys: tuple[str, ...],
                on_epoch: Callable | None = None):
    """Generic accumulate-G-dialogues training with min-validation selection.

    ``dialogue_loss(item, rng)`` returns (loss tensor, {part: float}, n_turns);
    ``keys`` lists the parts, first one being the total.
    """
    if not train:
        raise ValueError("empty training corpus")
    g = RngState(cfg.seed).generator()
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    opt = AdamW(trainable, cfg)

    def evaluate(items) -> dict:
        s = _Sums()
        for it in items:
            _, parts, n = dialogue_loss(it, None)
            s.add(parts, n)
        return s.per_turn()

    history = {"columns": list(keys), "epochs": [], "steps": []}
    init_train, init_val = evaluate(train), evaluate(val) if val else {}
    history["initial"] = {"train": init_train, "val": init_val}
    best = (float("inf"), 0, None)
    for epoch in range(1, cfg.epochs + 1):
        order = g.permutation(len(train)) if cfg.shuffle else np.arange(len(train))
        running, pending = _Sums(), _Sums()
        pending_n = 0
        for idx in order:
            item = train[int(idx)]
            try:
                loss, parts, n = dialogue_loss(item, g)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, dialogue {getattr(item, 'id', idx)}: {exc}") from exc
            running.add(parts, n)
            pending.add(parts, n)
            pending_n += 1
            if pending_n == cfg.accumulate:
                _step(opt, history, epoch, pending, pending_n)
                pending, pending_n = _Sums(), 0
        if pending_n:
            _step(opt, history, epoch, pending, pending_n)
        val_parts = evaluate(val) if val else {}
        rec = {"epoch": epoch, "train": running.per_turn(), "val": val_parts}
        history["epochs"].append(rec)
        score = val_parts.get(keys[0], rec["train"][keys[0]])
        log.info("epoch %d train %s val %s", epoch, _fmt(rec["train"]), _fmt(val_parts))
        if score < best[0]:
            best = (score, epoch, {k: p.data.copy() for k, p in params.items()})
        if on_epoch is not None:
            on_epoch(rec)
    history["best_epoch"] = best[1]
    history["best_val"] = best[0]
    for k, arr in best[2].items():
        params[k].data = arr
    return history


def _fmt(parts: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in parts.items())


def _step(opt: AdamW, history: dict, epoch: int, sums: _Sums, n: int) -> None:
    try:
        opt.step()
    except NonFiniteError as exc:
        raise TrainingDiverged(f"epoch {epoch}, optimizer step {opt.t}: {exc}") from exc
    opt.zero_grad()
    history["steps"].append({"step": opt.t, "epoch": epoch, "dialogues": n,
                             "turns": sums.turns, **sums.parts})


# -- encoder stage ---------------------------------------------------------------------

def _turn_ids(d: Dialogue | Sequence) -> list:
    if isinstance(d, Dialogue):
        return [list(u.token_ids) for u in d.turns]
    return d


def encoder_dialogue_loss(enc: ContextEncoder, ids, rng):
    total, outs = enc.dialogue_loss(ids, rng)
    parts = {"total": 0.0, "bow": 0.0, "l1": 0.0}
    for o in outs:
        parts["total"] += o.losses["enc"].item()
        parts["bow"] += o.losses["bow"].item()
        parts["l1"] += o.losses["pred"].item()
    return total, parts, len(outs)


def train_encoder(train: Sequence[Dialogue], val: Sequence[Dialogue], vocab: Vocab,
                  enc_cfg: EncoderConfig, cfg: TrainConfig, on_epoch=None,
                  encoder: ContextEncoder | None = None) -> TrainResult:
    """Train the encoder; ``encoder`` (trained in place) replaces the fresh seeded init."""
    if cfg.stage != "encoder":
        raise ValueError("train_encoder needs a stage='encoder' config")
    enc = encoder if encoder is not None else ContextEncoder(enc_cfg, RngState(cfg.seed))
    if enc.cfg != enc_cfg:
        raise ValueError("encoder config differs from enc_cfg")
    tr = [_turn_ids(d) for d in train]
    va = [_turn_ids(d) for d in val]
    history = _run_epochs(enc.params, tr, va, lambda ids, g: encoder_dialogue_loss(enc, ids, g),
                          cfg, ("total", "bow", "l1"), on_epoch)
    ckpt = ModelCheckpoint(
        stage="encoder",
        config={"encoder": enc_cfg.to_dict(), "train": cfg.to_dict()},
        tensors={k: p.data.copy() for k, p in enc.params.items()},
        vocab_fingerprint=vocab.fingerprint,
        meta={"best_epoch": history["best_epoch"], "val_loss": history["best_val"],
              "seed": cfg.seed})
    return TrainResult(ckpt, history, enc)


def encoder_from_checkpoint(ckpt: ModelCheckpoint) -> ContextEncoder:
    if ckpt.stage != "encoder":
        raise CheckpointError(f"expected an encoder checkpoint, found {ckpt.stage!r}")
    cfg = EncoderConfig(**ckpt.config["encoder"])
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items()}
    if cfg.freeze_embeddings:
        params["emb"].requires_grad = False
    return ContextEncoder(cfg, params=params)


# -- decoder stage ----------------------------------------------------------------------

@dataclass
class _EncodedDialogue:
    ids: list
    relevance: list  # RelevanceResult per turn 1..T-1 (constants)


def encode_frozen(enc: ContextEncoder, ids) -> list:
    frozen = ContextEncoder(enc.cfg, params={k: Tensor(v.data) for k, v in enc.params.items()})
    return [o.relevance for o in frozen.encode_dialogue(ids, None, with_losses=False)]


def decoder_dialogue_loss(dec: DecoderLM, item: _EncodedDialogue, sel: SelectionConfig,
                          sep_id: int, rng):
    total = None
    parts = {"total": 0.0, "lm": 0.0, "bow": 0.0}
    for t, rel in enumerate(item.relevance, 1):
        ctx, C = dec.context(rel, t, item.ids, sel, sep_id)
        losses = dec.turn_losses(ctx, C, item.ids[t], sep_id, rng)
        total = losses["dec"] if total is None else total + losses["dec"]
        parts["total"] += losses["dec"].item()
        parts["lm"] += losses["lm"].item()
        parts["bow"] += losses["bow"].item()
    return total, parts, len(item.relevance)


def train_decoder(train: Sequence[Dialogue], val: Sequence[Dialogue], vocab: Vocab,
                  encoder_ckpt: ModelCheckpoint, dec_cfg: DecoderConfig,
                  sel: SelectionConfig, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    if cfg.stage != "decoder":
        raise ValueError("train_decoder needs a stage='decoder' config")
    encoder_ckpt.check_vocab(vocab.fingerprint)
    enc = encoder_from_checkpoint(encoder_ckpt)
    if dec_cfg.d_enc != enc.cfg.d:
        raise ValueError(f"decoder d_enc={dec_cfg.d_enc} but encoder d={enc.cfg.d}")
    dec = DecoderLM(dec_cfg, RngState(cfg.seed))
    tr = [_EncodedDialogue(_turn_ids(d), encode_frozen(enc, _turn_ids(d))) for d in train]
    va = [_EncodedDialogue(_turn_ids(d), encode_frozen(enc, _turn_ids(d))) for d in val]
    sep = vocab.sep_id
    history = _run_epochs(dec.params, tr, va,
                          lambda it, g: decoder_dialogue_loss(dec, it, sel, sep, g),
                          cfg, ("total", "lm", "bow"), on_epoch)
    ckpt = ModelCheckpoint(
        stage="decoder",
        config={"decoder": dec_cfg.to_dict(), "selection": sel.to_dict(), "train": cfg.to_dict(),
                "encoder_meta": encoder_ckpt.meta},
        tensors={k: p.data.copy() for k, p in dec.params.items()},
        vocab_fingerprint=vocab.fingerprint,
        meta={"best_epoch": history["best_epoch"], "val_loss": history["best_val"],
              "seed": cfg.seed})
    return TrainResult(ckpt, history, dec)


def decoder_from_checkpoint(ckpt: ModelCheckpoint) -> tuple[DecoderLM, SelectionConfig]:
    if ckpt.stage != "decoder":
        raise CheckpointError(f"expected a decoder checkpoint, found {ckpt.stage!r}")
    cfg = DecoderConfig(**ckpt.config["decoder"])
    sel = SelectionConfig(**ckpt.config["selection"])
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.tensors.items()}
    return DecoderLM(cfg, params=params), sel
