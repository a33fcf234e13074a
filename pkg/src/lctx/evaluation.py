"""Model-level evaluation: relevance traces, response generation and reports."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .composer import SelectionConfig, select_relevant
from .decoder import DecoderLM, GenerationParams
from .encoder import ContextEncoder
from .metrics import EvalReport, context_budget_report, generation_metrics, relevance_recovery
from .text import Dialogue, Vocab, normalize_output
from .training import encode_frozen


def turn_ids(d: Dialogue) -> list[list[int]]:
    if d.turns and not d.turns[0].token_ids and d.turns[0].text:
        raise ValueError(f"dialogue {d.id} has no token ids; call with_ids(vocab) first")
    return [list(u.token_ids) for u in d.turns]


def relevance_trace(enc: ContextEncoder, d: Dialogue) -> list[np.ndarray]:
    """alpha vectors for turns 1..T-1 (entry t-1 scores b_1..b_t)."""
    return [r.alpha.data.copy() for r in encode_frozen(enc, turn_ids(d))]


def model_relevance_recovery(enc: ContextEncoder, dialogues: Sequence[Dialogue],
                             sel: SelectionConfig) -> dict:
    """hit@k / MRR of the planted antecedent at each annotated probe turn."""
    alphas, ants = [], []
    for d in dialogues:
        if d.annotation is None:
            raise ValueError(f"dialogue {d.id} has no planted-dependency annotation")
        trace = relevance_trace(enc, d)
        alphas.append(trace[d.annotation.probe_turn - 1])
        ants.append(d.annotation.antecedent_turn)
    return relevance_recovery(alphas, ants, sel)


def model_context_budget(enc: ContextEncoder, dialogues: Sequence[Dialogue],
                         sel: SelectionConfig) -> dict:
    return context_budget_report([relevance_trace(enc, d) for d in dialogues],
                                 [turn_ids(d) for d in dialogues], sel)


def decode_response(dec: DecoderLM, rel, history_ids: Sequence[Sequence[int]], vocab: Vocab,
                    sel: SelectionConfig, gen: GenerationParams) -> tuple[list[int], list[int]]:
    """Beam-search the next utterance from the encoder output after the last history turn.

    Returns (token ids without the end token, selected turns).
    """
    t = len(history_ids)
    R = select_relevant(rel.alpha.data, sel)
    _, C = dec.context(rel, t, [list(h) for h in history_ids], sel, vocab.sep_id)
    out = dec.generate(C, gen, vocab.sep_id)
    if out and out[-1] == vocab.sep_id:
        out = out[:-1]
    return out, R


def respond(enc: ContextEncoder, dec: DecoderLM, history_ids: Sequence[Sequence[int]],
            vocab: Vocab, sel: SelectionConfig, gen: GenerationParams) -> tuple[str, np.ndarray, list[int]]:
    """Generate the next utterance after ``history_ids``.

    Returns (normalized text, alpha over the history, selected turns).
    """
    history_ids = [list(h) for h in history_ids]
    if not history_ids:
        raise ValueError("empty history")
    # the last relevance result is computed right after consuming u_t; the dummy
    # trailing turn is never read because no losses are requested
    rel = encode_frozen(enc, history_ids + [[]])[-1]
    out, R = decode_response(dec, rel, history_ids, vocab, sel, gen)
    return normalize_output(vocab.decode(out)), rel.alpha.data.copy(), R


def generate_responses(enc: ContextEncoder, dec: DecoderLM, dialogues: Sequence[Dialogue],
                       vocab: Vocab, sel: SelectionConfig, gen: GenerationParams) -> list[dict]:
    """Predict the final turn of each dialogue from the turns before it."""
    rows = []
    for d in dialogues:
        ids = turn_ids(d)
        text, alpha, R = respond(enc, dec, ids[:-1], vocab, sel, gen)
        rows.append({"id": d.id, "response": text, "reference": normalize_output(d.turns[-1].text),
                     "selected": R})
    return rows


def evaluate_models(enc: ContextEncoder, dec: DecoderLM | None, dialogues: Sequence[Dialogue],
                    vocab: Vocab, sel: SelectionConfig, gen: GenerationParams,
                    references: dict[str, list[str]] | None = None) -> EvalReport:
    """Full report: generation metrics (if a decoder is given), context budget, relevance.

    ``references`` optionally maps dialogue id to extra reference responses.
    """
    report = EvalReport(samples=len(dialogues),
                        config={"selection": sel.to_dict(), "generation": gen.to_dict()})
    if dec is not None:
        rows = generate_responses(enc, dec, dialogues, vocab, sel, gen)
        refs = [[r["reference"]] + [normalize_output(x) for x in (references or {}).get(r["id"], [])]
                for r in rows]
        report.metrics = generation_metrics([r["response"] for r in rows], refs)
    report.context_budget = model_context_budget(enc, dialogues, sel)
    if all(d.annotation is not None for d in dialogues):
        report.relevance = model_relevance_recovery(enc, dialogues, sel)
    return report
