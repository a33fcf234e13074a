"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (printed in the pytest terminal summary
by conftest.py) and then asserts the criterion at its stated tolerance.
Run alone with ``pytest tests/test_acceptance.py -v`` (about 5 minutes on one core).
"""
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import metric_oracle
from lctx.checkpoint import CheckpointError, from_bytes, to_bytes
from lctx.composer import SelectionConfig, select_relevant, unify_context
from lctx.decoder import DecoderConfig, DecoderLM, GenerationParams, beam_search
from lctx.encoder import (ContextEncoder, EncoderConfig, bow_loss, context_vector,
                          feed_forward_ln, gru_cell, relevance_scores)
from lctx.evaluation import model_context_budget, model_relevance_recovery
from lctx.metrics import combinatorial_hit_rate, generation_metrics
from lctx.tensor import RngState, Tensor, grad_check, log_softmax, softmax
from lctx.text import SynthConfig, build_vocab, generate_synthetic
from lctx.training import TrainConfig, encoder_dialogue_loss, train_decoder, train_encoder

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


# -- criterion 1 ------------------------------------------------------------------------

# relevance rows of the worked twelve-turn example and the turns underlined in it
EXAMPLE_ROWS = {
    2: ([0.28, 0.72], {1, 2}),
    3: ([0.57, 0.27, 0.16], {1, 2, 3}),
    4: ([0.21, 0.01, 0.18, 0.60], {1, 2, 3, 4}),
    5: ([0.00, 0.00, 0.00, 0.00, 1.00], {1, 2, 3, 5}),
    6: ([0.49, 0.03, 0.27, 0.16, 0.04, 0.01], {1, 3, 5, 6}),
    7: ([0.19, 0.17, 0.01, 0.03, 0.14, 0.00, 0.46], {1, 2, 6, 7}),
    8: ([0.39, 0.05, 0.18, 0.20, 0.05, 0.01, 0.05, 0.07], {1, 4, 7, 8}),
    9: ([0.00, 0.19, 0.00, 0.00, 0.06, 0.00, 0.40, 0.00, 0.35], {2, 7, 8, 9}),
    10: ([0.30, 0.01, 0.17, 0.18, 0.02, 0.01, 0.01, 0.07, 0.01, 0.22], {1, 4, 9, 10}),
    11: ([0.00] * 10 + [1.00], {1, 9, 10, 11}),
    12: ([0.08, 0.01, 0.06, 0.01, 0.07, 0.01, 0.02, 0.03, 0.03, 0.01, 0.00, 0.67], {1, 5, 11, 12}),
}


def test_criterion_01_selection_fidelity():
    start = time.perf_counter()
    sel = SelectionConfig(k=2, m_last=2)
    wrong = {t: select_relevant(a, sel) for t, (a, want) in EXAMPLE_ROWS.items()
             if set(select_relevant(a, sel)) != want}
    elapsed = time.perf_counter() - start
    ok = not wrong and elapsed < 1.0
    detail = "; ".join(f"row {t}: got {got} expected {sorted(EXAMPLE_ROWS[t][1])}"
                       for t, got in wrong.items())
    record(1, ok, f"{len(EXAMPLE_ROWS) - len(wrong)}/{len(EXAMPLE_ROWS)} rows match "
                  f"({elapsed * 1e3:.1f} ms){'; ' + detail if detail else ''}")
    assert ok, detail


# -- criterion 2 ------------------------------------------------------------------------

def _perturbed(params, g, scale=0.3):
    for p in params.values():
        p.data = p.data + g.normal(scale=scale, size=p.shape)
    return params


def _component_errors(seed: int) -> dict:
    d, V = 8, 10
    g = np.random.default_rng(seed)
    enc = ContextEncoder(EncoderConfig(vocab_size=V, d=d, layers=1, dropout=0.0), RngState(seed))
    p = _perturbed(enc.params, g)
    x, h = Tensor(g.normal(size=d), requires_grad=True), Tensor(g.normal(size=d), requires_grad=True)
    B = Tensor(g.normal(size=(5, d)), requires_grad=True)
    q = Tensor(g.normal(size=d), requires_grad=True)
    ids = [3, 5, 5, 9]
    w = g.normal(size=d)
    errs = {}
    errs["gru"] = grad_check(lambda: (gru_cell(x, h, p, "gru0.") * Tensor(w)).sum(),
                             [x, h] + [p[k] for k in p if k.startswith("gru0.")], step=1e-5)
    att = [p["att.Wb"], p["att.Wq"], p["att.v"], B, q]
    errs["attention"] = grad_check(
        lambda: (context_vector(B, relevance_scores(B, q, p)) * Tensor(w)).sum(), att, step=1e-5)
    errs["fnn_pred"] = grad_check(lambda: (feed_forward_ln(x, p, "pred.") * Tensor(w)).sum(),
                                  [x] + [p[k] for k in p if k.startswith("pred.")], step=1e-5)
    errs["bow_enc"] = grad_check(lambda: bow_loss(x, ids, p["bow.W"], p["bow.c"]),
                                 [x, p["bow.W"], p["bow.c"]], step=1e-5)

    dec = DecoderLM(DecoderConfig(vocab_size=V, d_enc=d, d_model=d, layers=1, heads=2,
                                  max_positions=32, dropout=0.0), RngState(seed))
    dp = _perturbed(dec.params, g, 0.1)
    X, b = Tensor(g.normal(size=d), requires_grad=True), Tensor(g.normal(size=d), requires_grad=True)
    wz = g.normal(size=d)
    unify = [X, b] + [dp[k] for k in dp if k.startswith("unify.")]
    errs["fnn_unify"] = grad_check(lambda: (unify_context(X, b, dp) * Tensor(wz)).sum(), unify, step=1e-5)
    errs["bow_dec"] = grad_check(lambda: bow_loss(unify_context(X, b, dp), ids, dp["bow2.W"], dp["bow2.c"]),
                                 unify + [dp["bow2.W"], dp["bow2.c"]], step=1e-5)
    C = Tensor(g.normal(size=(4, d)), requires_grad=True)
    # the key bias has an identically zero gradient (softmax shift invariance); it is
    # excluded here and its zero gradient asserted in tests/test_decoder.py
    lm_params = [C] + [v for k, v in dp.items() if not k.startswith(("unify.", "bow2.", "blk0.bqkv"))]
    errs["decoder_lm"] = grad_check(lambda: dec.lm_forward(C, [4, 7, 2]), lm_params, step=1e-4)
    return errs


def test_criterion_02_gradient_suite():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(5):
        for k, v in _component_errors(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    record(2, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f" over 5 seeds ({elapsed:.1f} s)")
    assert ok, worst


# -- criterion 3 ------------------------------------------------------------------------

def test_criterion_03_normalization():
    g = np.random.default_rng(3)
    worst = 0.0
    vectors = 0
    V = 13
    for i in range(1000):
        d = int(g.integers(2, 9))
        seed = int(g.integers(1 << 31))
        enc = ContextEncoder(EncoderConfig(vocab_size=V, d=d, layers=int(g.integers(1, 3))),
                             RngState(seed))
        _perturbed(enc.params, g, float(g.uniform(0, 2)))
        T = int(g.integers(2, 7))
        ids = [list(g.integers(4, V, size=int(g.integers(1, 6)))) for _ in range(T)]
        for o in enc.encode_dialogue(ids, None, with_losses=False):
            rel = o.relevance
            probs = [rel.alpha.data,
                     softmax(rel.X @ enc.params["bow.W"] + enc.params["bow.c"]).data,
                     np.exp(log_softmax(rel.X @ enc.params["bow.W"] + enc.params["bow.c"]).data)]
            for pr in probs:
                worst = max(worst, abs(pr.sum() - 1.0))
                vectors += 1
        dec = DecoderLM(DecoderConfig(vocab_size=V, d_enc=d, d_model=4, layers=1, heads=2,
                                      max_positions=64), RngState(seed))
        Z = unify_context(rel.X, rel.b_next_pred, dec.params)
        C = Tensor(np.vstack([Z.data, g.normal(size=(3, 4))]))
        probs = [softmax(Z @ dec.params["bow2.W"] + dec.params["bow2.c"]).data]
        probs += list(softmax(dec.logits(dec.lm_inputs(C, [5, 6, 2])), axis=-1).data)
        probs.append(np.exp(dec.next_logprobs(C, [5, 6])))
        for pr in probs:
            worst = max(worst, abs(pr.sum() - 1.0))
            vectors += 1
    ok = worst <= 1e-9
    record(3, ok, f"max |sum-1| = {worst:.1e} over {vectors} probability vectors (1000 forward passes)")
    assert ok


# -- shared encoder run for criteria 4, 5, 6, 10 ------------------------------------------

SYNTH = SynthConfig(min_turns=6, max_turns=16)


@pytest.fixture(scope="module")
def encoder_run():
    g = RngState(2024).generator()
    train = generate_synthetic(SynthConfig(**{**SYNTH.__dict__, "n_dialogues": 500}), g, "train")
    val = generate_synthetic(SynthConfig(**{**SYNTH.__dict__, "n_dialogues": 100}), g, "val")
    test = generate_synthetic(SynthConfig(**{**SYNTH.__dict__, "n_dialogues": 200}), g, "test")
    vocab = build_vocab(train)
    train, val, test = ([d.with_ids(vocab) for d in s] for s in (train, val, test))
    ecfg = EncoderConfig(vocab_size=len(vocab), d=32, layers=2)
    cfg = TrainConfig(stage="encoder", lr=3e-3, epochs=15, seed=0)
    at_epoch5 = {}
    ids = [[list(u.token_ids) for u in d.turns] for d in train]
    enc = ContextEncoder(ecfg, RngState(cfg.seed))

    def on_epoch(rec):
        if rec["epoch"] == 5:
            # dropout-free training loss with the parameters reached after 5 epochs
            total = sum(encoder_dialogue_loss(enc, x, None)[1]["total"] for x in ids)
            at_epoch5["eval_total"] = total / sum(len(x) - 1 for x in ids)
            at_epoch5["seconds"] = time.perf_counter() - start

    start = time.perf_counter()
    res = train_encoder(train, val, vocab, ecfg, cfg, on_epoch, encoder=enc)
    return {"res": res, "vocab": vocab, "train": train, "val": val, "test": test,
            "epoch5": at_epoch5, "seconds": time.perf_counter() - start}


def test_criterion_04_training_sanity(encoder_run):
    h = encoder_run["res"].history
    init = h["initial"]["train"]["total"]
    e5 = encoder_run["epoch5"]["eval_total"]
    running5 = h["epochs"][4]["train"]["total"]
    secs = encoder_run["epoch5"]["seconds"]
    ratio = e5 / init
    ok = ratio < 0.6 and secs < 600
    record(4, ok, f"L_enc per turn {init:.2f} -> {e5:.2f} after 5 epochs (ratio {ratio:.3f}, "
                  f"running-average ratio {running5 / init:.3f}; {secs:.0f} s)")
    assert ok


def _untrained_baseline(test, vocab, sel, n_inits=24):
    hits, mrrs = [], []
    for s in range(n_inits):
        enc = ContextEncoder(EncoderConfig(vocab_size=len(vocab), d=32, layers=2), RngState(10_000 + s))
        r = model_relevance_recovery(enc, test, sel)
        hits.append(r["hit_rate"])
        mrrs.append(r["mrr"])
    return float(np.mean(hits)), float(np.mean(mrrs)), float(np.std(hits) / math.sqrt(n_inits))


def test_criterion_05_relevance_recovery(encoder_run):
    sel = SelectionConfig(k=2, m_last=2)
    test, vocab = encoder_run["test"], encoder_run["vocab"]
    trained = model_relevance_recovery(encoder_run["res"].model, test, sel)
    base_hit, base_mrr, se = _untrained_baseline(test, vocab, sel)
    comb = combinatorial_hit_rate([d.annotation.probe_turn for d in test], sel)
    near = abs(base_hit - comb) <= max(0.1, 3 * se)
    ok = trained["hit_rate"] >= 0.70 and trained["mrr"] > base_mrr and near
    record(5, ok, f"held-out hit@2 {trained['hit_rate']:.3f} MRR {trained['mrr']:.3f} | untrained "
                  f"Monte-Carlo baseline hit@2 {base_hit:.3f} (+-{se:.3f}) MRR {base_mrr:.3f} | "
                  f"combinatorial {comb:.3f} | n={trained['n']}")
    assert ok


def test_criterion_06_compactness(encoder_run):
    sel = SelectionConfig(k=2, m_last=2, N=64)
    vocab = encoder_run["vocab"]
    long = generate_synthetic(SynthConfig(n_dialogues=60, min_turns=16, max_turns=16),
                              RngState(606), "long")
    long = [d.with_ids(vocab) for d in long]
    rep = model_context_budget(encoder_run["res"].model, long, sel)
    ok = rep["max"] <= 261 and rep["bound"] == 261 and rep["mean"] < rep["full_mean"]
    record(6, ok, f"composed rows mean {rep['mean']:.1f} max {rep['max']} (bound 261) vs full "
                  f"concatenation mean {rep['full_mean']:.1f} max {rep['full_max']} over {rep['count']} turns")
    assert ok


# -- criterion 7 ------------------------------------------------------------------------

def test_criterion_07_metric_oracles():
    golden = json.loads((Path(__file__).parent / "fixtures" / "metrics_golden.json").read_text())
    cands = [g["candidate"] for g in golden["groups"]]
    refs = [g["references"] for g in golden["groups"]]
    got = generation_metrics(cands, refs)
    oracle = metric_oracle.all_metrics([c.split() for c in cands], [[r.split() for r in rs] for rs in refs])
    dev = max(max(abs(got[k] - v), abs(oracle[k] - v)) for k, v in golden["expected"].items())
    multi = sum(len(r) > 1 for r in refs)
    ok = dev <= 1e-9 and len(cands) == 5 and multi >= 1
    record(7, ok, f"{len(golden['expected'])} metrics on 5 groups ({multi} multi-reference), "
                  f"max deviation {dev:.1e}")
    assert ok


# -- criterion 8 ------------------------------------------------------------------------

END = 4
# next-token log-probabilities of a hand-built 5-token model: rows are indexed by the
# previous token (start = row 0). The greedy path 1 -> 1 -> ... is a trap: token 2
# starts worse but leads to a near-certain end.
_HAND = np.log(np.array([
    [0.05, 0.50, 0.35, 0.05, 0.05],   # start / after token 0
    [0.05, 0.40, 0.05, 0.25, 0.25],   # after 1
    [0.01, 0.01, 0.01, 0.01, 0.96],   # after 2
    [0.30, 0.20, 0.20, 0.10, 0.20],   # after 3
    [0.20, 0.20, 0.20, 0.20, 0.20],   # after the end token (never used)
]))


def hand_model(prefix):
    return _HAND[prefix[-1] if prefix else 0]


def exhaustive_best(fn, gen, V=5):
    best = None
    for L in range(1, gen.max_len + 1):
        for seq in itertools.product(range(V), repeat=L):
            if END in seq[:-1] or (seq[-1] == END and L < gen.min_len):
                continue
            if seq[-1] != END and L < gen.max_len:
                continue
            lp = sum(fn(seq[:i])[seq[i]] for i in range(L))
            key = (-(lp / L ** gen.length_penalty), seq)
            best = key if best is None or key < best else best
    return list(best[1])


def test_criterion_08_beam_oracle():
    cases = []
    for min_len in (1, 2, 3):
        for lp in (0.0, 0.1, 1.0):
            gen = GenerationParams(beam_width=25, max_len=4, min_len=min_len, length_penalty=lp)
            got = beam_search(hand_model, END, gen)
            want = exhaustive_best(hand_model, gen)
            masked = END not in got[:min_len - 1] and (got[-1] != END or len(got) >= min_len)
            cases.append((min_len, lp, got, want, masked))
    greedy = beam_search(hand_model, END, GenerationParams(beam_width=1, max_len=4, min_len=1))
    ok = all(g == w and m for _, _, g, w, m in cases)
    record(8, ok, f"{sum(g == w for _, _, g, w, _ in cases)}/{len(cases)} (min_len x penalty) cases "
                  f"equal exhaustive search; min_len masking holds; e.g. min_len=1 -> {cases[0][2]} "
                  f"(greedy width 1 -> {greedy})")
    assert ok, cases


# -- criterion 9 ------------------------------------------------------------------------

def test_criterion_09_determinism_and_persistence():
    corpus = generate_synthetic(SynthConfig(n_dialogues=16, max_turns=8), RngState(9))
    vocab = build_vocab(corpus)
    corpus = [d.with_ids(vocab) for d in corpus]
    tr, va = corpus[:12], corpus[12:]
    ecfg = EncoderConfig(vocab_size=len(vocab), d=8, layers=2)
    cfg = TrainConfig(stage="encoder", lr=1e-3, epochs=2, seed=4)
    a = train_encoder(tr, va, vocab, ecfg, cfg).checkpoint
    b = train_encoder(tr, va, vocab, ecfg, cfg).checkpoint
    dcfg = DecoderConfig(vocab_size=len(vocab), d_enc=8, d_model=8, layers=1, heads=2)
    dtc = TrainConfig(stage="decoder", lr=1e-3, epochs=1, seed=4)
    sel = SelectionConfig(N=16)
    da = train_decoder(tr, va, vocab, a, dcfg, sel, dtc).checkpoint
    db = train_decoder(tr, va, vocab, b, dcfg, sel, dtc).checkpoint
    same = to_bytes(a) == to_bytes(b) and to_bytes(da) == to_bytes(db)
    raw = to_bytes(da)
    round_trip = to_bytes(from_bytes(raw)) == raw
    rejected = 0
    corruptions = [raw[:-1], raw[:len(raw) // 2], raw[:100] + bytes([raw[100] ^ 1]) + raw[101:],
                   b"XXXX" + raw[4:]]
    for bad in corruptions:
        try:
            from_bytes(bad)
        except CheckpointError:
            rejected += 1
    ok = same and round_trip and rejected == len(corruptions)
    record(9, ok, f"repeat runs bitwise identical: {same}; round trip bitwise: {round_trip}; "
                  f"corrupted rejected {rejected}/{len(corruptions)}")
    assert ok


# -- criterion 10 -----------------------------------------------------------------------

def test_criterion_10_loss_structure(encoder_run):
    h = encoder_run["res"].history
    tr, va, vocab = encoder_run["train"][:24], encoder_run["val"][:8], encoder_run["vocab"]
    dcfg = DecoderConfig(vocab_size=len(vocab), d_enc=32, d_model=16, layers=1, heads=2)
    dh = train_decoder(tr, va, vocab, encoder_run["res"].checkpoint, dcfg, SelectionConfig(),
                       TrainConfig(stage="decoder", lr=1e-3, epochs=2)).history

    def rel(a, b):
        return abs(a - b) / max(abs(a), 1e-300)

    enc_rows = h["steps"] + [e["train"] for e in h["epochs"]] + [e["val"] for e in h["epochs"]]
    dec_rows = dh["steps"] + [e["train"] for e in dh["epochs"]] + [e["val"] for e in dh["epochs"]]
    enc_err = max(rel(r["total"], r["l1"] + r["bow"]) for r in enc_rows)
    dec_err = max(rel(r["total"], r["lm"] + 0.5 * r["bow"]) for r in dec_rows)
    cols = h["columns"] == ["total", "bow", "l1"] and dh["columns"] == ["total", "lm", "bow"]
    ok = cols and enc_err <= 1e-12 and dec_err <= 1e-12
    record(10, ok, f"columns {h['columns']} / {dh['columns']}; max relative identity error "
                   f"encoder {enc_err:.1e} ({len(enc_rows)} rows), decoder {dec_err:.1e} ({len(dec_rows)} rows)")
    assert ok
