"""Composed-context size versus full-history concatenation on long synthetic dialogues.

Uses an untrained encoder by default (selection only needs alpha) or a trained
encoder checkpoint with its vocabulary. Prints a text box-plot summary.

    python scripts/context_budget.py --turns 16 --dialogues 100
    python scripts/context_budget.py --encoder runs/m/encoder.ckpt --vocab runs/data/vocab.txt
"""
import argparse

from lctx.checkpoint import load_checkpoint
from lctx.composer import SelectionConfig
from lctx.encoder import ContextEncoder, EncoderConfig
from lctx.evaluation import model_context_budget
from lctx.tensor import RngState
from lctx.text import SynthConfig, Vocab, build_vocab, generate_synthetic
from lctx.training import encoder_from_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--turns", type=int, default=16)
    ap.add_argument("--dialogues", type=int, default=100)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--m-last", type=int, default=2)
    ap.add_argument("--N", type=int, default=64)
    ap.add_argument("--encoder")
    ap.add_argument("--vocab")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = generate_synthetic(SynthConfig(n_dialogues=args.dialogues, min_turns=args.turns,
                                            max_turns=args.turns), RngState(args.seed), "long")
    if args.encoder:
        if not args.vocab:
            ap.error("--encoder needs --vocab")
        vocab = Vocab.load(args.vocab)
        enc = encoder_from_checkpoint(load_checkpoint(args.encoder, expected_fingerprint=vocab.fingerprint))
    else:
        vocab = build_vocab(corpus)
        enc = ContextEncoder(EncoderConfig(vocab_size=len(vocab), d=32, layers=2), RngState(args.seed))
    corpus = [d.with_ids(vocab) for d in corpus]
    sel = SelectionConfig(k=args.k, m_last=args.m_last, N=args.N)
    rep = model_context_budget(enc, corpus, sel)
    print(f"{rep['count']} decoding turns, bound c_max*(N+1)+1 = {rep['bound']} rows")
    print(f"{'':10s} {'mean':>7s} {'q25':>6s} {'q50':>6s} {'q75':>6s} {'max':>5s}")
    for name, pre in (("composed", ""), ("full", "full_")):
        q = rep[pre + "quartiles"]
        print(f"{name:10s} {rep[pre + 'mean']:7.1f} {q[0]:6.1f} {q[1]:6.1f} {q[2]:6.1f} {rep[pre + 'max']:5d}")


if __name__ == "__main__":
    main()
