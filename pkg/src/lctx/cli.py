"""Command line: synth, train-encoder, train-decoder, generate, evaluate, inspect, chat.

Configuration precedence: command-line flags > --config JSON file > built-in defaults.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .composer import SelectionConfig, select_relevant
from .decoder import DecoderConfig, GenerationParams
from .encoder import ContextEncoder, EncoderConfig
from .evaluation import decode_response, evaluate_models, generate_responses
from .metrics import generation_metrics
from .tensor import RngState, Tensor
from .text import (CorpusError, SynthConfig, Vocab, build_vocab, encode_text, generate_synthetic,
                   load_corpus, normalize_output, save_corpus)
from .training import (TrainConfig, decoder_from_checkpoint, encode_frozen,
                       encoder_from_checkpoint, train_decoder, train_encoder)

log = logging.getLogger("lctx")


class ConfigError(ValueError):
    pass


def _fields(cls, drop=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    synth = _fields(SynthConfig, drop=("n_dialogues",))
    synth.update(n_train=500, n_val=100, n_test=200)
    tr_enc = TrainConfig.for_stage("encoder").to_dict()
    tr_dec = TrainConfig.for_stage("decoder").to_dict()
    for t in (tr_enc, tr_dec):
        t.pop("stage")
        t.pop("seed")
    enc = _fields(EncoderConfig, drop=("vocab_size",))
    enc["d_att"] = None
    return {
        "seed": 0,
        "synth": synth,
        "encoder": enc,
        "decoder": _fields(DecoderConfig, drop=("vocab_size", "d_enc")),
        "selection": asdict(SelectionConfig()),
        "train_encoder": tr_enc,
        "train_decoder": tr_dec,
        "generation": _fields(GenerationParams, drop=("seed",)),
    }


def _merge(base: dict, over: dict, path: str = "") -> None:
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{where}' must be a table")
            _merge(base[k], v, where + ".")
        else:
            if isinstance(v, dict):
                raise ConfigError(f"config key '{where}' must be a scalar")
            base[k] = v


# flag name -> config key path
FLAG_KEYS = {
    "seed": "seed",
    "beam_width": "generation.beam_width", "min_len": "generation.min_len",
    "max_len": "generation.max_len", "length_penalty": "generation.length_penalty",
    "k": "selection.k", "m_last": "selection.m_last", "N": "selection.N",
    "lam": "decoder.lam", "epochs": None, "lr": None,
}


def _key_paths(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _key_paths(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}"


def _set_path(cfg: dict, path: str, value) -> None:
    node = cfg
    keys = path.split(".")
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key '{path}'")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key '{path}'")
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    """Merge defaults, the --config file and flags; records explicit key paths on ``args``."""
    cfg = default_config()
    explicit = set()
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, data)
        explicit |= set(_key_paths(data))
    stage = {"train-encoder": "train_encoder", "train-decoder": "train_decoder"}.get(args.command)
    for flag, path in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if path is None:
            if stage is None:
                continue
            path = f"{stage}.{flag}"
        _set_path(cfg, path, value)
        explicit.add(path)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, path, value)
        explicit.add(path)
    args.explicit_keys = explicit
    return cfg


def _build(cls, section: str, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' config: {exc}") from exc


def _gen(cfg) -> GenerationParams:
    return _build(GenerationParams, "generation", cfg["generation"], seed=cfg["seed"])


def _sel(cfg) -> SelectionConfig:
    return _build(SelectionConfig, "selection", cfg["selection"])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fp(x: int) -> str:
    return f"{x:016x}"


# -- data helpers -----------------------------------------------------------------------

def _data_paths(args):
    data = Path(args.data) if getattr(args, "data", None) else None
    vocab = Path(args.vocab) if getattr(args, "vocab", None) else (data / "vocab.txt" if data else None)
    if vocab is None:
        raise ConfigError("need --vocab or --data")
    return data, vocab


def _load_split(data: Path | None, explicit, name: str, vocab: Vocab):
    path = Path(explicit) if explicit else (data / f"{name}.jsonl" if data else None)
    if path is None:
        raise ConfigError(f"need --{name} or --data")
    return [d.with_ids(vocab) for d in load_corpus(path)]


def _models(args, vocab: Vocab, need_decoder: bool):
    enc_ck = load_checkpoint(args.encoder, expected_fingerprint=vocab.fingerprint, stage="encoder")
    enc = encoder_from_checkpoint(enc_ck)
    dec = sel = None
    if getattr(args, "decoder", None):
        dec_ck = load_checkpoint(args.decoder, expected_fingerprint=vocab.fingerprint, stage="decoder")
        dec, sel = decoder_from_checkpoint(dec_ck)
    elif need_decoder:
        raise ConfigError("this command needs --decoder")
    return enc, dec, sel, enc_ck


def _selection(args, cfg, ckpt_sel):
    """Checkpoint selection settings unless overridden by a flag or config file."""
    if ckpt_sel is None or any(p.startswith("selection.") for p in args.explicit_keys):
        return _sel(cfg)
    return ckpt_sel


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = dict(cfg["synth"])
    sizes = {"train": s.pop("n_train"), "val": s.pop("n_val"), "test": s.pop("n_test")}
    g = RngState(cfg["seed"]).generator()
    splits = {}
    for name, n in sizes.items():
        if n < 1:
            raise ConfigError(f"invalid 'synth.n_{name}': must be positive")
        sc = _build(SynthConfig, "synth", s, n_dialogues=n)
        splits[name] = generate_synthetic(sc, g, id_prefix=name)
    for name, corpus in splits.items():
        save_corpus(corpus, out / f"{name}.jsonl")
    vocab = build_vocab(splits["train"])
    vocab.save(out / "vocab.txt")
    _write_json(out / "synth.json", {"config": cfg, "vocab_fingerprint": _fp(vocab.fingerprint),
                                     "sizes": sizes, "vocab_size": len(vocab)})
    print(f"wrote {sum(sizes.values())} dialogues and a {len(vocab)}-token vocabulary to {out}")
    return 0


def _epoch_printer(columns):
    def show(rec):
        tr = " ".join(f"{c}={rec['train'][c]:.4f}" for c in columns)
        va = " ".join(f"{c}={rec['val'][c]:.4f}" for c in columns) if rec["val"] else "-"
        print(f"epoch {rec['epoch']:3d} | train {tr} | val {va}", flush=True)
    return show


def _training_log(stage, history, cfg, vocab, extra=None) -> dict:
    log_ = {"stage": stage, "columns": history["columns"], "initial": history["initial"],
            "epochs": history["epochs"], "steps": history["steps"],
            "best_epoch": history["best_epoch"], "best_val": history["best_val"],
            "config": cfg, "vocab_fingerprint": _fp(vocab.fingerprint)}
    log_.update(extra or {})
    return log_


def cmd_train_encoder(args, cfg) -> int:
    data, vocab_path = _data_paths(args)
    vocab = Vocab.load(vocab_path)
    train = _load_split(data, args.train, "train", vocab)
    val = _load_split(data, args.val, "val", vocab)
    enc_cfg = _build(EncoderConfig, "encoder", cfg["encoder"], vocab_size=len(vocab))
    tcfg = _build(TrainConfig, "train_encoder", cfg["train_encoder"], stage="encoder", seed=cfg["seed"])
    res = train_encoder(train, val, vocab, enc_cfg, tcfg, _epoch_printer(("total", "bow", "l1")))
    res.checkpoint.config["run"] = cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "encoder.ckpt")
    _write_json(out / "encoder_log.json", _training_log("encoder", res.history, cfg, vocab))
    print(f"best epoch {res.history['best_epoch']} (val total {res.history['best_val']:.4f}); "
          f"wrote {out / 'encoder.ckpt'}")
    return 0


def cmd_train_decoder(args, cfg) -> int:
    data, vocab_path = _data_paths(args)
    vocab = Vocab.load(vocab_path)
    train = _load_split(data, args.train, "train", vocab)
    val = _load_split(data, args.val, "val", vocab)
    enc_ck = load_checkpoint(args.encoder, expected_fingerprint=vocab.fingerprint, stage="encoder")
    d_enc = enc_ck.config["encoder"]["d"]
    dec_cfg = _build(DecoderConfig, "decoder", cfg["decoder"], vocab_size=len(vocab), d_enc=d_enc)
    tcfg = _build(TrainConfig, "train_decoder", cfg["train_decoder"], stage="decoder", seed=cfg["seed"])
    res = train_decoder(train, val, vocab, enc_ck, dec_cfg, _sel(cfg), tcfg,
                        _epoch_printer(("total", "lm", "bow")))
    res.checkpoint.config["run"] = cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "decoder.ckpt")
    _write_json(out / "decoder_log.json",
                _training_log("decoder", res.history, cfg, vocab,
                              {"lambda": dec_cfg.lam, "encoder_meta": enc_ck.meta}))
    print(f"best epoch {res.history['best_epoch']} (val total {res.history['best_val']:.4f}); "
          f"wrote {out / 'decoder.ckpt'}")
    return 0


def cmd_generate(args, cfg) -> int:
    data, vocab_path = _data_paths(args)
    vocab = Vocab.load(vocab_path)
    corpus = _load_split(data, args.corpus, "test", vocab)
    enc, dec, ck_sel, _ = _models(args, vocab, need_decoder=True)
    sel, gen = _selection(args, cfg, ck_sel), _gen(cfg)
    rows = generate_responses(enc, dec, corpus, vocab, sel, gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "responses.txt").write_text("".join(r["response"] + "\n" for r in rows))
    _write_json(out / "responses.json",
                {"config": cfg, "selection": sel.to_dict(), "generation": gen.to_dict(),
                 "vocab_fingerprint": _fp(vocab.fingerprint), "responses": rows})
    print(f"wrote {len(rows)} responses to {out}")
    return 0


def _read_lines(path) -> list[str]:
    return [normalize_output(x) for x in Path(path).read_text().splitlines()]


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    if args.candidates:
        # text-only mode: candidate lines against one or more reference files
        cands = _read_lines(args.candidates)
        ref_files = [_read_lines(p) for p in args.references or []]
        if not ref_files:
            raise ConfigError("--candidates needs at least one --references file")
        if any(len(r) != len(cands) for r in ref_files):
            raise ConfigError("candidate and reference files differ in line count")
        report = {"metrics": generation_metrics(cands, [list(rs) for rs in zip(*ref_files)]),
                  "samples": len(cands), "config": cfg}
    else:
        data, vocab_path = _data_paths(args)
        vocab = Vocab.load(vocab_path)
        corpus = _load_split(data, args.corpus, "test", vocab)
        enc, dec, ck_sel, _ = _models(args, vocab, need_decoder=False)
        sel = _selection(args, cfg, ck_sel)
        report = evaluate_models(enc, dec, corpus, vocab, sel, _gen(cfg)).to_dict()
        report["config"] = dict(report["config"], run=cfg)
        report["vocab_fingerprint"] = _fp(vocab.fingerprint)
    _write_json(out / "report.json", report)
    for k, v in report["metrics"].items():
        print(f"{k:>10s}  {v:.4f}")
    if report.get("relevance"):
        r = report["relevance"]
        print(f"relevance hit@{r['k']} {r['hit_rate']:.3f}  mrr {r['mrr']:.3f}  (n={r['n']})")
    if report.get("context_budget", {}).get("count"):
        b = report["context_budget"]
        print(f"context rows mean {b['mean']:.1f} max {b['max']} "
              f"(full history mean {b['full_mean']:.1f} max {b['full_max']})")
    return 0


def round_row(alpha, places: int = 2) -> list[float]:
    """Round a probability row for display so the shown values still sum to 1.

    Largest-remainder rounding: floor every entry, then hand the leftover
    units to the entries with the largest remainders (earlier turn on ties).
    """
    scale = 10 ** places
    a = np.asarray(alpha, dtype=float) * scale
    base = np.floor(a)
    left = int(round(scale - base.sum()))
    order = sorted(range(len(a)), key=lambda i: (-(a[i] - base[i]), i))
    for i in order[:max(left, 0)]:
        base[i] += 1
    return [float(x) / scale for x in base]


def format_relevance_row(t: int, alpha, selected, text: str = "") -> str:
    cells = []
    for i, v in enumerate(round_row(alpha), 1):
        cell = f"{v:.2f}"
        cells.append(f"[{cell}]" if i in selected else f" {cell} ")
    return f"{t:4d} | {' '.join(cells)}" + (f"  | {text}" if text else "")


def cmd_inspect(args, cfg) -> int:
    data, vocab_path = _data_paths(args)
    vocab = Vocab.load(vocab_path)
    corpus = _load_split(data, args.corpus, "test", vocab)
    enc, dec, ck_sel, _ = _models(args, vocab, need_decoder=False)
    sel, gen = _selection(args, cfg, ck_sel), _gen(cfg)
    if args.dialogue is None:
        d = corpus[0]
    else:
        found = [x for x in corpus if x.id == args.dialogue]
        if not found and args.dialogue.isdigit() and int(args.dialogue) < len(corpus):
            found = [corpus[int(args.dialogue)]]
        if not found:
            raise ConfigError(f"dialogue {args.dialogue!r} not found")
        d = found[0]
    print(f"dialogue {d.id}: {len(d)} turns, selection k={sel.k} m_last={sel.m_last}; "
          f"[x] marks turns kept in the decoder context")
    for i, u in enumerate(d.turns, 1):
        print(f"  u{i} {u.speaker}: {u.text}")
    print("turn | relevance over turns 1..t")
    ids = [list(u.token_ids) for u in d.turns]
    for t, rel in enumerate(encode_frozen(enc, ids), 1):
        R = select_relevant(rel.alpha.data, sel)
        text = ""
        if dec is not None:
            out, _ = decode_response(dec, rel, ids[:t], vocab, sel, gen)
            text = normalize_output(vocab.decode(out))
        print(format_relevance_row(t, rel.alpha.data, R, text))
    return 0


def cmd_chat(args, cfg) -> int:
    vocab = Vocab.load(_data_paths(args)[1])
    enc, dec, ck_sel, _ = _models(args, vocab, need_decoder=True)
    sel, gen = _selection(args, cfg, ck_sel), _gen(cfg)
    frozen = ContextEncoder(enc.cfg, params={k: Tensor(v.data) for k, v in enc.params.items()})
    stream_in = args.input or sys.stdin
    state, history = frozen.initial_state(), []

    def consume(ids):
        nonlocal state
        history.append(ids)
        state, rel = frozen.step(state, ids)
        return rel

    print("type an utterance; ':reset' clears the dialogue, ':quit' exits", flush=True)
    for line in stream_in:
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":reset":
            state, history = frozen.initial_state(), []
            print("(dialogue reset)", flush=True)
            continue
        ids = encode_text(line, vocab) or [vocab.unk_id]
        rel = consume(ids)
        out, R = decode_response(dec, rel, history, vocab, sel, gen)
        t = len(history)
        print("turn | relevance over turns 1..t")
        print(format_relevance_row(t, rel.alpha.data, R))
        reply = normalize_output(vocab.decode(out))
        print(f"bot: {reply}", flush=True)
        consume([i for i in out if i != vocab.sep_id] or [vocab.unk_id])
    return 0


COMMANDS = {"synth": cmd_synth, "train-encoder": cmd_train_encoder,
            "train-decoder": cmd_train_decoder, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "inspect": cmd_inspect, "chat": cmd_chat}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lctx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="override any config key, e.g. --set encoder.d=32")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    def data(sp):
        sp.add_argument("--data", help="directory with train/val/test .jsonl and vocab.txt")
        sp.add_argument("--vocab")

    def selection(sp):
        sp.add_argument("--k", type=int)
        sp.add_argument("--m-last", dest="m_last", type=int)
        sp.add_argument("--history-cap", dest="N", type=int, help="tokens kept per selected turn")

    def generation(sp):
        sp.add_argument("--beam-width", type=int)
        sp.add_argument("--min-len", type=int)
        sp.add_argument("--max-len", type=int)
        sp.add_argument("--length-penalty", type=float)

    sp = sub.add_parser("synth", help="write a synthetic planted-entity corpus")
    common(sp)

    for name in ("train-encoder", "train-decoder"):
        sp = sub.add_parser(name, help=f"{name.split('-')[1]} training stage")
        common(sp)
        data(sp)
        sp.add_argument("--train")
        sp.add_argument("--val")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        if name == "train-decoder":
            sp.add_argument("--encoder", required=True)
            sp.add_argument("--lambda", dest="lam", type=float, help="weight of the BoW loss")
            selection(sp)

    sp = sub.add_parser("generate", help="generate the final turn of each dialogue")
    common(sp)
    data(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--decoder", required=True)
    selection(sp)
    generation(sp)

    sp = sub.add_parser("evaluate", help="metrics, context budget and relevance recovery")
    common(sp)
    data(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--encoder")
    sp.add_argument("--decoder")
    sp.add_argument("--candidates", help="text mode: one candidate per line")
    sp.add_argument("--references", action="append", help="text mode: reference file (repeatable)")
    selection(sp)
    generation(sp)

    sp = sub.add_parser("inspect", help="per-turn relevance table for one dialogue")
    common(sp, out=False)
    data(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--dialogue", help="dialogue id or index (default: first)")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--decoder")
    selection(sp)
    generation(sp)

    sp = sub.add_parser("chat", help="interactive diagnostic REPL")
    common(sp, out=False)
    data(sp)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--input", type=argparse.FileType("r"), help="read utterances from a file")
    selection(sp)
    generation(sp)
    return p


def _setup_logging() -> None:
    level = os.environ.get("LCTX_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        raise ConfigError(f"LCTX_LOG must be one of error, info, debug (got {level!r})")
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        if args.command == "evaluate" and not args.candidates and not args.encoder:
            raise ConfigError("evaluate needs --encoder (or --candidates/--references)")
        log.debug("resolved config %s", json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](args, copy.deepcopy(cfg))
    except ConfigError as exc:
        print(f"lctx: config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, CorpusError, OSError, ValueError) as exc:
        print(f"lctx: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
