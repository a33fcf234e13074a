"""Vocabulary, tokenization, corpus I/O and the synthetic planted-entity corpus."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import RngState

MAX_TOKENS = 64

PAD, UNK, SEP, BOS = "<pad>", "<unk>", "<sep>", "<bos>"
SPECIALS = (PAD, UNK, SEP, BOS)
VOCAB_FORMAT = "lctx-vocab"
VOCAB_VERSION = 1


class CorpusError(ValueError):
    """Malformed corpus file or record."""


# -- normalization -------------------------------------------------------------

_NEG_CLITIC = re.compile(r"(?<=\w)n't\b")
_CLITIC = re.compile(r"(?<=\w)'(s|m|re|ll|ve|d)\b")
# . and , inside numbers ("4.50", "1,000") are kept
_PUNCT = re.compile(r"(?<!\d)[.,]|[.,](?!\d)|[!?;:\"()\[\]{}$]")
_SPACES = re.compile(r"\s+")


def normalize_output(text: str) -> str:
    """Lowercase and space out punctuation and clitics ("It's red." -> "it 's red .")."""
    s = text.lower()
    s = _NEG_CLITIC.sub(" n't", s)
    s = _CLITIC.sub(lambda m: " '" + m.group(1), s)
    s = _PUNCT.sub(lambda m: f" {m.group(0)} ", s)
    return _SPACES.sub(" ", s).strip()


def tokenize(text: str) -> list[str]:
    return normalize_output(text).split()


# -- vocabulary ------------------------------------------------------------------

def _fingerprint(tokens: Sequence[str]) -> int:
    h = hashlib.blake2b("\n".join(tokens).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Vocab:
    itos: tuple[str, ...]
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        stoi = {t: i for i, t in enumerate(self.itos)}
        if len(stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "stoi", stoi)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    sep_id = property(lambda self: 2)
    bos_id = property(lambda self: 3)

    @property
    def fingerprint(self) -> int:
        return _fingerprint(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def encode(self, text: str, cap: int = MAX_TOKENS) -> list[int]:
        return encode_text(text, self, cap)

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        toks = [self.itos[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in SPECIALS]
        return " ".join(toks)

    def save(self, path) -> None:
        header = f"#{VOCAB_FORMAT} v{VOCAB_VERSION} pad=0 unk=1 sep=2 bos=3"
        Path(path).write_text("\n".join((header,) + self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith(f"#{VOCAB_FORMAT} "):
            raise ValueError(f"{path}: missing vocabulary header")
        version = lines[0].split()[1]
        if version != f"v{VOCAB_VERSION}":
            raise ValueError(f"{path}: unsupported vocabulary version {version}")
        return cls(tuple(lines[1:]))


def build_vocab(corpus: Sequence["Dialogue"], min_freq: float = 1) -> Vocab:
    """Specials first, then tokens by descending frequency, ties lexicographic."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for dialogue in corpus:
        for turn in dialogue.turns:
            counts.update(tokenize(turn.text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(SPECIALS + tuple(kept))


def encode_text(text: str, vocab: Vocab, cap: int = MAX_TOKENS) -> list[int]:
    return [vocab.id(t) for t in tokenize(text)[:cap]]


# -- dialogues ----------------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    antecedent_turn: int
    probe_turn: int
    entity: str


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    token_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Utterance, ...]
    annotation: Annotation | None = None

    def __post_init__(self):
        if len(self.turns) < 2:
            raise CorpusError(f"dialogue {self.id!r} has {len(self.turns)} turns, need >= 2")

    def __len__(self) -> int:
        return len(self.turns)

    def turn(self, i: int) -> Utterance:
        """1-based turn access."""
        if not 1 <= i <= len(self.turns):
            raise IndexError(f"turn {i} out of range 1..{len(self.turns)}")
        return self.turns[i - 1]

    def with_ids(self, vocab: Vocab, cap: int = MAX_TOKENS) -> "Dialogue":
        turns = tuple(Utterance(u.speaker, u.text, tuple(encode_text(u.text, vocab, cap)))
                      for u in self.turns)
        return Dialogue(self.id, turns, self.annotation)

    def to_json(self) -> dict:
        rec = {"id": self.id,
               "turns": [{"speaker": u.speaker, "text": u.text} for u in self.turns]}
        if self.annotation is not None:
            a = self.annotation
            rec["annotation"] = {"antecedent_turn": a.antecedent_turn,
                                 "probe_turn": a.probe_turn, "entity": a.entity}
        return rec


def _dialogue_from_record(rec, where: str) -> Dialogue:
    if not isinstance(rec, dict):
        raise CorpusError(f"{where}: expected a JSON object")
    for key in ("id", "turns"):
        if key not in rec:
            raise CorpusError(f"{where}: missing field {key!r}")
    turns = rec["turns"]
    if not isinstance(turns, list):
        raise CorpusError(f"{where}: 'turns' must be a list")
    utts = []
    for j, t in enumerate(turns, 1):
        if not isinstance(t, dict) or not isinstance(t.get("text"), str):
            raise CorpusError(f"{where}: turn {j} needs a string 'text'")
        speaker = t.get("speaker")
        if speaker not in ("A", "B"):
            raise CorpusError(f"{where}: turn {j} speaker must be 'A' or 'B', got {speaker!r}")
        utts.append(Utterance(speaker, t["text"]))
    if len(utts) < 2:
        raise CorpusError(f"{where}: dialogue has {len(utts)} turns, need >= 2")
    ann = rec.get("annotation")
    if ann is not None:
        try:
            ann = Annotation(int(ann["antecedent_turn"]), int(ann["probe_turn"]),
                             str(ann["entity"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}: bad annotation ({exc})") from exc
        if not 1 <= ann.antecedent_turn < ann.probe_turn <= len(utts):
            raise CorpusError(f"{where}: annotation turn indices out of range")
    return Dialogue(str(rec["id"]), tuple(utts), ann)


def load_corpus(path) -> list[Dialogue]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            out.append(_dialogue_from_record(rec, f"{path}:{lineno}"))
    return out


def save_corpus(corpus: Iterable[Dialogue], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# -- synthetic planted-entity corpus -------------------------------------------------

ENTITY_WORDS = (
    "red", "blue", "green", "yellow", "purple", "orange", "silver", "golden",
    "apple", "banana", "cherry", "mango", "lemon", "peach", "grape", "melon",
    "paris", "london", "tokyo", "berlin", "madrid", "rome", "vienna", "oslo",
    "tiger", "zebra", "panda", "eagle", "dolphin", "falcon", "rabbit", "turtle",
    "violin", "guitar", "piano", "trumpet", "drum", "flute", "cello", "harp",
)

ANTECEDENT_TEMPLATES = (
    "i really want the {e} one .",
    "my favourite is definitely {e} .",
    "let us remember {e} for later .",
    "i think {e} would be perfect .",
)

PROBE_TEMPLATES = (
    "so which one did you pick ?",
    "remind me what you chose ?",
    "what was your choice again ?",
)

RESPONSE_TEMPLATES = (
    "i picked {e} of course .",
    "it was {e} .",
    "definitely {e} , as i said .",
)

FILLER_TEMPLATES = (
    "how is the weather {w} ?",
    "the {w} was quite nice today .",
    "did you see the {w} on tv ?",
    "i have to work on the {w} .",
    "that sounds good to me .",
    "we could meet near the {w} .",
    "is the {w} open on sunday ?",
    "yes , the {w} is busy now .",
    "no , i do n't think so .",
    "maybe we should ask about the {w} .",
    "my brother likes the {w} a lot .",
    "ok , see you at the {w} .",
)

FILLER_WORDS = (
    "station", "market", "office", "garden", "museum", "library", "bakery",
    "park", "bridge", "harbor", "theater", "hospital", "school", "airport",
    "river", "stadium", "hotel", "cafe", "beach", "mall",
)


@dataclass
class SynthConfig:
    n_dialogues: int = 100
    min_turns: int = 6
    max_turns: int = 16
    vocab_size: int = 24
    filler_templates: int = len(FILLER_TEMPLATES)

    def validate(self) -> None:
        if not self.max_turns >= self.min_turns >= 4:
            raise ValueError("need max_turns >= min_turns >= 4")
        if self.n_dialogues < 1:
            raise ValueError("n_dialogues must be positive")
        if not 1 <= self.vocab_size:
            raise ValueError("vocab_size must be positive")
        if not 1 <= self.filler_templates <= len(FILLER_TEMPLATES):
            raise ValueError(f"filler_templates must be in 1..{len(FILLER_TEMPLATES)}")


def entity_pool(size: int) -> list[str]:
    words = list(ENTITY_WORDS[:size])
    words += [f"ent{i:03d}" for i in range(size - len(words))]
    return words


def generate_synthetic(cfg: SynthConfig, rng: RngState | np.random.Generator,
                       id_prefix: str = "syn") -> list[Dialogue]:
    """Dialogues with one early entity mention that the final response repeats.

    Layout of a T-turn dialogue: fillers everywhere except the antecedent
    (turn a <= T-4, introduces the entity), the probe (turn T-1, asks for
    it back) and the response (turn T, contains the entity).
    """
    cfg.validate()
    g = rng.generator() if isinstance(rng, RngState) else rng
    entities = entity_pool(cfg.vocab_size)
    fillers = FILLER_TEMPLATES[:cfg.filler_templates]
    out = []
    for n in range(cfg.n_dialogues):
        n_turns = int(g.integers(cfg.min_turns, cfg.max_turns + 1))
        probe = n_turns - 1
        antecedent = int(g.integers(1, probe - 2))
        entity = entities[int(g.integers(len(entities)))]
        texts = []
        for i in range(1, n_turns + 1):
            if i == antecedent:
                tpl = ANTECEDENT_TEMPLATES[int(g.integers(len(ANTECEDENT_TEMPLATES)))]
                texts.append(tpl.format(e=entity))
            elif i == probe:
                texts.append(PROBE_TEMPLATES[int(g.integers(len(PROBE_TEMPLATES)))])
            elif i == n_turns:
                tpl = RESPONSE_TEMPLATES[int(g.integers(len(RESPONSE_TEMPLATES)))]
                texts.append(tpl.format(e=entity))
            else:
                tpl = fillers[int(g.integers(len(fillers)))]
                texts.append(tpl.format(w=FILLER_WORDS[int(g.integers(len(FILLER_WORDS)))]))
        turns = tuple(Utterance("AB"[(i - 1) % 2], t) for i, t in enumerate(texts, 1))
        out.append(Dialogue(f"{id_prefix}-{n:05d}", turns, Annotation(antecedent, probe, entity)))
    return out
