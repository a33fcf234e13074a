"""Corpus-level generation metrics, context-budget accounting and relevance recovery."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .composer import SelectionConfig, select_relevant

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _split(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _prepare(candidates, reference_sets):
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(reference_sets):
        raise ValueError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    cands = [_split(c) for c in candidates]
    refs = []
    for rs in reference_sets:
        rs = [rs] if isinstance(rs, str) else list(rs)
        if not rs:
            raise ValueError("every candidate needs at least one reference")
        refs.append([_split(r) for r in rs])
    return cands, refs


def _closest_ref_len(c_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c_len), r))


def bleu(candidates, reference_sets, n: int = 4) -> float:
    """Corpus BLEU-n in percent.

    Geometric mean of clipped n-gram precisions of orders 1..n (each n-gram
    count clipped by its maximum count in any single reference), times the
    brevity penalty exp(1 - r/c) when the candidate corpus is shorter than
    the closest-length references. No smoothing.
    """
    cands, refs = _prepare(candidates, reference_sets)
    matches = [0] * n
    totals = [0] * n
    c_len = r_len = 0
    for cand, rs in zip(cands, refs):
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(r) for r in rs])
        for k in range(1, n + 1):
            cc = ngrams(cand, k)
            best: Counter = Counter()
            for r in rs:
                best |= ngrams(r, k)
            matches[k - 1] += sum(min(c, best[g]) for g, c in cc.items())
            totals[k - 1] += sum(cc.values())
    if c_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


_NIST_BETA = math.log(0.5) / math.log(1.5) ** 2  # negative: factor 0.5 at ratio 2/3


def nist(candidates, reference_sets, n: int = 4) -> float:
    """Corpus NIST-n.

    Information weight of an n-gram w_1..w_k is log2(count(w_1..w_{k-1}) /
    count(w_1..w_k)) over all reference n-grams (the empty prefix counts
    every reference word). Matched candidate n-grams (clipped by the
    maximum count in any reference) contribute their weight, divided by the
    number of candidate n-grams of that order. The brevity factor is
    exp(beta * log(min(1, L_sys / L_ref))**2), L_ref being the mean reference
    length, with beta chosen so the factor is 0.5 at a ratio of 2/3.
    """
    cands, refs = _prepare(candidates, reference_sets)
    counts: list[Counter] = [Counter() for _ in range(n + 1)]
    for rs in refs:
        for r in rs:
            for k in range(1, n + 1):
                counts[k].update(ngrams(r, k))
            counts[0][()] += len(r)

    def info(g: tuple) -> float:
        return math.log2(counts[len(g) - 1][g[:-1]] / counts[len(g)][g])

    score = 0.0
    sys_len = ref_len = 0.0
    for k in range(1, n + 1):
        gained = 0.0
        total = 0
        for cand, rs in zip(cands, refs):
            cc = ngrams(cand, k)
            best: Counter = Counter()
            for r in rs:
                best |= ngrams(r, k)
            for g, c in cc.items():
                hits = min(c, best[g])
                if hits:
                    gained += hits * info(g)
            total += sum(cc.values())
        if total:
            score += gained / total
    for cand, rs in zip(cands, refs):
        sys_len += len(cand)
        ref_len += sum(len(r) for r in rs) / len(rs)
    ratio = min(1.0, sys_len / ref_len) if ref_len else 1.0
    if ratio <= 0:
        return 0.0
    return score * math.exp(_NIST_BETA * math.log(ratio) ** 2)


def distinct(candidates, n: int = 1) -> float:
    """Unique n-grams over total n-grams across the corpus (0 when there are none)."""
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    total: Counter = Counter()
    for c in candidates:
        total.update(ngrams(_split(c), n))
    count = sum(total.values())
    return len(total) / count if count else 0.0


def entropy_metric(candidates, n: int = 4) -> float:
    """Shannon entropy (nats) of the corpus n-gram frequency distribution."""
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    total: Counter = Counter()
    for c in candidates:
        total.update(ngrams(_split(c), n))
    F = sum(total.values())
    if F == 0:
        raise ValueError(f"corpus has no {n}-grams")
    return -sum((f / F) * math.log(f / F) for f in total.values())


def generation_metrics(candidates, reference_sets) -> dict:
    out = {f"bleu_{k}": bleu(candidates, reference_sets, k) for k in range(1, 5)}
    out["nist_2"] = nist(candidates, reference_sets, 2)
    out["nist_4"] = nist(candidates, reference_sets, 4)
    out["distinct_1"] = distinct(candidates, 1)
    out["distinct_2"] = distinct(candidates, 2)
    try:
        out["entropy_4"] = entropy_metric(candidates, 4)
    except ValueError:
        out["entropy_4"] = 0.0
    return out


# -- context budget and relevance recovery ----------------------------------------

@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    context_budget: dict = field(default_factory=dict)
    relevance: dict = field(default_factory=dict)
    samples: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _quartiles(x: np.ndarray) -> list[float]:
    return [float(q) for q in np.percentile(x, [25, 50, 75])]


def context_budget_report(alphas_per_dialogue, turn_ids_per_dialogue,
                          sel: SelectionConfig) -> dict:
    """Token counts of composed contexts versus full-history concatenation.

    ``alphas_per_dialogue[j][t-1]`` is the relevance vector at turn t of
    dialogue j. A composed context has Z + tokens + separators rows.
    """
    composed, full = [], []
    bound = sel.row_bound()
    for alphas, ids in zip(alphas_per_dialogue, turn_ids_per_dialogue):
        for t, alpha in enumerate(alphas, 1):
            R = select_relevant(alpha, sel)
            rows = 1 + sum(min(len(ids[i - 1]), sel.N) + 1 for i in R)
            if rows > bound:
                raise AssertionError(f"context of {rows} rows exceeds bound {bound}")
            composed.append(rows)
            full.append(1 + sum(len(ids[i]) + 1 for i in range(t)))
    composed = np.asarray(composed, dtype=float)
    full = np.asarray(full, dtype=float)
    if composed.size == 0:
        return {"count": 0}
    return {"count": int(composed.size), "bound": bound,
            "mean": float(composed.mean()), "max": int(composed.max()),
            "quartiles": _quartiles(composed),
            "full_mean": float(full.mean()), "full_max": int(full.max()),
            "full_quartiles": _quartiles(full),
            "counts": composed.astype(int).tolist()}


def relevance_recovery(alphas_at_probe: Sequence[Sequence[float]], antecedents: Sequence[int],
                       sel: SelectionConfig) -> dict:
    """hit@k (antecedent kept by the selection rule) and MRR of the antecedent's alpha rank.

    Rank ties count against the antecedent (pessimistic rank).
    """
    if len(alphas_at_probe) == 0:
        raise ValueError("no annotated probes")
    hits, rr = [], []
    for alpha, a in zip(alphas_at_probe, antecedents):
        if a is None:
            raise ValueError("missing planted-dependency annotation")
        alpha = np.asarray(alpha, dtype=float)
        hits.append(a in select_relevant(alpha, sel))
        rank = int(np.sum(alpha >= alpha[a - 1]))
        rr.append(1.0 / rank)
    return {"hit_rate": float(np.mean(hits)), "mrr": float(np.mean(rr)), "n": len(hits),
            "k": sel.k, "m_last": sel.m_last}


def combinatorial_hit_rate(probe_turns: Sequence[int], sel: SelectionConfig) -> float:
    """Hit rate of a selector that picks the k pool slots uniformly at random."""
    rates = []
    for t in probe_turns:
        pool = t - sel.m_last
        rates.append(1.0 if t <= sel.c_max else min(1.0, sel.k / pool))
    return float(np.mean(rates))
