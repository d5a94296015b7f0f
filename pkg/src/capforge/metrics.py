"""Caption metrics: BLEU-n, ROUGE-L, CIDEr-D, METEOR-lite and SPIDEr.

Captions are compared as word lists (``normalize`` + whitespace split).
METEOR-lite matches exact words and then Porter stems only; there are no
WordNet synonym or paraphrase stages, so its values are not comparable with
the official METEOR.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .tokenizer import normalize

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

_stemmer = PorterStemmer()


@dataclass(frozen=True)
class EvalItem:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("every item needs at least one reference")


def words(text: str) -> tuple[str, ...]:
    return tuple(normalize(text).split())


def make_corpus(pairs: Sequence[tuple[str, Sequence[str]]]) -> list[EvalItem]:
    return [EvalItem(words(c), tuple(words(r) for r in refs)) for c, refs in pairs]


def _require(corpus) -> None:
    if not corpus:
        raise ValueError("empty corpus")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(corpus: Sequence[EvalItem], n: int = 4) -> float:
    """Corpus BLEU-n: clipped precisions, geometric mean, closest-length brevity penalty."""
    _require(corpus)
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for item in corpus:
        c = item.candidate
        cand_len += len(c)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in item.references)[1]
        for k in range(1, n + 1):
            cand = ngrams(c, k)
            best: Counter = Counter()
            for r in item.references:
                best |= ngrams(r, k)
            matched[k - 1] += sum(min(cnt, best[g]) for g, cnt in cand.items())
            total[k - 1] += max(len(c) - k + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(item: EvalItem, beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in item.references:
        lcs = lcs_length(item.candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(item.candidate)
        r = lcs / len(ref)
        best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
    return best


def rouge_l(corpus: Sequence[EvalItem]) -> float:
    _require(corpus)
    return float(np.mean([rouge_l_item(it) for it in corpus]))


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------


def _tfidf(counts: Counter, df: Counter, log_n: float, max_n: int):
    vec = [dict() for _ in range(max_n)]
    norm = [0.0] * max_n
    length = 0
    for g, tf in counts.items():
        k = len(g) - 1
        w = tf * (log_n - math.log(max(1.0, df[g])))
        vec[k][g] = w
        norm[k] += w * w
        if k == 1:
            length += tf  # bigram count, as in the COCO toolkit
    return vec, [math.sqrt(x) for x in norm], length


def cider_items(corpus: Sequence[EvalItem], max_n: int = 4, sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-item CIDEr-D with document frequencies taken from the corpus references."""
    _require(corpus)

    def counts(tokens):
        c: Counter = Counter()
        for k in range(1, max_n + 1):
            c.update(ngrams(tokens, k))
        return c

    ref_counts = [[counts(r) for r in item.references] for item in corpus]
    df: Counter = Counter()
    for refs in ref_counts:
        df.update(set(g for rc in refs for g in rc))
    log_n = math.log(len(corpus))
    scores = []
    for item, refs in zip(corpus, ref_counts):
        vh, nh, lh = _tfidf(counts(item.candidate), df, log_n, max_n)
        acc = np.zeros(max_n)
        for rc in refs:
            vr, nr, lr = _tfidf(rc, df, log_n, max_n)
            penalty = math.exp(-((lh - lr) ** 2) / (2 * sigma**2))
            for k in range(max_n):
                val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    val /= nh[k] * nr[k]
                acc[k] += val * penalty
        scores.append(float(acc.mean() / len(refs) * 10.0))
    return scores


def cider(corpus: Sequence[EvalItem]) -> float:
    return float(np.mean(cider_items(corpus)))


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------


def _align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match stage, then Porter-stem stage over what is left unmatched."""
    pairs: list[tuple[int, int]] = []
    used_c: set[int] = set()
    used_r: set[int] = set()
    for key in (lambda w: w, _stemmer.stem):
        rk = [key(w) for w in ref]
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            kw = key(w)
            for j, r in enumerate(rk):
                if j not in used_r and r == kw:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def _chunks(pairs: list[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_pair(cand: Sequence[str], ref: Sequence[str]) -> float:
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_BETA
    return fmean * (1.0 - penalty)


def meteor_lite(corpus: Sequence[EvalItem]) -> float:
    _require(corpus)
    return float(np.mean([max(meteor_pair(it.candidate, r) for r in it.references) for it in corpus]))


# ---------------------------------------------------------------------------
# SPIDEr and reports
# ---------------------------------------------------------------------------


def spider(cider_score: float, spice_score: float) -> float:
    return (cider_score + spice_score) / 2.0


METRIC_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "cider", "spice", "spider")


def evaluate(corpus: Sequence[EvalItem], spice: float | None = None) -> dict:
    """Corpus-level report with raw scores and x100 presentation values."""
    _require(corpus)
    raw = {f"bleu{n}": bleu(corpus, n) for n in range(1, 5)}
    raw["rouge_l"] = rouge_l(corpus)
    raw["meteor"] = meteor_lite(corpus)
    raw["cider"] = cider(corpus)
    deviations = {"meteor": "meteor_lite: exact + Porter-stem matching only, no WordNet stage; "
                            "not comparable with official METEOR"}
    if spice is None:
        deviations["spice"] = "SPICE not supplied (computed externally); spider omitted"
    else:
        raw["spice"] = spice
        raw["spider"] = spider(raw["cider"], spice)
    return {
        "items": len(corpus),
        "scores": raw,
        "x100": {k: round(v * 100.0, 4) for k, v in raw.items()},
        "deviations": deviations,
    }
