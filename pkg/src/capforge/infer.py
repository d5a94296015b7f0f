"""Greedy and beam-search caption generation.

Decoding talks to any object with ``soc_id``, ``eoc_id``, ``start(features)``
and ``step(state, token) -> (logits, new_state)``; ``CaptionModel`` is one,
the stub models in the tests are others. States must not be mutated by
``step`` so that beams can share them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

MAX_GENERATED = 50
MAX_BEAM = 5


class StepModel(Protocol):
    soc_id: int
    eoc_id: int

    def start(self, features): ...

    def step(self, state, token: int) -> tuple[np.ndarray, object]: ...


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


@dataclass(frozen=True)
class BeamHypothesis:
    ids: tuple[int, ...]
    score: float
    finished: bool


def greedy_decode(model: StepModel, features, max_len: int = MAX_GENERATED) -> list[int]:
    """<soc> then argmax tokens (lowest id on ties) until <eoc> or ``max_len`` tokens."""
    ids = [model.soc_id]
    logits, state = model.step(model.start(features), model.soc_id)
    for _ in range(max_len):
        token = int(np.argmax(logits))  # argmax returns the first maximum
        ids.append(token)
        if token == model.eoc_id:
            break
        logits, state = model.step(state, token)
    return ids


def beam_search(
    model: StepModel,
    features,
    width: int = 3,
    max_len: int = MAX_GENERATED,
    length_penalty: float | None = None,
) -> list[BeamHypothesis]:
    """Beam search over cumulative log-probabilities.

    Each step keeps the ``width`` best extensions of the live beams.
    Extensions ending in <eoc>, or reaching ``max_len`` generated tokens, are
    retired to the finished pool. Search stops once the pool holds ``width``
    hypotheses or no live beam remains; at most ``width`` are returned. Ties
    go to the smaller token id, then to the earlier beam. Results are sorted
    best first; with ``length_penalty`` = alpha the ranking uses
    score / length**alpha.
    """
    if not 1 <= width <= MAX_BEAM:
        raise ValueError(f"beam width must be in 1..{MAX_BEAM}, got {width}")
    soc = model.soc_id
    logits, state = model.step(model.start(features), soc)
    live = [((soc,), 0.0, logits, state)]
    finished: list[BeamHypothesis] = []
    while live and len(finished) < width:
        candidates = []
        for b, (ids, score, logits, state) in enumerate(live):
            logp = log_softmax(logits)
            order = np.lexsort((np.arange(len(logp)), -logp))[:width]
            for tok in order:
                candidates.append((score + float(logp[tok]), b, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[2], c[1]))
        next_live = []
        for score, b, tok in candidates[:width]:
            ids, _, _, state = live[b]
            new_ids = ids + (tok,)
            generated = len(new_ids) - 1
            if tok == model.eoc_id or generated >= max_len:
                finished.append(BeamHypothesis(new_ids, score, True))
            else:
                logits, new_state = model.step(state, tok)
                next_live.append((new_ids, score, logits, new_state))
        live = next_live

    def rank(h: BeamHypothesis) -> float:
        if length_penalty is None:
            return h.score
        return h.score / (len(h.ids) - 1) ** length_penalty

    # one step can retire several hypotheses, so the pool may overshoot
    return sorted(finished, key=lambda h: (-rank(h), h.ids))[:width]


def caption(model: StepModel, features, beam: int = 1, max_len: int = MAX_GENERATED) -> tuple[list[int], float]:
    """Best token sequence and its log-probability score."""
    if beam == 1:
        ids = greedy_decode(model, features, max_len)
        return ids, sequence_score(model, features, ids)
    best = beam_search(model, features, beam, max_len)[0]
    return list(best.ids), best.score


def sequence_score(model: StepModel, features, ids) -> float:
    """Sum of per-step log-softmax values of ``ids[1:]`` given the prefix."""
    state = model.start(features)
    total = 0.0
    for prev, nxt in zip(ids[:-1], ids[1:]):
        logits, state = model.step(state, prev)
        total += float(log_softmax(logits)[nxt])
    return total
