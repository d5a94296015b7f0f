"""Caption normalisation and WordPiece tokenisation."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SOC = "<soc>"
EOC = "<eoc>"
UNK = "[UNK]"
PAD = "[PAD]"
MAX_WORD_CHARS = 100


class VocabularyError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase, drop Unicode punctuation (categories P*), collapse whitespace."""
    kept = "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P"))
    return " ".join(kept.split())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabularyError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        for special in (SOC, EOC, UNK, PAD):
            if special not in index:
                raise VocabularyError(f"vocabulary is missing {special!r}")
        object.__setattr__(self, "index", index)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], add_boundaries: bool = True) -> "Vocabulary":
        """Build a vocabulary, appending <soc>/<eoc> as the last two ids if absent."""
        tokens = list(tokens)
        if add_boundaries:
            tokens += [t for t in (SOC, EOC) if t not in tokens]
        return cls(tuple(tokens))

    @classmethod
    def load(cls, path: str | Path, add_boundaries: bool = True) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens([ln for ln in lines if ln != ""], add_boundaries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def soc_id(self) -> int:
        return self.index[SOC]

    @property
    def eoc_id(self) -> int:
        return self.index[EOC]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first split of one word; UNK if any remainder fails."""
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.index:
                found = vocab.index[piece]
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(found)
        start = end
    return pieces


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """WordPiece ids of normalised ``text`` wrapped in <soc> ... <eoc>."""
    ids = [vocab.soc_id]
    for word in text.split():
        ids.extend(wordpiece(word, vocab))
    ids.append(vocab.eoc_id)
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of ``encode``: drop boundary/pad ids and fuse ## continuations."""
    skip = {vocab.soc_id, vocab.eoc_id, vocab.pad_id}
    words: list[str] = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise VocabularyError(f"token id {i} out of range for vocabulary of {len(vocab)}")
        if i in skip:
            continue
        tok = vocab.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)
