"""Word-level vocabulary with a fixed special-token set.

Vocabulary file format: one token per line, line index = token id.
Reserved tokens always occupy the first ids so template punctuation and
the yes/no verbalizer tokens exist in every vocabulary.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import VocabError

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
MASK = "[MASK]"
RESERVED = (PAD, UNK, CLS, MASK, ":", ",", ".", "yes", "no")


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED)]) != list(RESERVED):
            raise VocabError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise VocabError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @classmethod
    def from_corpus(cls, token_streams: Iterable[Iterable[str]], min_count: int = 1) -> "Vocabulary":
        """Reserved tokens first, then corpus tokens by descending count, ties alphabetical."""
        counts: Counter[str] = Counter()
        for stream in token_streams:
            counts.update(stream)
        for tok in RESERVED:
            counts.pop(tok, None)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = list(RESERVED) + [tok for tok, c in ordered if c >= min_count]
        return cls(tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabError(f"token not in vocabulary: {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabError(f"id out of vocabulary range: {idx}")
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        """Map tokens to ids, unknown words to [UNK]."""
        unk = self._ids[UNK]
        return np.array([self._ids.get(t, unk) for t in tokens], dtype=np.int64)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line != ""])
