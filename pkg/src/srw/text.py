"""Whitespace tokenization and vocabulary with fixed sentinel ids."""

from __future__ import annotations

import unicodedata
from collections import Counter
from typing import Iterable, Sequence

PAD, BOQ, EOS, UNK = "<pad>", "<boq>", "<eos>", "<unk>"
PAD_ID, BOQ_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOQ, EOS, UNK)


def _strip_edge_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation at token edges."""
    out = []
    for raw in text.lower().split():
        tok = _strip_edge_punct(raw)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Token <-> id bijection; ids 0-3 are the fixed sentinels."""

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(RESERVED) + list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    def save(self, path) -> None:
        """One non-reserved token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self._tokens[len(RESERVED) :]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Vocabulary over tokens with frequency >= min_count.

    Id order is deterministic: frequency descending, ties broken
    lexicographically.
    """
    counts: Counter[str] = Counter()
    saw_text = False
    for text in corpus:
        saw_text = True
        counts.update(tokenize(text))
    if not saw_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def pad_query(tokens: Sequence[str], to_len: int, vocab: Vocabulary) -> list[int]:
    """<boq>, token ids, <eos>, then <pad> up to exactly to_len."""
    if to_len < len(tokens) + 2:
        raise ValueError(
            f"to_len={to_len} too small for {len(tokens)} tokens plus <boq>/<eos>"
        )
    ids = [BOQ_ID] + vocab.encode(tokens) + [EOS_ID]
    ids.extend([PAD_ID] * (to_len - len(ids)))
    return ids


def padded_length(token_lists: Sequence[Sequence[str]]) -> int:
    """Shared padded length for a group of queries: longest token count + 2."""
    if not token_lists:
        raise ValueError("no queries to pad")
    return max(len(t) for t in token_lists) + 2
