"""Byte pair encoding: learn merge operations and segment words with them.

Words are split into characters followed by a separate end-of-word symbol
``</w>``. Segmented output marks every non-final subword of a word with the
``@@`` continuation suffix, so joining is ``text.replace("@@ ", "")``.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"
MARKER = "@@"


def _word_pairs(symbols: Sequence[str]):
    return zip(symbols[:-1], symbols[1:])


def _merge_word(symbols: list[str], left: str, right: str) -> list[str]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    _ranks: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.merges)

    def segment_word(self, word: str) -> list[str]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word) + [EOW]
        while len(symbols) > 1:
            best = min(_word_pairs(symbols), key=lambda p: self._ranks.get(p, len(self._ranks)))
            if best not in self._ranks:
                break
            symbols = _merge_word(symbols, *best)
        if symbols[-1] == EOW:
            symbols = symbols[:-1]
        else:
            symbols[-1] = symbols[-1][: -len(EOW)]
        pieces = [s + MARKER for s in symbols[:-1]] + [symbols[-1]]
        self._cache[word] = pieces
        return pieces

    def apply(self, sentence: str) -> list[str]:
        out: list[str] = []
        for word in sentence.split():
            out.extend(self.segment_word(word))
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def bpe_learn(corpus: Iterable[str], n_merges: int, min_frequency: int = 2) -> BpeModel:
    """Learn up to ``n_merges`` merges from whitespace-tokenized sentences.

    At each step the most frequent adjacent pair is merged; equal counts go to
    the lexicographically smallest ``(left, right)``. Learning stops early once
    no pair reaches ``min_frequency``.
    """
    counts = Counter(w for line in corpus for w in line.split())
    if not counts:
        raise ValueError("cannot learn BPE from an empty corpus")
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    words = [list(w) + [EOW] for w in sorted(counts)]
    freqs = [counts[w] for w in sorted(counts)]
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (symbols, f) in enumerate(zip(words, freqs)):
        for p in _word_pairs(symbols):
            pair_counts[p] += f
            where[p].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    while len(merges) < n_merges and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current != -neg:
            continue  # stale entry; a fresh one was pushed when the count changed
        if current < min_frequency:
            break
        merges.append(pair)
        changed: set[tuple[str, str]] = set()
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, *pair)
            if len(new) == len(old):
                continue
            f = freqs[idx]
            for p in _word_pairs(old):
                pair_counts[p] -= f
                changed.add(p)
            for p in _word_pairs(new):
                pair_counts[p] += f
                where[p].add(idx)
                changed.add(p)
            words[idx] = new
        pair_counts.pop(pair, None)
        for p in changed:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
    return BpeModel(merges)


def bpe_apply(model: BpeModel, sentence: str) -> list[str]:
    return model.apply(sentence)


def join_subwords(tokens: Sequence[str]) -> str:
    """Undo segmentation: glue ``@@``-marked pieces onto their successor."""
    text = " ".join(tokens)
    text = text.replace(MARKER + " ", "")
    if text.endswith(MARKER):
        text = text[: -len(MARKER)]
    return text


def learn_bpe_models(src: Sequence[str], tgt: Sequence[str], n_merges: int, mode: str = "V1",
                     min_frequency: int = 2) -> tuple[BpeModel, BpeModel]:
    """``V1`` learns one model on both sides concatenated; ``V2`` one per side."""
    if mode == "V1":
        joint = bpe_learn(list(src) + list(tgt), n_merges, min_frequency)
        return joint, joint
    if mode == "V2":
        return bpe_learn(src, n_merges, min_frequency), bpe_learn(tgt, n_merges, min_frequency)
    raise ValueError(f"BPE mode must be 'V1' or 'V2', got {mode!r}")
