from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    """Token/id bijection with ids 0-3 reserved for PAD, BOS, EOS and UNK."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int] | None = None):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
            if freqs is not None:
                raise ValueError("frequencies given without the reserved tokens in front")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.freqs = list(freqs) if freqs is not None else [0] * len(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str] | str], min_freq: int = 1) -> "Vocabulary":
        """Corpus tokens ordered by decreasing frequency, ties alphabetically."""
        counts: Counter[str] = Counter()
        for s in sentences:
            counts.update(s.split() if isinstance(s, str) else s)
        for sp in SPECIALS:
            counts.pop(sp, None)
        ordered = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(list(SPECIALS) + ordered, [0] * len(SPECIALS) + [counts[t] for t in ordered])

    def encode(self, tokens: Sequence[str] | str) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i == EOS:
                break
            if strip_specials and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        lines = [f"{t} {f}\n" for t, f in zip(self.itos, self.freqs)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freqs = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, f = line.rpartition(" ")
            if not tok:
                raise ValueError(f"{path}:{lineno}: expected 'token frequency', got {line!r}")
            tokens.append(tok)
            freqs.append(int(f))
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(tokens, freqs)

    def to_list(self) -> list[str]:
        return list(self.itos)
