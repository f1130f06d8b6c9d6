"""Synthetic parallel corpora with analytically known alignments."""

from __future__ import annotations

import string

import numpy as np

TASKS = ("copy", "reverse", "grammar")


def token_name(i: int) -> str:
    """``a, b, ..., z, ba, bb, ...`` (base-26 letters)."""
    letters = string.ascii_lowercase
    out = letters[i % 26]
    i //= 26
    while i:
        out = letters[i % 26] + out
        i //= 26
    return out


def grammar_transform(tokens: list[str]) -> list[str]:
    """Upper-case every token, then swap each pair starting at an even position."""
    out = [t.upper() for t in tokens]
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def transform(task: str, tokens: list[str]) -> list[str]:
    if task == "copy":
        return list(tokens)
    if task == "reverse":
        return tokens[::-1]
    if task == "grammar":
        return grammar_transform(tokens)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def synth_generate(task: str, n: int, vocab_size: int, len_range: tuple[int, int] = (3, 12),
                   seed: int = 0) -> list[tuple[str, str]]:
    """``n`` random sentence pairs for ``task`` over ``vocab_size`` token types."""
    lo, hi = len_range
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {len_range}")
    if vocab_size < 1 or n < 0:
        raise ValueError("vocab_size must be >= 1 and n >= 0")
    rng = np.random.default_rng(seed)
    names = [token_name(i) for i in range(vocab_size)]
    pairs = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        src = [names[i] for i in rng.integers(0, vocab_size, length)]
        pairs.append((" ".join(src), " ".join(transform(task, src))))
    return pairs
