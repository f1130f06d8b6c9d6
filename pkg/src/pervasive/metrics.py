from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def to_record(self) -> str:
        parts = [f"BLEU={self.bleu:.6f}"]
        parts += [f"p{n}={p:.6f}" for n, p in enumerate(self.precisions, 1)]
        parts += [f"BP={self.brevity_penalty:.6f}", f"hyp_len={self.hyp_len}", f"ref_len={self.ref_len}"]
        return " ".join(parts)


def _tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_order: int = 4) -> BleuReport:
    """Corpus BLEU with one reference per hypothesis and no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) == 0.0:
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))


def token_accuracy(logits, targets, pad_mask) -> float:
    """Share of valid positions whose arg-max logit equals the target."""
    logits = getattr(logits, "data", logits)
    mask = np.asarray(pad_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("token accuracy needs at least one valid position")
    pred = np.asarray(logits).argmax(axis=-1)
    return float(((pred == np.asarray(targets)) & mask).sum() / n)
