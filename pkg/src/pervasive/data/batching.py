from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import BOS, EOS, PAD


@dataclass(frozen=True)
class Batch:
    """Padded id grids for one training step.

    ``tgt_in`` starts with BOS and ``tgt_out`` ends with EOS, so row ``i`` of
    the grid reads ``tgt_in[:, i]`` and is trained to emit ``tgt_out[:, i]``.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_len.sum())

    @property
    def padding_cells(self) -> int:
        cells = self.tgt_mask[:, :, None] & self.src_mask[:, None, :]
        return int(cells.size - cells.sum())


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    if not pairs:
        raise ValueError("cannot collate an empty list of pairs")
    if any(len(s) == 0 for s, _ in pairs):
        raise ValueError("source sequences must be non-empty")
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        src[b, : len(s)] = s
        tin[b, 0] = BOS
        tin[b, 1 : len(t) + 1] = t
        tout[b, : len(t)] = t
        tout[b, len(t)] = EOS
    src_len = np.array([len(s) for s, _ in pairs], dtype=np.int64)
    tgt_len = np.array([len(t) + 1 for _, t in pairs], dtype=np.int64)
    src_mask = np.arange(S)[None, :] < src_len[:, None]
    tgt_mask = np.arange(T)[None, :] < tgt_len[:, None]
    return Batch(src, tin, tout, src_mask, tgt_mask, src_len, tgt_len)


def filter_pairs(pairs, max_len: int = 80):
    return [(s, t) for s, t in pairs if 0 < len(s) <= max_len and len(t) <= max_len]


def make_batches(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_len: int = 80,
                 batch_tokens: int = 4000, seed: int | None = 0, n_buckets: int = 10) -> list[Batch]:
    """Length-bucketed batches holding at most ``batch_tokens`` padded target tokens.

    Pairs with either side longer than ``max_len`` are dropped. With a seed, pair
    and batch order are shuffled reproducibly; ``seed=None`` keeps corpus order
    (useful for evaluation).
    """
    kept = filter_pairs(pairs, max_len)
    if not kept:
        raise ValueError(f"no pairs left after filtering to max_len={max_len}")
    order = np.arange(len(kept))
    rng = np.random.default_rng(seed) if seed is not None else None
    if rng is not None:
        rng.shuffle(order)
    tlens = np.array([len(kept[i][1]) + 1 for i in order])
    lo, hi = tlens.min(), tlens.max()
    width = max(1, int(np.ceil((hi - lo + 1) / n_buckets)))
    buckets: dict[int, list[int]] = {}
    for i, tl in zip(order, tlens):
        buckets.setdefault(int((tl - lo) // width), []).append(int(i))

    batches: list[Batch] = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=lambda i: (len(kept[i][1]), len(kept[i][0])))
        chunk: list[int] = []
        tmax = 0
        for i in members:
            tl = len(kept[i][1]) + 1
            if chunk and max(tmax, tl) * (len(chunk) + 1) > batch_tokens:
                batches.append(collate([kept[j] for j in chunk]))
                chunk, tmax = [], 0
            chunk.append(i)
            tmax = max(tmax, tl)
        if chunk:
            batches.append(collate([kept[j] for j in chunk]))
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches
