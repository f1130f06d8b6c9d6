"""Per-sentence alignment matrices and their TSV / graymap dumps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data.batching import collate
from .data.vocab import SPECIALS, EOS
from .model import PervasiveNetwork, extract_alignment

ALIGN_MODES = ("max", "attn")


def check_mode(net: PervasiveNetwork, mode: str) -> None:
    cfg = net.config
    if mode not in ALIGN_MODES:
        raise ValueError(f"alignment mode must be one of {ALIGN_MODES}, got {mode!r}")
    if mode == "max" and not cfg.uses_max:
        raise ValueError(f"mode 'max' needs max aggregation, checkpoint uses {cfg.aggregation!r}")
    if mode == "attn" and not cfg.uses_attn:
        raise ValueError(f"mode 'attn' needs attention aggregation, checkpoint uses {cfg.aggregation!r}")


def _ordered_batches(pairs, batch_tokens: int):
    chunk: list = []
    tmax = 0
    for s, t in pairs:
        tl = len(t) + 1
        if chunk and max(tmax, tl) * (len(chunk) + 1) > batch_tokens:
            yield collate(chunk)
            chunk, tmax = [], 0
        chunk.append((s, t))
        tmax = max(tmax, tl)
    if chunk:
        yield collate(chunk)


def alignment_matrices(net: PervasiveNetwork, pairs: Sequence[tuple[list[int], list[int]]],
                       mode: str = "max", batch_tokens: int = 4000) -> list[np.ndarray]:
    """One ``[len(tgt) + 1, len(src)]`` matrix per pair, in input order.

    Rows are the target positions with the final EOS row; ``max`` yields the
    implicit energy alignment of the reference token, ``attn`` the attention
    weights.
    """
    check_mode(net, mode)
    was_training = net.training
    net.eval()
    out: list[np.ndarray] = []
    try:
        for b in _ordered_batches(pairs, batch_tokens):
            _, act = net(b.src, b.tgt_in, b.src_mask, b.tgt_mask)
            if mode == "max":
                mat = extract_alignment(net, act, b.tgt_out)
            else:
                mat = act.rho.data.astype(np.float64)
            out.extend(mat[r, : b.tgt_len[r], : b.src_len[r]].copy() for r in range(len(b)))
    finally:
        net.train(was_training)
    return out


def format_tsv(matrix: np.ndarray, src_tokens: Sequence[str], tgt_tokens: Sequence[str],
               mask: np.ndarray | None = None) -> str:
    """Source tokens as header, one row per target token; masked cells print ``.``."""
    T, S = matrix.shape
    if len(src_tokens) != S or len(tgt_tokens) != T:
        raise ValueError(f"matrix {matrix.shape} vs {len(tgt_tokens)} target / {len(src_tokens)} source labels")
    lines = ["\t".join([""] + list(src_tokens))]
    for i in range(T):
        cells = [("." if mask is not None and not mask[i, j] else f"{matrix[i, j]:.6g}") for j in range(S)]
        lines.append("\t".join([tgt_tokens[i]] + cells))
    return "\n".join(lines) + "\n"


def graymap_bytes(matrix: np.ndarray, cell: int = 8) -> bytes:
    """Binary PGM with brighter cells for larger (non-negative) values."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, None)
    top = m.max()
    img = np.zeros_like(m) if top <= 0 else m / top
    img = np.round(img * 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def align_dump(net: PervasiveNetwork, pairs_tokens: Sequence[tuple[list[str], list[str]]],
               src_vocab, tgt_vocab, out_dir, mode: str = "max", pgm: bool = False) -> list[Path]:
    """Write ``<out_dir>/<index>.tsv`` (and ``.pgm``) for every tokenized pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs_tokens]
    mats = alignment_matrices(net, ids, mode)
    written = []
    width = max(4, len(str(len(ids))))
    for k, ((s, t), mat) in enumerate(zip(pairs_tokens, mats)):
        path = out_dir / f"{k:0{width}d}.tsv"
        path.write_text(format_tsv(mat, list(s), list(t) + [SPECIALS[EOS]]), encoding="utf-8")
        written.append(path)
        if pgm:
            (out_dir / f"{k:0{width}d}.pgm").write_bytes(graymap_bytes(mat))
    return written
