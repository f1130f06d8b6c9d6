"""Greedy and beam-search decoding with row-incremental grid computation.

In evaluation mode every layer is causal along the target axis and acts on
each cell independently apart from the causal convolution, so a new target
row only needs the last ``kernel_target - 1`` rows of each causal
convolution's input. Those rows are cached per hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data.vocab import BOS, EOS
from .model import PervasiveNetwork, aggregate, output_logits


@dataclass
class DecodeConfig:
    beam: int = 5
    max_len_a: float = 2.0
    max_len_b: int = 10
    lp_alpha: float = 0.6
    cov_beta: float = 0.0
    track_alignment: bool = True

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam must be >= 1, got {self.beam}")
        for name in ("lp_alpha", "cov_beta", "max_len_a"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def max_len(self, src_len: int) -> int:
        return int(self.max_len_a * src_len + self.max_len_b)


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    logp: float = 0.0
    step_logps: list[float] = field(default_factory=list)
    finished: bool = False
    truncated: bool = False
    align_rows: list[np.ndarray] | None = None
    score: float | None = None

    @property
    def output_ids(self) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    def extend(self, token: int, lp: float, align_row: np.ndarray | None) -> "Hypothesis":
        if self.finished:
            raise ValueError("finished hypotheses cannot be extended")
        rows = None
        if self.align_rows is not None and align_row is not None:
            rows = self.align_rows + [align_row]
        return Hypothesis(self.tokens + [token], self.logp + lp, self.step_logps + [lp],
                          token == EOS, False, rows)


class IncrementalState:
    """Per-hypothesis caches for row-by-row decoding of one source sentence."""

    def __init__(self, net: PervasiveNetwork, src_ids, n_hyps: int = 1):
        if net.training:
            raise ValueError("incremental decoding needs the network in evaluation mode")
        self.net = net
        self.src_ids = np.asarray(src_ids, dtype=np.int64).reshape(-1)
        if self.src_ids.size == 0:
            raise ValueError("empty source sentence")
        cfg = net.config
        S = self.src_ids.size
        self.src_embed = net.src_embed(self.src_ids[None]).data[0]
        rows = cfg.kernel_target - 1
        self.caches = [np.zeros((n_hyps, rows, S, 4 * cfg.g), dtype=net.dtype) for _ in net.layers]
        self.steps = 0

    @property
    def n_hyps(self) -> int:
        return self.caches[0].shape[0] if self.caches else 0

    def cache_floats_per_hypothesis(self) -> int:
        return sum(int(np.prod(c.shape[1:])) for c in self.caches)

    def reorder(self, index) -> None:
        index = np.asarray(index, dtype=np.int64)
        self.caches = [c[index] for c in self.caches]


def incremental_forward(net: PervasiveNetwork, state: IncrementalState, prev_tokens) -> tuple[np.ndarray, dict]:
    """Log-probabilities ``[n_hyps, V]`` for the next row given each hypothesis' last token.

    Returns ``(logprobs, info)`` where ``info`` holds the new row's features
    ``H`` ``[n, S, F]`` and, depending on aggregation, ``argmax`` ``[n, F]``
    and ``rho`` ``[n, S]``.
    """
    if net.training:
        raise ValueError("incremental decoding needs the network in evaluation mode")
    prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
    n = prev.size
    cfg = net.config
    S = state.src_ids.size
    if state.net is not net or n != state.n_hyps:
        raise ValueError(f"cache holds {state.n_hyps} hypotheses for another network, got {n} tokens")
    for c in state.caches:
        if c.shape[1:] != (cfg.kernel_target - 1, S, 4 * cfg.g):
            raise ValueError(f"cache shape {c.shape} does not match network config")
    cell_mask = np.ones((n, 1, S), dtype=bool)
    y = net.tgt_embed(prev[:, None])
    x = ag.Tensor(np.broadcast_to(state.src_embed, (n,) + state.src_embed.shape))
    grid = ag.outer_concat(y, x)
    if net.grid_norm is not None:
        grid = net.grid_norm(grid, cell_mask)
    if net.downsample is not None:
        grid = net.downsample(grid)
    feats = [grid]
    new_caches = []
    for layer, cache in zip(net.layers, state.caches):
        inp = feats[0] if len(feats) == 1 else ag.concat(feats, axis=-1)
        a = layer.pre_conv(inp, cell_mask)
        window = np.concatenate([cache, a.data], axis=1)
        out = layer.post_conv(ag.Tensor(window), net.dropout_rng, pad_top=False)
        new_caches.append(window[:, 1:])
        feats.append(out)
    H = ag.concat(feats, axis=-1)
    src_mask = np.ones((n, S), dtype=bool)
    pool, argmax, rho = aggregate(H, src_mask, net)
    logits = output_logits(pool, net)
    lp = ag.log_softmax(logits, axis=-1).data[:, 0, :]
    state.caches = new_caches
    state.steps += 1
    info = {"H": H.data[:, 0]}
    if argmax is not None:
        info["argmax"] = argmax[:, 0]
    if rho is not None:
        info["rho"] = rho.data[:, 0]
    return lp, info


def full_logprobs(net: PervasiveNetwork, src_ids, prefix) -> np.ndarray:
    """Next-token log-probabilities after ``prefix`` by recomputing the whole grid."""
    tin = np.array([[BOS] + list(prefix)], dtype=np.int64)
    logits, _ = net.forward(np.asarray(src_ids, dtype=np.int64)[None], tin)
    return ag.log_softmax(logits, axis=-1).data[0, -1]


def _alignment_rows(net: PervasiveNetwork, info: dict, rows: np.ndarray, tokens: np.ndarray) -> list:
    """Source-coverage row per selected (hypothesis, token)."""
    if "rho" in info:
        return [info["rho"][r].astype(np.float64) for r in rows]
    if "argmax" not in info:
        return [None] * len(rows)
    F = net.config.f_L
    E = net.output_matrix()[:, :F]
    out = []
    for r, w in zip(rows, tokens):
        H, am = info["H"][r], info["argmax"][r]
        alpha = np.zeros(H.shape[0], dtype=np.float64)
        np.add.at(alpha, am, E[w] * H[am, np.arange(F)])
        pos = np.maximum(alpha, 0.0)
        total = pos.sum()
        out.append(pos / total if total > 0 else pos)
    return out


def length_penalty(n: int, alpha: float) -> float:
    return ((5.0 + n) / 6.0) ** alpha


def coverage_penalty(align_rows) -> float:
    """Sum over source positions of ``ln min(1, total attention received)``."""
    total = np.sum(np.stack(align_rows), axis=0)
    # floor keeps the penalty finite for positions that never receive mass
    return float(np.sum(np.log(np.clip(total, 1e-10, 1.0))))


def hypothesis_score(h: Hypothesis, config: DecodeConfig) -> float:
    score = h.logp / length_penalty(len(h.tokens), config.lp_alpha)
    if config.cov_beta != 0.0:
        if not h.align_rows:
            raise ValueError("coverage penalty requested but the hypothesis carries no alignment rows")
        score += config.cov_beta * coverage_penalty(h.align_rows)
    return score


def greedy_decode(net: PervasiveNetwork, src_ids, config: DecodeConfig | None = None) -> Hypothesis:
    """Arg-max decoding from BOS until EOS or the length limit."""
    config = config or DecodeConfig(beam=1)
    state = IncrementalState(net, src_ids, 1)
    h = Hypothesis(align_rows=[] if config.track_alignment else None)
    prev = BOS
    for _ in range(config.max_len(state.src_ids.size)):
        lp, info = incremental_forward(net, state, [prev])
        tok = int(np.argmax(lp[0]))
        row = _alignment_rows(net, info, np.array([0]), np.array([tok]))[0] if config.track_alignment else None
        h = h.extend(tok, float(lp[0, tok]), row)
        if h.finished:
            break
        prev = tok
    else:
        h.truncated = True
    h.score = hypothesis_score(h, config)
    return h


def beam_search(net: PervasiveNetwork, src_ids, config: DecodeConfig | None = None) -> list[Hypothesis]:
    """Beam search; returns finished hypotheses best-first by penalized score.

    Each step keeps the ``beam`` best extensions by cumulative log-probability
    (ties: lower parent index, then lower token id). Extensions ending in EOS
    among those finish; the search stops once ``beam`` hypotheses have
    finished and no live hypothesis has a higher log-probability than the
    worst of them, or at the length limit.
    """
    config = config or DecodeConfig()
    B = config.beam
    state = IncrementalState(net, src_ids, 1)
    live = [Hypothesis(align_rows=[] if config.track_alignment else None)]
    finished: list[Hypothesis] = []
    max_len = config.max_len(state.src_ids.size)
    for _ in range(max_len):
        prev = [h.tokens[-1] if h.tokens else BOS for h in live]
        lp, info = incremental_forward(net, state, prev)
        base = np.array([h.logp for h in live], dtype=np.float64)
        scores = base[:, None] + lp.astype(np.float64)
        n, V = scores.shape
        parent = np.repeat(np.arange(n), V)
        token = np.tile(np.arange(V), n)
        flat = scores.reshape(-1)
        order = np.lexsort((token, parent, -flat))
        top = order[:B]
        eos_top = [i for i in top if token[i] == EOS]
        keep = [i for i in order[: 2 * B + 1] if token[i] != EOS][:B]
        sel = np.array(eos_top + keep, dtype=np.int64)
        rows = (_alignment_rows(net, info, parent[sel], token[sel]) if config.track_alignment
                else [None] * len(sel))
        new_by_sel = [live[parent[i]].extend(int(token[i]), float(lp[parent[i], token[i]]), r)
                      for i, r in zip(sel, rows)]
        finished.extend(new_by_sel[: len(eos_top)])
        live = new_by_sel[len(eos_top):]
        state.reorder(parent[keep])
        if len(finished) >= B:
            worst = sorted(h.logp for h in finished)[-B]
            if not live or max(h.logp for h in live) <= worst:
                break
    if not finished:
        for h in live:
            h.truncated = True
        finished = live
    for h in finished:
        h.score = hypothesis_score(h, config)
    return sorted(finished, key=lambda h: (-h.score, h.tokens))
