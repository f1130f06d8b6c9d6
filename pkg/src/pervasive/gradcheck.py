"""Whole-model comparison of tape gradients against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data.batching import Batch, collate
from .model import ModelConfig, PervasiveNetwork, forward_training
from .train import label_smoothed_nll

# Relative errors use max(|a|, |b|, FLOOR) as denominator so that entries whose
# true gradient is ~0 are judged on absolute error instead.
FLOOR = 1e-6


def small_config() -> ModelConfig:
    return ModelConfig(src_vocab=11, tgt_vocab=11, d_s=8, d_t=8, L=2, g=4, k=3, aggregation="max",
                       dropout_p=0.0)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, n: int = 3, max_len: int = 5) -> Batch:
    pairs = []
    for _ in range(n):
        s = rng.integers(4, cfg.src_vocab, int(rng.integers(2, max_len + 1))).tolist()
        t = rng.integers(4, cfg.tgt_vocab, int(rng.integers(2, max_len + 1))).tolist()
        pairs.append((s, t))
    return collate(pairs)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    n_checked: int


def gradient_check(cfg: ModelConfig | None = None, seed: int = 0, eps: float = 1e-5,
                   label_smoothing: float = 0.1) -> GradCheckResult:
    """Check every parameter of a float64 network in training mode.

    Dropout must be disabled (``dropout_p == 0``) since the check needs a
    deterministic loss. Batch-norm batch statistics are part of the function.
    """
    cfg = cfg or small_config()
    if cfg.dropout_p or cfg.grid_dropout_p:
        raise ValueError("gradient check needs dropout disabled")
    rng = np.random.default_rng(seed)
    net = PervasiveNetwork(cfg, seed=seed, dtype=np.float64).train()
    batch = random_batch(cfg, rng)

    def loss_fn(_=None):
        logits, _act = forward_training(batch, net)
        return label_smoothed_nll(logits, batch.tgt_out, label_smoothing, batch.tgt_mask)

    params = net.named_parameters()
    with ag.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, params.values())
    per_param = {}
    n = 0
    for name, p in params.items():
        fd = ag.finite_difference_grad(loss_fn, p, eps)
        per_param[name] = float(relative_error(grads[p], fd).max())
        n += p.size
    worst = max(per_param, key=per_param.get)
    return GradCheckResult(per_param[worst], worst, per_param, n)
