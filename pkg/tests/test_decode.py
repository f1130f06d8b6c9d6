import math

import numpy as np
import pytest

from pervasive import decode as dec
from pervasive.data import BOS, EOS
from pervasive.decode import (DecodeConfig, Hypothesis, IncrementalState, beam_search, coverage_penalty,
                              full_logprobs, greedy_decode, hypothesis_score, incremental_forward, length_penalty)
from pervasive.model import ModelConfig, PervasiveNetwork


def random_net(seed=0, dtype=np.float64, **kw):
    base = dict(src_vocab=12, tgt_vocab=9, d_s=6, d_t=4, L=3, g=4, k=5, dropout_p=0.2)
    base.update(kw)
    net = PervasiveNetwork(ModelConfig(**base), seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    # give batch norm non-trivial running statistics
    net.train()
    net(rng.integers(4, 12, (4, 6)), rng.integers(1, 9, (4, 5)))
    return net.eval()


@pytest.mark.parametrize("kw", [
    {}, {"aggregation": "avg"}, {"aggregation": "attn"}, {"aggregation": "max+attn", "use_glu": True},
    {"k": 3, "input_grid_norm": True, "downsample_input": False}, {"k": 1},
])
def test_incremental_matches_full_recompute(kw):
    net = random_net(1, **kw)
    rng = np.random.default_rng(2)
    for _ in range(5):
        src = rng.integers(4, 12, int(rng.integers(1, 7)))
        prefix = rng.integers(4, 9, 6).tolist()
        state = IncrementalState(net, src)
        prev = BOS
        for t in range(len(prefix) + 1):
            lp, _ = incremental_forward(net, state, [prev])
            full = full_logprobs(net, src, prefix[:t])
            assert np.max(np.abs(lp[0] - full)) < 1e-5
            if t < len(prefix):
                prev = prefix[t]


def test_incremental_float32():
    net = random_net(3, dtype=np.float32)
    src = np.array([4, 5, 6, 7])
    state = IncrementalState(net, src)
    prev = BOS
    for t, tok in enumerate([5, 6, 7]):
        lp, _ = incremental_forward(net, state, [prev])
        assert np.max(np.abs(lp[0] - full_logprobs(net, src, [5, 6, 7][:t]))) < 1e-5
        prev = tok


def test_incremental_state_contract():
    net = random_net(4)
    state = IncrementalState(net, [4, 5, 6], n_hyps=2)
    cfg = net.config
    per_hyp = state.cache_floats_per_hypothesis()
    assert per_hyp == cfg.L * (cfg.kernel_target - 1) * 3 * 4 * cfg.g
    incremental_forward(net, state, [BOS, BOS])
    incremental_forward(net, state, [5, 6])
    assert state.cache_floats_per_hypothesis() == per_hyp
    with pytest.raises(ValueError):
        incremental_forward(net, state, [5])
    with pytest.raises(ValueError):
        incremental_forward(random_net(5), state, [5, 6])
    with pytest.raises(ValueError):
        IncrementalState(net.train(), [4])
    net.eval()
    with pytest.raises(ValueError):
        IncrementalState(net, [])


def test_first_step_depends_only_on_bos_row():
    net = random_net(6)
    lp, _ = incremental_forward(net, IncrementalState(net, [4, 5]), [BOS])
    np.testing.assert_allclose(lp[0], full_logprobs(net, [4, 5], []), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    net = random_net(seed)
    src = np.random.default_rng(seed).integers(4, 12, 5)
    g = greedy_decode(net, src, DecodeConfig(beam=1))
    b = beam_search(net, src, DecodeConfig(beam=1))[0]
    assert g.tokens == b.tokens
    assert g.logp == pytest.approx(b.logp, abs=1e-12)


def test_hypothesis_logp_is_sum_of_steps_and_deterministic():
    net = random_net(7)
    src = [4, 6, 8]
    hyps = beam_search(net, src, DecodeConfig(beam=3))
    for h in hyps:
        assert h.logp == pytest.approx(sum(h.step_logps), abs=1e-5)
    again = beam_search(net, src, DecodeConfig(beam=3))
    assert [h.tokens for h in hyps] == [h.tokens for h in again]


def test_finished_hypotheses_are_never_extended():
    h = Hypothesis().extend(EOS, -0.1, None)
    assert h.finished
    with pytest.raises(ValueError):
        h.extend(4, -0.1, None)


@pytest.mark.parametrize("seed", range(8))
def test_beam_monotonicity(seed):
    net = random_net(seed, L=2, k=3)
    src = np.random.default_rng(seed).integers(4, 12, 4)
    prev = -math.inf
    for B in range(1, 5):
        hyps = beam_search(net, src, DecodeConfig(beam=B, lp_alpha=0.0, max_len_a=1.0, max_len_b=3))
        best = max(h.logp for h in hyps)
        assert best >= prev - 1e-12
        prev = best


# -- handcrafted search problem ----------------------------------------------

class TableState:
    """Stand-in for the network cache: tracks each hypothesis' prefix."""

    def __init__(self, _net, src_ids, n_hyps=1):
        self.src_ids = np.asarray(src_ids)
        self.prefixes = [[] for _ in range(n_hyps)]

    def reorder(self, index):
        self.prefixes = [list(self.prefixes[i]) for i in index]


V = 6
A, B_ = 4, 5


def table_logprobs(prefix):
    p = np.full(V, 1e-4)
    if len(prefix) == 0:
        p[A], p[B_] = 0.6, 0.4
    elif len(prefix) == 1 and prefix[0] == A:
        p[A], p[B_], p[EOS] = 0.35, 0.35, 0.3
    elif len(prefix) == 1:
        p[A], p[B_], p[EOS] = 0.9, 0.05, 0.05
    else:
        p[:] = 1e-4
        p[EOS] = 1.0
    return np.log(p / p.sum())


def table_forward(_net, state, prev):
    rows = []
    for pre, tok in zip(state.prefixes, prev):
        if tok != BOS:
            pre.append(int(tok))
        rows.append(table_logprobs(pre))
    return np.stack(rows), {}


def enumerate_best(max_steps=3):
    best, best_seq = -math.inf, None

    def walk(prefix, logp):
        nonlocal best, best_seq
        if len(prefix) == max_steps:
            return
        lp = table_logprobs(prefix)
        for w in range(V):
            total = logp + lp[w]
            if w == EOS:
                if total > best:
                    best, best_seq = total, prefix + [w]
            else:
                walk(prefix + [w], total)

    walk([], 0.0)
    return best, best_seq


def test_beam_beats_greedy_on_handcrafted_model(monkeypatch):
    monkeypatch.setattr(dec, "IncrementalState", TableState)
    monkeypatch.setattr(dec, "incremental_forward", table_forward)
    cfg = DecodeConfig(beam=2, lp_alpha=0.0, max_len_a=0.0, max_len_b=3, track_alignment=False)
    greedy = dec.greedy_decode(None, [4], DecodeConfig(beam=1, lp_alpha=0.0, max_len_a=0.0, max_len_b=3,
                                                       track_alignment=False))
    beam = dec.beam_search(None, [4], cfg)[0]
    best, best_seq = enumerate_best()
    assert greedy.tokens[0] == A
    assert beam.tokens == best_seq == [B_, A, EOS]
    assert beam.logp == pytest.approx(best)
    assert beam.logp > greedy.logp


def test_truncation_is_flagged(monkeypatch):
    def never_eos(_net, state, prev):
        lp = np.full((len(prev), V), math.log(1e-6))
        lp[:, A] = 0.0
        return lp, {}

    monkeypatch.setattr(dec, "IncrementalState", TableState)
    monkeypatch.setattr(dec, "incremental_forward", never_eos)
    cfg = DecodeConfig(beam=1, max_len_a=0.0, max_len_b=2, track_alignment=False)
    h = dec.greedy_decode(None, [4, 5], cfg)
    assert h.tokens == [A, A] and h.truncated and not h.finished
    top = dec.beam_search(None, [4, 5], DecodeConfig(beam=2, max_len_a=0.0, max_len_b=2, track_alignment=False))
    assert top[0].truncated and top[0].tokens == [A, A]


# -- scoring ------------------------------------------------------------------

def test_length_penalty_and_score():
    assert length_penalty(7, 1.0) == pytest.approx(2.0)
    h = Hypothesis([4, 5, EOS], -3.0, [-1.0, -1.0, -1.0], True)
    assert hypothesis_score(h, DecodeConfig(lp_alpha=0.0, cov_beta=0.0)) == -3.0
    assert hypothesis_score(h, DecodeConfig(lp_alpha=1.0)) == pytest.approx(-3.0 / (8 / 6))
    with pytest.raises(ValueError):
        hypothesis_score(h, DecodeConfig(cov_beta=0.2))


def test_coverage_penalty():
    assert coverage_penalty([np.array([0.6, 1.0]), np.array([0.5, 0.2])]) == 0.0
    assert coverage_penalty([np.array([0.5, 0.25])]) == pytest.approx(math.log(0.5) + math.log(0.25))
    assert math.isfinite(coverage_penalty([np.array([0.0, 1.0])]))


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam=0)
    with pytest.raises(ValueError):
        DecodeConfig(lp_alpha=float("inf"))
    assert DecodeConfig().max_len(7) == 24


@pytest.mark.parametrize("agg", ["max", "attn"])
def test_coverage_rows_available_for_max_and_attn(agg):
    net = random_net(9, aggregation=agg)
    hyps = beam_search(net, [4, 5, 6], DecodeConfig(beam=2, cov_beta=0.2))
    for h in hyps:
        assert len(h.align_rows) == len(h.tokens)
        for r in h.align_rows:
            assert np.all(r >= 0)
            assert r.sum() == pytest.approx(1.0, abs=1e-6) or r.sum() == 0.0


def test_avg_mode_rejects_coverage():
    net = random_net(10, aggregation="avg")
    with pytest.raises(ValueError):
        beam_search(net, [4, 5], DecodeConfig(beam=2, cov_beta=0.2))
