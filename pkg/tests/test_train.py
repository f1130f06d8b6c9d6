import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pervasive import autograd as ag
from pervasive.autograd import Tensor
from pervasive.checkpoint import CheckpointError, read_container, write_container
from pervasive.data import synth_generate, Vocabulary, encode_pairs
from pervasive.model import ModelConfig, PervasiveNetwork
from pervasive.train import (AdamState, Checkpoint, PlateauSchedule, TrainConfig, Trainer, TrainingDiverged,
                             adam_step, clip_grad_norm, label_smoothed_nll, train_loop, validate)
from pervasive.data import make_batches


def test_label_smoothing_examples():
    logits = Tensor(np.zeros((2, 3, 4)))
    targets = np.array([[1, 2, 3], [0, 1, 2]])
    mask = np.ones((2, 3), bool)
    for eps in (0.0, 0.1, 0.5):
        assert label_smoothed_nll(logits, targets, eps, mask).item() == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        label_smoothed_nll(logits, targets, 1.0, mask)
    with pytest.raises(ValueError):
        label_smoothed_nll(logits, targets, 0.1, np.zeros((2, 3), bool))


def test_label_smoothing_oracle_and_padding():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5))
    t = rng.integers(0, 5, (2, 3))
    mask = np.array([[True, True, False], [True, False, False]])
    eps = 0.2
    lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
    expect = []
    for b, i in zip(*np.nonzero(mask)):
        q = np.full(5, eps / 4)
        q[t[b, i]] = 1 - eps
        expect.append(-(q * lp[b, i]).sum())
    got = label_smoothed_nll(Tensor(x), t, eps, mask).item()
    assert got == pytest.approx(np.mean(expect), rel=1e-12)
    x2 = x.copy()
    x2[~mask] = 1e3
    assert label_smoothed_nll(Tensor(x2), t, eps, mask).item() == pytest.approx(got, rel=1e-12)
    nll = label_smoothed_nll(Tensor(x), t, 0.0, mask).item()
    assert nll == pytest.approx(-np.mean([lp[b, i, t[b, i]] for b, i in zip(*np.nonzero(mask))]))


def test_adam_examples():
    p = Tensor(np.zeros(3), requires_grad=True)
    st_ = AdamState(lr=5e-4)
    adam_step({"p": p}, {"p": np.zeros(3)}, st_)
    assert np.all(p.data == 0)
    p = Tensor(np.zeros(3), requires_grad=True)
    st_ = AdamState(lr=5e-4)
    adam_step({"p": p}, {"p": np.ones(3)}, st_)
    d1 = p.data.copy()
    np.testing.assert_allclose(d1, -5e-4 / (1 + 1e-8), rtol=1e-12)
    adam_step({"p": p}, {"p": np.ones(3)}, st_)
    np.testing.assert_allclose(p.data - d1, d1, rtol=1e-9)
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.ones(2)}, st_)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10.0))
def test_clip_never_increases_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 2)) * 5, "b": rng.normal(size=4)}
    clipped, norm = clip_grad_norm(grads, max_norm)
    new = math.sqrt(sum((g ** 2).sum() for g in clipped.values()))
    assert new <= max(norm, max_norm) * (1 + 1e-12)
    assert new <= norm * (1 + 1e-12)
    same, _ = clip_grad_norm(grads, 0.0)
    assert all(same[k] is grads[k] for k in grads)


def test_plateau_schedule():
    s = PlateauSchedule(5e-4, 0.8, 3)
    decays = [s.step(x) for x in [2.0, 2.1, 2.1, 2.1]]
    assert decays == [False, False, False, True]
    assert s.lr == pytest.approx(4e-4)
    s = PlateauSchedule(5e-4, 0.8, 3)
    for x in [2.0, 2.1, 2.1, 1.9, 2.0, 2.0]:
        s.step(x)
    assert s.lr == 5e-4


# -- end to end ---------------------------------------------------------------

def small_task(n=50, seed=0, task="copy"):
    pairs = synth_generate(task, n, 8, (2, 5), seed=seed)
    sv = Vocabulary.build([s for s, _ in pairs])
    tv = Vocabulary.build([t for _, t in pairs])
    return encode_pairs(pairs, sv, tv), len(sv), len(tv)


def small_model(sv, tv, **kw):
    base = dict(src_vocab=sv, tgt_vocab=tv, d_s=8, d_t=8, L=2, g=4, k=3, dropout_p=0.0, downsample_input=False,
                tie_target_embedding=False)
    base.update(kw)
    return ModelConfig(**base)


def test_memorize_small_corpus():
    pairs, sv, tv = small_task(50)
    cfg = small_model(sv, tv, L=3, g=8)
    tc = TrainConfig(lr=3e-3, batch_tokens=60, epochs=80, eval_every=10**9, label_smoothing=0.0, seed=0)
    net = PervasiveNetwork(cfg, seed=0)
    tr = Trainer(net, tc, pairs, pairs, log=lambda _: None)
    best = tr.run()
    assert best.dev_loss < 0.05
    net = best.build_network()
    loss, acc = validate(net, make_batches(pairs, batch_tokens=10**6, seed=None))
    assert loss == pytest.approx(best.dev_loss, rel=1e-5)


def test_fresh_validate_loss_near_uniform():
    pairs, sv, tv = small_task(40)
    net = PervasiveNetwork(small_model(sv, tv), seed=1)
    loss, acc = validate(net, make_batches(pairs, seed=None))
    assert abs(loss - math.log(tv)) / math.log(tv) < 0.05
    again, _ = validate(net, make_batches(pairs, seed=None))
    assert again == loss


def test_container_round_trip_and_errors(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float64).reshape(2, 3), "i": np.array([1, 2], dtype=np.int32)}
    write_container(tmp_path / "a", {"x": 1}, arrays)
    write_container(tmp_path / "b", {"x": 1}, arrays)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    meta, back = read_container(tmp_path / "a")
    assert meta == {"x": 1}
    assert back["w"].dtype == np.float32 and back["i"].dtype == np.int64
    np.testing.assert_array_equal(back["w"], arrays["w"])
    (tmp_path / "c").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "c")
    data = (tmp_path / "a").read_bytes()
    (tmp_path / "d").write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "d")


def test_checkpoint_resume_is_bit_identical(tmp_path):
    pairs, sv, tv = small_task(30, seed=2)
    cfg = small_model(sv, tv, dropout_p=0.1, downsample_input=True, tie_target_embedding=True)
    tc = TrainConfig(lr=1e-3, batch_tokens=60, epochs=3, eval_every=5, seed=4)
    quiet = dict(log=lambda _: None)

    straight = Trainer(PervasiveNetwork(cfg, seed=4), tc, pairs, pairs[:10], **quiet)
    straight.run(1)
    batches = straight.epoch_batches(straight.epoch)
    straight.step(batches[0])
    straight.batch_index = 1

    first = Trainer(PervasiveNetwork(cfg, seed=4), tc, pairs, pairs[:10], **quiet)
    first.run(1)
    first.checkpoint().save(tmp_path / "mid.ckpt")
    resumed = Trainer.from_checkpoint(Checkpoint.load(tmp_path / "mid.ckpt"), tc, pairs, pairs[:10], **quiet)
    assert resumed.schedule == first.schedule
    resumed.step(resumed.epoch_batches(resumed.epoch)[0])
    resumed.batch_index = 1

    a, b = straight.net.state_dict(), resumed.net.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)
    assert straight.adam.step == resumed.adam.step
    for k in straight.adam.m:
        np.testing.assert_array_equal(straight.adam.m[k], resumed.adam.m[k])

    # finishing both runs gives the same final checkpoint bytes
    straight.run()
    resumed.run()
    straight.checkpoint().save(tmp_path / "s.ckpt")
    resumed.checkpoint().save(tmp_path / "r.ckpt")
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "r.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_container(tmp_path):
    write_container(tmp_path / "x", {"kind": "other"}, {})
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "x")


def test_divergence_is_reported():
    pairs, sv, tv = small_task(10)
    net = PervasiveNetwork(small_model(sv, tv), seed=0)
    net.proj.weight.data[:] = np.nan
    tr = Trainer(net, TrainConfig(batch_tokens=100), pairs, log=lambda _: None)
    with pytest.raises(TrainingDiverged, match="grad_norm"):
        tr.run(1)


def test_train_loop_logs_and_tracks_best():
    pairs, sv, tv = small_task(30, seed=5)
    records = []
    best = train_loop(small_model(sv, tv), TrainConfig(lr=2e-3, batch_tokens=80, epochs=3, eval_every=4),
                      pairs, pairs[:8], log=records.append)
    losses = [float(r.split("dev_loss=")[1].split()[0]) for r in records]
    assert best.dev_loss == pytest.approx(min(losses), abs=1e-6)
    assert all("lr=" in r and "train_loss=" in r for r in records)
