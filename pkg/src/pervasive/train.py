"""Label-smoothed maximum-likelihood training with Adam and plateau decay."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import CheckpointError, read_container, write_container
from .data.batching import Batch, make_batches
from .metrics import token_accuracy
from .model import ModelConfig, PervasiveNetwork, forward_training

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.1
    clip_norm: float = 5.0
    batch_tokens: int = 4000
    max_len: int = 80
    epochs: int = 40
    eval_every: int = 8000
    patience: int = 3
    lr_decay: float = 0.8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- loss -------------------------------------------------------------------

def label_smoothed_nll(logits: Tensor, targets: np.ndarray, eps: float, pad_mask: np.ndarray) -> Tensor:
    """Mean cross-entropy against ``1 - eps`` on the target, ``eps / (V - 1)`` elsewhere.

    Only positions where ``pad_mask`` is true contribute.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    mask = np.asarray(pad_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss needs at least one non-pad position")
    V = logits.shape[-1]
    targets = np.asarray(targets)
    lp = ag.log_softmax(logits, axis=-1)
    q = np.full(logits.shape, eps / (V - 1) if V > 1 else 0.0, dtype=np.float64)
    np.put_along_axis(q, targets[..., None], 1.0 - eps, axis=-1)
    q *= mask[..., None]
    return ag.scale(ag.tsum(ag.mul(lp, Tensor(q.astype(logits.dtype)))), -1.0 / n)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data = p.data - dt(state.lr) * update


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm`` (0 disables)."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads, norm


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations without improvement."""

    lr: float = 5e-4
    factor: float = 0.8
    patience: int = 3
    best: float = math.inf
    bad_evals: int = 0

    def step(self, dev_loss: float) -> bool:
        """Record one evaluation; returns True when the learning rate was decayed."""
        if dev_loss < self.best:
            self.best = dev_loss
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        if self.bad_evals >= self.patience:
            self.lr *= self.factor
            self.bad_evals = 0
            return True
        return False


# -- evaluation -------------------------------------------------------------

def validate(net: PervasiveNetwork, batches: Sequence[Batch], label_smoothing: float = 0.0) -> tuple[float, float]:
    """Token-averaged dev loss and accuracy in evaluation mode."""
    was_training = net.training
    net.eval()
    total_loss = 0.0
    correct = 0.0
    n = 0
    try:
        for batch in batches:
            logits, _ = forward_training(batch, net)
            k = int(batch.tgt_mask.sum())
            loss = label_smoothed_nll(logits, batch.tgt_out, label_smoothing, batch.tgt_mask)
            total_loss += loss.item() * k
            correct += token_accuracy(logits, batch.tgt_out, batch.tgt_mask) * k
            n += k
    finally:
        net.train(was_training)
    return total_loss / n, correct / n


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict
    seed: int = 0
    adam: AdamState | None = None
    schedule: PlateauSchedule | None = None
    epoch: int = 0
    update: int = 0
    batch_index: int = 0
    rng_state: dict | None = None
    dev_loss: float | None = None
    best_dev_loss: float | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {f"model/{k}": v for k, v in self.model_state.items()}
        info = {
            "kind": "pervasive-checkpoint",
            "model_config": self.model_config.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "update": self.update,
            "batch_index": self.batch_index,
            "rng_state": self.rng_state,
            "dev_loss": self.dev_loss,
            "best_dev_loss": self.best_dev_loss,
            "meta": self.meta,
        }
        if self.adam is not None:
            a = self.adam
            info["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
            arrays.update({f"adam_m/{k}": v for k, v in a.m.items()})
            arrays.update({f"adam_v/{k}": v for k, v in a.v.items()})
        if self.schedule is not None:
            s = asdict(self.schedule)
            s["best"] = None if math.isinf(s["best"]) else s["best"]
            info["schedule"] = s
        write_container(path, info, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        info, arrays = read_container(path)
        if info.get("kind") != "pervasive-checkpoint":
            raise CheckpointError(f"{path}: not a model checkpoint")
        cfg = ModelConfig.from_dict(info["model_config"])
        model_state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        adam = None
        if "adam" in info:
            adam = AdamState(**info["adam"])
            adam.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
            adam.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
        schedule = None
        if "schedule" in info:
            s = dict(info["schedule"])
            s["best"] = math.inf if s["best"] is None else s["best"]
            schedule = PlateauSchedule(**s)
        return cls(cfg, model_state, info["seed"], adam, schedule, info["epoch"], info["update"],
                   info["batch_index"], info["rng_state"], info["dev_loss"], info["best_dev_loss"],
                   info.get("meta", {}))

    def build_network(self, dtype=np.float32) -> PervasiveNetwork:
        net = PervasiveNetwork(self.model_config, seed=self.seed, dtype=dtype)
        net.load_state_dict(self.model_state)
        if self.rng_state is not None:
            net.dropout_rng.bit_generator.state = copy.deepcopy(self.rng_state)
        return net


# -- training ---------------------------------------------------------------

class Trainer:
    """Owns the network, optimizer and schedule for one training run."""

    def __init__(self, net: PervasiveNetwork, cfg: TrainConfig, train_pairs, dev_pairs=None,
                 log: Callable[[str], None] | None = None, meta: dict | None = None):
        self.net = net
        self.cfg = cfg
        self.train_pairs = list(train_pairs)
        self.dev_pairs = list(dev_pairs) if dev_pairs else []
        self.log = log or logger.info
        self.meta = dict(meta or {})
        self.adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.schedule = PlateauSchedule(cfg.lr, cfg.lr_decay, cfg.patience)
        self.epoch = 0
        self.update = 0
        self.batch_index = 0
        self.best: Checkpoint | None = None
        self.last_dev: tuple[float, float] | None = None
        self._loss_sum = 0.0
        self._loss_n = 0
        self._dev_batches = (make_batches(self.dev_pairs, cfg.max_len, cfg.batch_tokens, seed=None)
                             if self.dev_pairs else [])

    def epoch_batches(self, epoch: int) -> list[Batch]:
        return make_batches(self.train_pairs, self.cfg.max_len, self.cfg.batch_tokens, seed=self.cfg.seed + epoch)

    def step(self, batch: Batch) -> float:
        """Forward, backward and one optimizer update on ``batch``."""
        net = self.net
        net.train()
        params = net.named_parameters()
        with ag.Tape() as tape:
            logits, _ = forward_training(batch, net)
            loss = label_smoothed_nll(logits, batch.tgt_out, self.cfg.label_smoothing, batch.tgt_mask)
        by_tensor = tape.backward(loss, params.values())
        grads = {name: by_tensor[p] for name, p in params.items()}
        value = loss.item()
        grads, norm = clip_grad_norm(grads, self.cfg.clip_norm)
        if not math.isfinite(value) or not math.isfinite(norm):
            raise TrainingDiverged(
                f"non-finite loss at update {self.update}: loss={value} lr={self.adam.lr:g} grad_norm={norm}")
        self.adam.lr = self.schedule.lr
        adam_step(params, grads, self.adam)
        self.update += 1
        self._loss_sum += value
        self._loss_n += 1
        return value

    def evaluate(self) -> tuple[float, float]:
        dev_loss, dev_acc = validate(self.net, self._dev_batches)
        decayed = self.schedule.step(dev_loss)
        train_loss = self._loss_sum / self._loss_n if self._loss_n else float("nan")
        self._loss_sum, self._loss_n = 0.0, 0
        self.log(f"update={self.update} epoch={self.epoch} lr={self.schedule.lr:.6g} "
                 f"train_loss={train_loss:.6f} dev_loss={dev_loss:.6f} dev_acc={dev_acc:.6f}"
                 + (" lr_decayed=1" if decayed else ""))
        self.last_dev = (dev_loss, dev_acc)
        if self.best is None or dev_loss < self.best.dev_loss:
            self.best = self.checkpoint(dev_loss)
        return dev_loss, dev_acc

    def checkpoint(self, dev_loss: float | None = None) -> Checkpoint:
        adam = AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step,
                         {k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()})
        best = self.best.dev_loss if self.best is not None else None
        if dev_loss is not None and (best is None or dev_loss < best):
            best = dev_loss
        return Checkpoint(
            self.net.config, {k: v.copy() for k, v in self.net.state_dict().items()}, self.net.seed,
            adam, copy.deepcopy(self.schedule), self.epoch, self.update, self.batch_index,
            copy.deepcopy(self.net.dropout_rng.bit_generator.state), dev_loss, best, dict(self.meta))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig, train_pairs, dev_pairs=None,
                        log=None) -> "Trainer":
        net = ckpt.build_network()
        tr = cls(net, cfg, train_pairs, dev_pairs, log=log, meta=ckpt.meta)
        if ckpt.adam is not None:
            tr.adam = AdamState(ckpt.adam.lr, ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.eps, ckpt.adam.step,
                                {k: v.astype(net.dtype) for k, v in ckpt.adam.m.items()},
                                {k: v.astype(net.dtype) for k, v in ckpt.adam.v.items()})
        if ckpt.schedule is not None:
            tr.schedule = copy.deepcopy(ckpt.schedule)
        tr.epoch, tr.update, tr.batch_index = ckpt.epoch, ckpt.update, ckpt.batch_index
        return tr

    def run(self, epochs: int | None = None) -> Checkpoint:
        """Train until ``epochs`` (default: config) and return the best-dev checkpoint."""
        epochs = self.cfg.epochs if epochs is None else epochs
        while self.epoch < epochs:
            batches = self.epoch_batches(self.epoch)
            evaluated_at = -1
            while self.batch_index < len(batches):
                self.step(batches[self.batch_index])
                self.batch_index += 1
                if self.dev_pairs and self.update % self.cfg.eval_every == 0:
                    self.evaluate()
                    evaluated_at = self.update
            self.epoch += 1
            self.batch_index = 0
            if self.dev_pairs and evaluated_at != self.update:
                self.evaluate()
        if self.best is None:
            self.best = self.checkpoint()
        return self.best


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, train_pairs, dev_pairs,
               log=None, meta: dict | None = None, dtype=np.float32) -> Checkpoint:
    """Build a fresh network and train it; returns the lowest-dev-loss checkpoint."""
    net = PervasiveNetwork(model_cfg, seed=train_cfg.seed, dtype=dtype)
    return Trainer(net, train_cfg, train_pairs, dev_pairs, log=log, meta=meta).run()
