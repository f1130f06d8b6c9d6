"""The joint source-target DenseNet translation model.

Cell ``(i, j)`` of the input grid concatenates the embedding of the target
token entering row ``i`` (the previously emitted token, BOS for row 0) with
the embedding of source token ``j``. A stack of densely connected layers with
causal convolutions re-encodes the grid, the source axis is collapsed per
target row, and the result is projected onto the target vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import (
    BatchNorm2d,
    Embedding,
    Linear,
    MaskedConv2d,
    Module,
    dropout,
    glu,
)

AGGREGATIONS = ("max", "avg", "attn", "max+attn")


@dataclass
class ModelConfig:
    src_vocab: int = 0
    tgt_vocab: int = 0
    d_s: int = 128
    d_t: int = 128
    L: int = 24
    g: int = 32
    k: int = 5
    aggregation: str = "max"
    use_glu: bool = False
    tie_target_embedding: bool = True
    downsample_input: bool = True
    input_grid_norm: bool = False
    dropout_p: float = 0.2
    grid_dropout_p: float = 0.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        for name in ("d_s", "d_t", "L", "g"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 1, got {self.k}")
        for name in ("dropout_p", "grid_dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @property
    def f0(self) -> int:
        return self.d_s + self.d_t

    @property
    def grid_channels(self) -> int:
        """Channels entering the first dense layer (after optional halving)."""
        return math.ceil(self.f0 / 2) if self.downsample_input else self.f0

    def layer_in_channels(self, l: int) -> int:
        """Input channels of dense layer ``l`` (1-based)."""
        return self.grid_channels + (l - 1) * self.g

    @property
    def f_L(self) -> int:
        return self.grid_channels + self.L * self.g

    @property
    def pooled_channels(self) -> int:
        return 2 * self.f_L if self.aggregation == "max+attn" else self.f_L

    @property
    def kernel_target(self) -> int:
        return math.ceil(self.k / 2)

    @property
    def uses_max(self) -> bool:
        return self.aggregation in ("max", "max+attn")

    @property
    def uses_attn(self) -> bool:
        return self.aggregation in ("attn", "max+attn")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg``."""
    m = 2 if cfg.use_glu else 1
    n = cfg.src_vocab * cfg.d_s + cfg.tgt_vocab * cfg.d_t
    if cfg.input_grid_norm:
        n += 2 * cfg.f0
    if cfg.downsample_input:
        n += cfg.f0 * cfg.grid_channels + cfg.grid_channels
    inner = 4 * cfg.g
    kk = cfg.k * cfg.kernel_target
    for l in range(1, cfg.L + 1):
        c = cfg.layer_in_channels(l)
        n += 2 * c + (c + 1) * inner * m + 2 * inner + (inner * kk + 1) * cfg.g * m
    if cfg.uses_attn:
        n += cfg.f_L + 1
    if cfg.tie_target_embedding:
        n += cfg.pooled_channels * cfg.d_t
    else:
        n += cfg.pooled_channels * cfg.tgt_vocab
    return n


class DenseLayer(Module):
    """BN, ReLU, 1x1 conv to 4g, BN, ReLU, causal k-wide conv to g, dropout."""

    def __init__(self, in_channels: int, cfg: ModelConfig, rng: np.random.Generator, dtype):
        m = 2 if cfg.use_glu else 1
        inner = 4 * cfg.g
        self.use_glu = cfg.use_glu
        self.dropout_p = cfg.dropout_p
        self.bn1 = BatchNorm2d(in_channels, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.conv1 = MaskedConv2d(in_channels, inner * m, 1, rng, kernel_target=1, dtype=dtype)
        self.bn2 = BatchNorm2d(inner, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.conv2 = MaskedConv2d(inner, cfg.g * m, cfg.k, rng, dtype=dtype)

    def pre_conv(self, x: Tensor, cell_mask: np.ndarray) -> Tensor:
        """Everything up to the causal convolution; pad cells are zeroed."""
        h = self.conv1(ag.relu(self.bn1(x, cell_mask)))
        if self.use_glu:
            h = glu(h)
        a = ag.relu(self.bn2(h, cell_mask))
        return ag.mul(a, Tensor(cell_mask[..., None].astype(a.dtype)))

    def post_conv(self, a: Tensor, rng: np.random.Generator, pad_top: bool = True) -> Tensor:
        o = self.conv2(a, pad_top=pad_top)
        if self.use_glu:
            o = glu(o)
        return dropout(o, self.dropout_p, self.training, rng)

    def __call__(self, x: Tensor, cell_mask: np.ndarray, rng: np.random.Generator) -> Tensor:
        return self.post_conv(self.pre_conv(x, cell_mask), rng)


@dataclass
class GridActivations:
    layer_outputs: list
    features: Tensor
    cell_mask: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    pooled: Tensor | None = None
    argmax: np.ndarray | None = None
    rho: Tensor | None = None
    extras: dict = field(default_factory=dict)


class PervasiveNetwork(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        if cfg.src_vocab < 1 or cfg.tgt_vocab < 1:
            raise ValueError("src_vocab and tgt_vocab must be set before building a network")
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.src_embed = Embedding(cfg.src_vocab, cfg.d_s, rng, dtype)
        self.tgt_embed = Embedding(cfg.tgt_vocab, cfg.d_t, rng, dtype)
        self.grid_norm = BatchNorm2d(cfg.f0, cfg.bn_momentum, cfg.bn_eps, dtype) if cfg.input_grid_norm else None
        self.downsample = (MaskedConv2d(cfg.f0, cfg.grid_channels, 1, rng, kernel_target=1, dtype=dtype)
                           if cfg.downsample_input else None)
        self.layers = [DenseLayer(cfg.layer_in_channels(l), cfg, rng, dtype) for l in range(1, cfg.L + 1)]
        if cfg.uses_attn:
            self.attn_w = ag.Tensor(rng.uniform(-1, 1, cfg.f_L).astype(dtype) / math.sqrt(cfg.f_L),
                                    requires_grad=True)
            self.attn_b = ag.Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        out_dim = cfg.d_t if cfg.tie_target_embedding else cfg.tgt_vocab
        self.proj = Linear(cfg.pooled_channels, out_dim, rng, bias=False, dtype=dtype)
        self.dropout_rng = np.random.default_rng(seed + 1)

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update({f"buffer:{k}": v for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | {f"buffer:{k}" for k in buffers}
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(self.dtype).copy()
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.asarray(state[f"buffer:{name}"]).astype(self.dtype).copy())

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        return obj, parts[-1]

    # -- forward -------------------------------------------------------------

    def output_matrix(self) -> np.ndarray:
        """Effective ``E`` mapping pooled features to vocabulary energies."""
        if self.config.tie_target_embedding:
            return self.tgt_embed.weight.data @ self.proj.weight.data
        return self.proj.weight.data

    def embed_grid(self, src_ids: np.ndarray, tgt_in_ids: np.ndarray, cell_mask: np.ndarray) -> Tensor:
        """Grid after optional normalization and channel halving, pads zeroed."""
        x = build_input_grid(src_ids, tgt_in_ids, self)
        x = ag.mul(x, Tensor(cell_mask[..., None].astype(x.dtype)))
        if self.grid_norm is not None:
            x = self.grid_norm(x, cell_mask)
        cfg = self.config
        if cfg.grid_dropout_p:
            x = dropout(x, cfg.grid_dropout_p, self.training, self.dropout_rng)
        if self.downsample is not None:
            x = self.downsample(x)
        return x

    def forward(self, src_ids, tgt_in_ids, src_mask=None, tgt_mask=None) -> tuple[Tensor, GridActivations]:
        src_ids = np.asarray(src_ids)
        tgt_in_ids = np.asarray(tgt_in_ids)
        if src_mask is None:
            src_mask = np.ones(src_ids.shape, dtype=bool)
        if tgt_mask is None:
            tgt_mask = np.ones(tgt_in_ids.shape, dtype=bool)
        src_mask = np.asarray(src_mask, dtype=bool)
        tgt_mask = np.asarray(tgt_mask, dtype=bool)
        cell_mask = tgt_mask[:, :, None] & src_mask[:, None, :]
        x = self.embed_grid(src_ids, tgt_in_ids, cell_mask)
        act = network_forward(x, self, cell_mask)
        act.src_mask, act.tgt_mask = src_mask, tgt_mask
        pool, argmax, rho = aggregate(act.features, src_mask, self)
        act.pooled, act.argmax, act.rho = pool, argmax, rho
        return output_logits(pool, self), act

    __call__ = forward


def build_input_grid(src_ids: np.ndarray, tgt_input_ids: np.ndarray, net: PervasiveNetwork) -> Tensor:
    """Joint embedding grid ``[B, T, S, d_t + d_s]``, target half first."""
    src_ids = np.asarray(src_ids)
    tgt_input_ids = np.asarray(tgt_input_ids)
    if src_ids.ndim != 2 or tgt_input_ids.ndim != 2 or src_ids.shape[0] != tgt_input_ids.shape[0]:
        raise ValueError(f"expected [B, S] and [B, T] id arrays, got {src_ids.shape} and {tgt_input_ids.shape}")
    y = net.tgt_embed(tgt_input_ids)
    x = net.src_embed(src_ids)
    return ag.outer_concat(y, x)


def network_forward(grid: Tensor, net: PervasiveNetwork, cell_mask: np.ndarray) -> GridActivations:
    """Run the dense stack over an already embedded (and halved) grid."""
    if grid.shape[-1] != net.config.grid_channels:
        raise ValueError(f"grid has {grid.shape[-1]} channels, network expects {net.config.grid_channels}")
    feats = [grid]
    outs = []
    for layer in net.layers:
        x = feats[0] if len(feats) == 1 else ag.concat(feats, axis=-1)
        o = layer(x, cell_mask, net.dropout_rng)
        outs.append(o)
        feats.append(o)
    H = ag.concat(feats, axis=-1)
    return GridActivations(layer_outputs=outs, features=H, cell_mask=cell_mask,
                           src_mask=cell_mask.any(axis=1), tgt_mask=cell_mask.any(axis=2))


def _check_src_mask(H: Tensor, src_mask: np.ndarray) -> np.ndarray:
    src_mask = np.asarray(src_mask, dtype=bool)
    if src_mask.shape != (H.shape[0], H.shape[2]):
        raise ValueError(f"source mask {src_mask.shape} does not match features {H.shape}")
    if not src_mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid source position")
    return src_mask


def aggregate_max(H: Tensor, src_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Max over valid source positions: ``[B, T, S, F] -> [B, T, F]`` plus argmax."""
    src_mask = _check_src_mask(H, src_mask)
    return ag.reduce_max_argmax(H, axis=2, mask=src_mask[:, None, :, None])


def _length_scale(H: Tensor, src_mask: np.ndarray, power: float) -> Tensor:
    """``n_valid ** power`` per sequence, shaped ``[B, T, 1]``."""
    v = src_mask.sum(axis=1).astype(np.float64) ** power
    return Tensor(np.broadcast_to(v[:, None, None], (H.shape[0], H.shape[1], 1)).astype(H.dtype))


def aggregate_avg(H: Tensor, src_mask: np.ndarray) -> Tensor:
    """Sum over valid source positions divided by the square root of their count."""
    src_mask = _check_src_mask(H, src_mask)
    m = np.broadcast_to(src_mask[:, None, :, None], H.shape[:3] + (1,)).astype(H.dtype)
    s = ag.tsum(ag.mul(H, Tensor(m)), axis=2)
    return ag.mul(s, _length_scale(H, src_mask, -0.5))


def aggregate_attn(H: Tensor, src_mask: np.ndarray, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Self-attentive pooling scaled by the square root of the source length."""
    src_mask = _check_src_mask(H, src_mask)
    B, T, S, F = H.shape
    if w.shape != (F,) or b.shape not in ((1,), ()):
        raise ValueError(f"attention parameters {w.shape}, {b.shape} do not match {F} features")
    scores = ag.linear(H, ag.reshape(w, (1, F)), ag.reshape(b, (1,))).reshape(B, T, S)
    rho = ag.softmax(scores, axis=2, mask=src_mask[:, None, :])
    ctx = ag.matmul(rho.reshape(B, T, 1, S), H).reshape(B, T, F)
    return ag.mul(ctx, _length_scale(H, src_mask, 0.5)), rho


def aggregate(H: Tensor, src_mask: np.ndarray, net: PervasiveNetwork):
    mode = net.config.aggregation
    argmax = rho = None
    if mode == "max":
        pool, argmax = aggregate_max(H, src_mask)
    elif mode == "avg":
        pool = aggregate_avg(H, src_mask)
    elif mode == "attn":
        pool, rho = aggregate_attn(H, src_mask, net.attn_w, net.attn_b)
    else:
        hmax, argmax = aggregate_max(H, src_mask)
        hatt, rho = aggregate_attn(H, src_mask, net.attn_w, net.attn_b)
        pool = ag.concat([hmax, hatt], axis=-1)
    return pool, argmax, rho


def output_logits(pooled: Tensor, net: PervasiveNetwork) -> Tensor:
    """Vocabulary energies; tied mode projects to ``d_t`` then uses the target table."""
    if pooled.shape[-1] != net.config.pooled_channels:
        raise ValueError(f"pooled features have {pooled.shape[-1]} channels, "
                         f"projection expects {net.config.pooled_channels}")
    h = net.proj(pooled)
    if net.config.tie_target_embedding:
        h = ag.linear(h, net.tgt_embed.weight)
    return h


def implicit_alignment(H: np.ndarray, argmax: np.ndarray, e_rows: np.ndarray) -> np.ndarray:
    """Per-source-position share of each row's energy.

    ``H`` is ``[B, T, S, F]``, ``argmax`` the ``[B, T, F]`` max-pool positions and
    ``e_rows`` the ``[B, T, F]`` output-matrix rows of the token scored at each
    target row. Channel ``d`` of row ``i`` contributes ``E[w, d] * H[i, j, d]`` to
    the source position ``j`` that won its max.
    """
    B, T, S, F = H.shape
    if argmax.shape != (B, T, F) or e_rows.shape != (B, T, F):
        raise ValueError(f"alignment inputs mismatch: H {H.shape}, argmax {argmax.shape}, E {e_rows.shape}")
    picked = np.take_along_axis(H, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    contrib = (e_rows * picked).astype(np.float64)
    alpha = np.zeros((B, T, S), dtype=np.float64)
    bi, ti, _ = np.indices((B, T, F))
    np.add.at(alpha, (bi, ti, argmax), contrib)
    return alpha


def extract_alignment(net: PervasiveNetwork, act: GridActivations, tokens: np.ndarray) -> np.ndarray:
    """Implicit alignment ``alpha[b, i, j]`` for the given token per target row."""
    if not net.config.uses_max or act.argmax is None:
        raise ValueError(f"alignment extraction needs max aggregation, model uses {net.config.aggregation!r}")
    F = net.config.f_L
    E = net.output_matrix()[:, :F]
    tokens = np.asarray(tokens)
    return implicit_alignment(act.features.data, act.argmax, E[tokens])


def forward_training(batch, net: PervasiveNetwork) -> tuple[Tensor, GridActivations]:
    """Logits ``[B, T, V]`` for a :class:`~pervasive.data.batching.Batch`."""
    return net.forward(batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)
