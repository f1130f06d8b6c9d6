"""Dense tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every op is a plain
numpy computation, which is what inference and decoding use.

Broadcasting is deliberately narrow: two operands must have the same shape,
or one of them may replace a suffix of the other's axes by singletons
(``[B, T, S, C]`` with ``[B, T, S, 1]``).  Anything else needs an explicit
reshape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []


class Tensor:
    """A numpy array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, index: getitem(self, index)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded in
    execution order, which is a valid topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(self, loss, params)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss`` through ``tape``.

    Sets ``.grad`` on every leaf tensor that requires a gradient and was
    reached. Tensors in ``params`` that were not reached receive zeros.
    Returns a map from each such tensor to its gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        out[t] = t.grad
    for p in params or ():
        if p not in out:
            p.grad = np.zeros_like(p.data)
            out[p] = p.grad
    tape.nodes.clear()
    return out


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record the op if any tensor input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.record(tuple(inputs), out, backward_fn)
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    for big, small in ((a, b), (b, a)):
        if len(big) == len(small):
            k = len(small)
            while k > 0 and small[k - 1] == 1:
                k -= 1
            if small[:k] == big[:k]:
                return big
    raise ValueError(f"shape mismatch: {a} vs {b} (only trailing singleton axes broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0
    return _make(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * gate,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"shape mismatch in concat: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype), (a,), bw)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce_max_argmax(x: Tensor, axis: int, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` and the position attaining it.

    ``mask`` (broadcastable to ``x``) marks allowed positions; masked
    positions behave as -inf. Ties resolve to the lowest index. The gradient
    flows only to the selected positions.
    """
    axis = _check_axis(x, axis)
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("every slice needs at least one unmasked position")
        data = np.where(mask, data, -np.inf)
    idx = np.argmax(data, axis=axis)
    vals = np.take_along_axis(data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(vals.astype(dtype, copy=False), (x,), bw), idx


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked positions get exactly zero mass."""
    axis = _check_axis(x, axis)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("every softmax slice needs at least one unmasked position")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y.astype(x.dtype, copy=False), (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"shape mismatch in linear: input {x.shape}, weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    y = x2 @ w.T
    if bias is not None:
        y += bias.data
    out_shape = lead + (w.shape[0],)

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(y.reshape(out_shape), inputs, bw)


def embedding(weight: Tensor, ids: np.ndarray, frozen_row: int | None = None) -> Tensor:
    """Row lookup ``weight[ids]``; ``frozen_row`` never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        if frozen_row is not None:
            full[frozen_row] = 0
        return (full,)

    return _make(weight.data[ids], (weight,), bw)


def conv2d_causal(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad_top: bool = True) -> Tensor:
    """2D convolution over a channels-last grid ``[B, T, S, C_in]``.

    ``weight`` is ``[C_out, C_in, kt, ks]``. The target axis is padded with
    ``kt - 1`` zero rows on top only, so output row ``i`` sees input rows
    ``i - kt + 1 .. i``; the source axis gets ``ks // 2`` zero columns on each
    side. With ``pad_top=False`` no rows are added and the output has
    ``T - kt + 1`` rows (used for single-row incremental steps).
    """
    B, T, S, C = x.shape
    cout, cin, kt, ks = weight.shape
    if C != cin:
        raise ValueError(f"channel mismatch: input has {C}, layer expects {cin}")
    if kt == 1 and ks == 1:
        return _conv1x1(x, weight, bias)
    p = ks // 2
    top = kt - 1 if pad_top else 0
    Tout = T + top - kt + 1
    if Tout < 1:
        raise ValueError(f"need at least {kt} rows without top padding, got {T}")
    xp = np.zeros((B, T + top, S + 2 * p, C), dtype=x.dtype)
    xp[:, top:, p:p + S] = x.data
    cols = np.empty((B, Tout, S, kt, ks, C), dtype=x.dtype)
    for a in range(kt):
        for b in range(ks):
            cols[:, :, :, a, b] = xp[:, a:a + Tout, b:b + S]
    cols2 = cols.reshape(B * Tout * S, kt * ks * C)
    wm = weight.data.transpose(2, 3, 1, 0).reshape(kt * ks * C, cout)
    y = cols2 @ wm
    if bias is not None:
        y += bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(kt, ks, C, cout).transpose(3, 2, 0, 1) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm.T).reshape(B, Tout, S, kt, ks, C)
            gxp = np.zeros_like(xp)
            for a in range(kt):
                for b in range(ks):
                    gxp[:, a:a + Tout, b:b + S] += gcols[:, :, :, a, b]
            gx = gxp[:, top:, p:p + S]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(y.reshape(B, Tout, S, cout), inputs, bw)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    cout, cin = weight.shape[:2]
    w2d = weight.data.reshape(cout, cin)
    x2 = x.data.reshape(-1, cin)
    y = x2 @ w2d.T
    if bias is not None:
        y += bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w2d).reshape(x.shape) if x.requires_grad else None
        gw = (g2.T @ x2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(y.reshape(x.shape[:-1] + (cout,)), inputs, bw)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, mask: np.ndarray, eps: float):
    """Normalize the last axis with statistics over cells where ``mask`` holds.

    Returns the output tensor together with the batch mean and (biased)
    variance so callers can update running statistics.
    """
    C = x.shape[-1]
    m = np.asarray(mask, dtype=bool).reshape(-1)
    x2 = x.data.reshape(-1, C)
    n = int(m.sum())
    if n == 0:
        raise ValueError("batch norm needs at least one valid cell")
    xv = x2[m]
    mean = xv.mean(axis=0)
    var = ((xv - mean) ** 2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mean) * inv
    y = xhat * gamma.data + beta.data
    mf = m.astype(x.dtype)[:, None]

    def bw(g):
        g2 = g.reshape(-1, C)
        gg = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        # mean/var depend on valid cells only, but every output reads them
        dvar = (dxhat * (x2 - mean)).sum(axis=0) * -0.5 * inv ** 3
        dmean = -(dxhat * inv).sum(axis=0) - 2.0 * dvar * ((x2 - mean) * mf).sum(axis=0) / n
        dx = dxhat * inv + mf * (dmean / n + 2.0 * dvar * (x2 - mean) / n)
        return dx.reshape(x.shape), gg, gbeta

    out = _make(y.reshape(x.shape).astype(x.dtype, copy=False), (x, gamma, beta), bw)
    return out, mean, var


def affine_channels(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """``x * scale_ + shift`` with per-channel (last axis) vectors."""
    C = x.shape[-1]
    if scale_.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"shape mismatch: input {x.shape}, channel params {scale_.shape}, {shift.shape}")
    x2 = x.data.reshape(-1, C)

    def bw(g):
        g2 = g.reshape(-1, C)
        return ((g2 * scale_.data).reshape(x.shape),
                (g2 * x2).sum(axis=0) if scale_.requires_grad else None,
                g2.sum(axis=0) if shift.requires_grad else None)

    return _make((x2 * scale_.data + shift.data).reshape(x.shape), (x, scale_, shift), bw)


# -- oracle -----------------------------------------------------------------

def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)

    def value() -> float:
        v = f(x)
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise ValueError(f"function value is not finite: {v}")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value()
        flat[i] = orig - eps
        lo = value()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def outer_concat(rows: Tensor, cols: Tensor) -> Tensor:
    """Pairwise concatenation ``out[b, i, j] = [rows[b, i] ; cols[b, j]]``.

    ``rows`` is ``[B, T, Dr]`` and ``cols`` is ``[B, S, Dc]``; the result is
    ``[B, T, S, Dr + Dc]``.
    """
    if rows.ndim != 3 or cols.ndim != 3 or rows.shape[0] != cols.shape[0]:
        raise ValueError(f"shape mismatch in outer_concat: {rows.shape} vs {cols.shape}")
    B, T, dr = rows.shape
    S, dc = cols.shape[1], cols.shape[2]
    out = np.empty((B, T, S, dr + dc), dtype=np.result_type(rows.dtype, cols.dtype))
    out[..., :dr] = rows.data[:, :, None, :]
    out[..., dr:] = cols.data[:, None, :, :]

    def bw(g):
        return g[..., :dr].sum(axis=2), g[..., dr:].sum(axis=1)

    return _make(out, (rows, cols), bw)


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[-1]:
        raise ValueError(f"split sizes {list(sizes)} do not cover last axis of {x.shape}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        def bw(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return (full,)
        outs.append(_make(np.ascontiguousarray(x.data[..., lo:hi]), (x,), bw))
    return outs
