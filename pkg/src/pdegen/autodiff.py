"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operators needed by the generator and the residual loss are
provided. All reductions run in a fixed index order for a given shape, so a
backward pass over the same graph is bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5

DTYPES = {32: np.float32, 64: np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient is NaN or Inf."""


def dtype_for(precision: int) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision!r}") from None


class Tensor:
    """A node in the computation graph.

    ``data`` is the forward value. ``grad`` is filled in by :func:`backward`
    for every node that requires a gradient.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (),
                  backward_fn=backward_fn if req else None, op=op)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first).

    Parents are visited in declaration order, so the ordering (and hence the
    gradient accumulation order) is a pure function of the graph structure.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Tensor, seed=None) -> None:
    """Populate ``.grad`` on every node that requires one."""
    if not root.requires_grad:
        raise ValueError("backward() called on a tensor that does not require grad")
    order = topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.dtype)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _check_same_shape(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (np.where(mask, g, 0).astype(g.dtype),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # split form avoids exp overflow for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(out, (a,), bw, "mean")


def mse(a, b) -> Tensor:
    """Mean of squared differences over all entries."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "mse")
    return mean(square(sub(a, b)))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def crop(a: Tensor, index) -> Tensor:
    """Basic (slice-based) indexing with a scatter backward."""
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), bw, "crop")


def crop_interior(a: Tensor) -> Tensor:
    """Drop a one-cell border from the last two axes."""
    return crop(a, (Ellipsis, slice(1, -1), slice(1, -1)))


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [B, in] and ``w`` of shape [in, out]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "dense")


def _pad_replicate(x: np.ndarray, r: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")


def _unpad_replicate(g: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of replicate padding: fold border gradients onto the edge cells."""
    g = g.copy()
    for _ in range(r):
        g[:, :, 1, :] += g[:, :, 0, :]
        g[:, :, -2, :] += g[:, :, -1, :]
        g = g[:, :, 1:-1, :]
        g[:, :, :, 1] += g[:, :, :, 0]
        g[:, :, :, -2] += g[:, :, :, -1]
        g = g[:, :, :, 1:-1]
    return np.ascontiguousarray(g)


def conv2d(x: Tensor, w: Tensor, padding: str = "same", bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of ``x`` [B,Cin,H,W] with ``w`` [Cout,Cin,k,k], k in {1, 3}.

    ``same`` pads by replicating edge values; ``valid`` shrinks each spatial
    extent by ``k - 1``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [B,C,H,W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D [Cout,Cin,k,k], got shape {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel spatial size must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels (dim 1) = {x.shape[1]} but kernel expects {cin}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    B, _, H, W = x.shape
    if kh == 3 and (H < 3 or W < 3):
        dim = 2 if H < 3 else 3
        raise ShapeError(f"conv2d: input {'HW'[dim - 2]} (dim {dim}) has extent {x.shape[dim]} < 3")
    r = kh // 2
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if kh == 1:
        # [B,Cin,H,W] x [Cout,Cin] -> [B,H,W,Cout]
        wm = w.data[:, :, 0, 0]
        out = np.tensordot(x.data, wm, axes=([1], [1])).transpose(0, 3, 1, 2)

        def bw(g):
            gx = np.tensordot(g, wm, axes=([1], [0])).transpose(0, 3, 1, 2)
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            grads = [np.ascontiguousarray(gx), gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)
    else:
        xp = _pad_replicate(x.data, r) if padding == "same" else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,Cin,Ho,Wo,k,k]
        Ho, Wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, cin * kh * kw)
        wm = w.data.reshape(cout, cin * kh * kw)
        out = (cols @ wm.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

        def bw(g):
            gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
            gw = (gm.T @ cols).reshape(w.shape)
            gcols = (gm @ wm).reshape(B, Ho, Wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = _unpad_replicate(gxp, r) if padding == "same" else gxp
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)

    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(np.ascontiguousarray(out), (x,), bw, "upsample2x")


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics."""

    channels: int
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    dtype: np.dtype = np.float64

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ValueError(f"batch-norm momentum must be in (0, 1], got {self.momentum}")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=self.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train", update_stats: bool = True) -> Tensor:
    """Per-channel normalization of a [B,C,H,W] tensor.

    In ``train`` mode the batch statistics are used and, if ``update_stats``,
    the running statistics are updated by an exponential moving average.
    ``eval`` mode normalizes with the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: input must be 4-D, got shape {x.shape}")
    B, C = x.shape[:2]
    if C != state.channels or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: channel count mismatch, input has {C}, state has {state.channels}")
    shape = (1, C, 1, 1)
    if mode == "train":
        if B < 2:
            raise ValueError(f"batchnorm: train mode needs a batch of at least 2, got {B}")
        m = x.data.size // C
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        if update_stats:
            mom = state.momentum
            state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
            state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
        xc = x.data - mu.reshape(shape)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    invstd = (1 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = xc * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if mode == "eval":
            dx = dxhat * invstd.reshape(shape)
        else:
            mean_dxhat = dxhat.mean(axis=(0, 2, 3)).reshape(shape)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3)).reshape(shape)
            dx = invstd.reshape(shape) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# verification


def grad_check(builder: Callable[[np.ndarray], Tensor], point: Sequence[float], h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``builder`` receives a float64 leaf :class:`Tensor` holding the parameter
    vector and must return a scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    theta = np.array(point, dtype=np.float64)
    leaf = Tensor(theta.copy(), requires_grad=True)
    loss = builder(leaf)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: loss is not finite at the probe point")
    backward(loss)
    analytic = np.zeros_like(theta) if leaf.grad is None else leaf.grad.reshape(theta.shape)
    worst = 0.0
    for k in range(theta.size):
        tp = theta.copy()
        tp.flat[k] += h
        tm = theta.copy()
        tm.flat[k] -= h
        fp = float(builder(Tensor(tp)).data)
        fm = float(builder(Tensor(tm)).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: loss is not finite when probing coordinate {k}")
        numeric = (fp - fm) / (2 * h)
        a = analytic.flat[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t
