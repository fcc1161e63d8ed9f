"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output cotangent to input cotangents. Each tensor carries
a creation sequence number; :func:`execution_order` sorts the reachable graph
by it, which is both a topological order and the order operations ran in.
``backward`` walks that list in reverse.

Broadcasting is deliberately narrow: elementwise operations accept
exact-shape operands or a 0-d scalar. Anything else goes through the explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from galnet.errors import ContractError, DimensionError, NumericError

_seq = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense array with an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
    return out


# graph traversal -------------------------------------------------------------


def execution_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through gradient-carrying edges, in the
    order they were created (the forward tape)."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.seq)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Interior tensors get their cotangent from this pass assigned to ``.grad``.
    Leaves accumulate across calls until zeroed.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(execution_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def detach(a: Tensor) -> Tensor:
    """Same values, no graph linkage: gradient never flows back through it."""
    return Tensor(a.data)


# elementwise -----------------------------------------------------------------


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.data.ndim == 0 and g.ndim else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a), _fit(g * a.data, b)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "mul": mul, "add": add, "sub": sub}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("mul", x, y)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# reductions and shape ops ----------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise IndexError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _reduce(a: Tensor, axes, keepdims: bool, scale: bool) -> Tensor:
    ax = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    out = a.data.sum(axis=ax, keepdims=keepdims)
    if scale:
        out = out / count
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))

    def fn(g):
        g = np.broadcast_to(g.reshape(kept_shape), a.shape)
        return ((g / count) if scale else g.copy(),)

    return _result(out, (a,), fn)


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op!r}")
    return _reduce(a, axes, keepdims, scale=op == "mean")


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _reduce(a, axes, keepdims, scale=False)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axes, keepdims, scale=True)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Numpy-style broadcast; backward sums over the expanded dimensions."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    lead = len(shape) - a.data.ndim
    expanded = tuple(i for i in range(len(shape)) if i < lead or a.shape[i - lead] == 1 != shape[i])

    def fn(g):
        g = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (g.reshape(a.shape),)

    return _result(out, (a,), fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _result(out, tuple(tensors), fn)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), fn)


# linear algebra and normalization -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d operands, or batched over identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.data.ndim < 2
        or a.data.ndim != b.data.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _result(np.matmul(a.data, b.data), (a, b), fn)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row softmax with max subtraction."""
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), fn)


softmax_rows = softmax


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize over every axis but the last using batch statistics.

    Returns the output plus the (biased) batch mean and variance so the caller
    can update running statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    n = x.size // x.shape[-1]
    mu = x.data.mean(axis=axes)
    hi = x.data.max(axis=axes)
    # a rounded mean of identical values can miss them by an ulp
    mu = np.where(hi == x.data.min(axis=axes), hi, mu)
    var = ((x.data - mu) ** 2).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def fn(g):
        dxhat = g * gamma.data
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), fn), mu, var


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor, mean: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    """Batch norm with fixed statistics (inference path)."""
    axes = tuple(range(x.data.ndim - 1))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = scale.data * xhat + shift.data

    def fn(g):
        return g * scale.data * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, scale, shift), fn)


# spatial ops (layout B x H x W x C) -----------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``kernel`` is kh x kw x Cin x Cout."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, H, W, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin} ({x.shape} vs {kernel.shape})")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kernel.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    k = kernel.data
    if kh == kw == 1:
        cols = xp[:, : stride * ho : stride, : stride * wo : stride, :]
        out = cols.reshape(-1, cin) @ k[0, 0]
        out = out.reshape(B, ho, wo, cout)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        # win: B, ho, wo, cin, kh, kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, kh * kw * cin)
        out = (cols @ k.reshape(kh * kw * cin, cout)).reshape(B, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def fn(g):
        g2 = g.reshape(-1, cout)
        if kh == kw == 1:
            dk = (cols.reshape(-1, cin).T @ g2).reshape(1, 1, cin, cout)
            dxp = np.zeros_like(xp)
            dxp[:, : stride * ho : stride, : stride * wo : stride, :] = (g2 @ k[0, 0].T).reshape(B, ho, wo, cin)
        else:
            dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
            dcols = (g2 @ k.reshape(kh * kw * cin, cout).T).reshape(B, ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, padding : padding + H, padding : padding + W, :] if padding else dxp
        db = g2.sum(axis=0) if bias is not None else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Ties route the gradient to the first maximum."""
    B, H, W, C = x.shape
    ho, wo = H // size, W // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d: window {size} too large for input {x.shape}")
    xc = x.data[:, : ho * size, : wo * size, :]
    blocks = xc.reshape(B, ho, size, wo, size, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, ho, wo, C, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        d = d.reshape(B, ho, wo, C, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(B, ho * size, wo * size, C)
        if d.shape != x.shape:
            full = np.zeros_like(x.data)
            full[:, : ho * size, : wo * size, :] = d
            d = full
        return (d,)

    return _result(out, (x,), fn)


# gradient checking -----------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is ``|a - n| / max(1e-8, |a| + |n|)``. ``indices`` restricts
    the check to a subset of flat positions; by default every entry is probed.
    ``x.data`` is perturbed in place and restored.
    """
    if h <= 0:
        raise ContractError("grad_check step must be positive")
    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data, order="C")
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("grad_check: f(x) is not finite")
    backward(y)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    positions = range(x.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
