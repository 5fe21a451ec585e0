"""Tape-based reverse-mode differentiation over numpy arrays.

Operations record onto the innermost active :class:`Tape`. Outside a tape,
the same functions just compute values, which is the inference path.

    params = ParameterSet(...)
    with Tape() as tape:
        loss = f(tape.param("w", params["w"]))
    grads = tape.backward(loss)          # {"w": dL/dw}
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from . import tensor as tc


class UnrecordedOpError(RuntimeError):
    """Raised when backward reaches a value whose producing op is not on the tape."""


class Var:
    """A value in the computation graph."""

    __slots__ = ("value", "requires_grad", "op", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, op: str = "const", name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def __getitem__(self, idx):
        return getitem(self, idx)


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


_TAPES: list["Tape"] = []


class Tape:
    """Records operations in execution order; one tape per training step."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: OrderedDict[str, Var] = OrderedDict()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a trainable leaf. Repeated requests return the same Var."""
        v = self.params.get(name)
        if v is None:
            v = Var(value, requires_grad=True, op="param", name=name)
            v._tape = self
            self.params[name] = v
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every parameter on this tape."""
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UnrecordedOpError(f"loss produced by op {loss.op!r} was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Var) or not p.requires_grad:
                    continue
                if p._tape is not self:
                    raise UnrecordedOpError(
                        f"op {p.op!r} feeding {node.op!r} was not recorded on this tape"
                    )
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        out = OrderedDict()
        for name, v in self.params.items():
            g = grads.get(id(v))
            out[name] = np.zeros_like(v.value) if g is None else np.asarray(g, dtype=v.value.dtype).reshape(v.shape)
        return out


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value, parents, backward: Callable, op: str) -> Var:
    tape = _active()
    needs = tape is not None and any(isinstance(p, Var) and p.requires_grad for p in parents)
    out = Var(value, requires_grad=needs, op=op)
    if needs:
        out._tape = tape
        tape.nodes.append(_Node(out, parents, backward, op))
    return out


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _record(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)), "add")


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _record(av - bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)), "sub")


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _record(
        av * bv,
        (a, b),
        lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)),
        "mul",
    )


def square(a) -> Var:
    av = _val(a)
    return _record(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def gelu(a) -> Var:
    """Tanh-approximated GELU."""
    x = _val(a)
    c = x.dtype.type(np.sqrt(2.0 / np.pi)) if x.dtype.kind == "f" else np.sqrt(2.0 / np.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(y, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    av = _val(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(av.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    av = _val(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).copy(),)

    return _record(av.mean(axis=axis, keepdims=keepdims), (a,), bw, "mean")


def reshape(a, shape) -> Var:
    av = _val(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def transpose(a, axes) -> Var:
    av = _val(a)
    inv = np.argsort(axes)
    return _record(av.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Var:
    av = _val(a)

    def bw(g):
        out = np.zeros_like(av)
        out[idx] = g
        return (out,)

    return _record(av[idx], (a,), bw, "getitem")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)

    def bw(g):
        ga = gb = None
        if isinstance(a, Var) and a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if isinstance(b, Var) and b.requires_grad:
            gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(av @ bv, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Var:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    xv, wv = _val(x), _val(w)
    shp = xv.shape
    x2 = xv.reshape(-1, shp[-1])
    y = x2 @ wv
    if b is not None:
        y = y + _val(b)

    def bw(g):
        g2 = g.reshape(-1, wv.shape[1])
        gx = (g2 @ wv.T).reshape(shp) if isinstance(x, Var) and x.requires_grad else None
        gw = x2.T @ g2 if isinstance(w, Var) and w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _record(y.reshape(shp[:-1] + (wv.shape[1],)), (x, w, b), bw, "linear")


def softmax(a, axis: int = -1) -> Var:
    av = _val(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), bw, "softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Var:
    """Normalize over the last axis, then scale and shift."""
    x = _val(a)
    gv, bv = _val(gamma), _val(beta)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gv + bv

    def bw(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(y, (a, gamma, beta), bw, "layer_norm")


def rope(a, cos: np.ndarray, sin: np.ndarray) -> Var:
    """Rotate consecutive feature pairs ``(x[2i], x[2i+1])`` by per-position angles.

    ``cos``/``sin`` broadcast against ``(..., L, d/2)``.
    """
    x = _val(a)
    xe, xo = x[..., 0::2], x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _record(y, (a,), bw, "rope")


# ---------------------------------------------------------------- convolution / padding


def conv2d(x, w, stride: int, pad: int = 0) -> Var:
    xv, wv = _val(x), _val(w)
    k = wv.shape[0]

    def bw(g):
        gx = gw = None
        if isinstance(x, Var) and x.requires_grad:
            full = tc.conv_transpose2d(g, wv, stride, crop=pad)
            # floor in the output-size formula can drop trailing rows/cols
            gx = np.zeros_like(xv)
            gx[:, : full.shape[1], : full.shape[2]] = full
        if isinstance(w, Var) and w.requires_grad:
            gw = tc.conv2d_weight_grad(xv, g, k, stride, pad)
        return gx, gw

    return _record(tc.conv2d(xv, wv, stride, pad), (x, w), bw, "conv2d")


def conv_transpose2d(y, w, stride: int, crop: int = 0) -> Var:
    yv, wv = _val(y), _val(w)
    k = wv.shape[0]

    def bw(g):
        gy = gw = None
        if isinstance(y, Var) and y.requires_grad:
            gy = tc.conv2d(g, wv, stride, pad=crop)
        if isinstance(w, Var) and w.requires_grad:
            gw = tc.conv2d_weight_grad(g, yv, k, stride, pad=crop)
        return gy, gw

    return _record(tc.conv_transpose2d(yv, wv, stride, crop), (y, w), bw, "conv_transpose2d")


def pad_fill(x, token, p: int) -> Var:
    """Pad H and W of ``(B, H, W, C)`` by ``p`` with a per-channel vector ``token``."""
    xv, tv = _val(x), _val(token)
    B, H, W, C = xv.shape
    out = np.empty((B, H + 2 * p, W + 2 * p, C), dtype=np.result_type(xv, tv))
    out[...] = tv
    out[:, p : p + H, p : p + W] = xv

    def bw(g):
        gx = g[:, p : p + H, p : p + W]
        border = g.sum(axis=(0, 1, 2)) - gx.sum(axis=(0, 1, 2))
        return gx.copy(), border

    return _record(out, (x, token), bw, "pad_fill")


def pad_periodic(x, p: int) -> Var:
    xv = _val(x)
    out = np.pad(xv, ((0, 0), (p, p), (p, p), (0, 0)), mode="wrap")
    return _record(out, (x,), lambda g: (_fold(g, p),), "pad_periodic")


def _fold(g: np.ndarray, p: int) -> np.ndarray:
    """Sum a periodically padded ``(B, H+2p, W+2p, C)`` array back onto ``(B, H, W, C)``."""
    H, W = g.shape[1] - 2 * p, g.shape[2] - 2 * p
    rows = (np.arange(H + 2 * p) - p) % H
    cols = (np.arange(W + 2 * p) - p) % W
    tmp = np.zeros((g.shape[0], H, W + 2 * p, g.shape[3]), dtype=g.dtype)
    np.add.at(tmp, (slice(None), rows), g)
    out = np.zeros((g.shape[0], H, W, g.shape[3]), dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), cols), tmp)
    return out


def fold_periodic(x, p: int) -> Var:
    """Adjoint of :func:`pad_periodic`: wrap the ``p``-wide border onto the interior."""
    xv = _val(x)
    if xv.shape[1] <= 2 * p or xv.shape[2] <= 2 * p:
        raise ValueError(f"fold width {p} too large for {xv.shape}")
    return _record(
        _fold(xv, p), (x,), lambda g: (np.pad(g, ((0, 0), (p, p), (p, p), (0, 0)), mode="wrap"),), "fold_periodic"
    )


def pad_zero(x, p: int) -> Var:
    xv = _val(x)
    out = np.pad(xv, ((0, 0), (p, p), (p, p), (0, 0)))
    H, W = xv.shape[1], xv.shape[2]
    return _record(out, (x,), lambda g: (g[:, p : p + H, p : p + W].copy(),), "pad_zero")


# ---------------------------------------------------------------- parameters and checks


class ParameterSet(OrderedDict):
    """Named parameter arrays. Names are dotted paths, unique by construction."""

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        super().__setitem__(name, value)

    def replace(self, name: str, value: np.ndarray) -> None:
        OrderedDict.__setitem__(self, name, value)

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self.items():
            out[k] = v.copy()
        return out

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self.items():
            out[k] = v.astype(dtype)
        return out


def value_and_grad(f: Callable[[Tape], Var], params: ParameterSet):
    """Evaluate ``f`` on a fresh tape and return ``(loss, grads)``."""
    with Tape() as tape:
        loss = f(tape)
    return float(loss.value), tape.backward(loss)


def _fd_coords(shape, per_tensor: int | None, rng) -> Iterator[tuple]:
    n = int(np.prod(shape))
    if per_tensor is None or per_tensor >= n:
        idx = range(n)
    else:
        idx = sorted(rng.choice(n, size=per_tensor, replace=False))
    for i in idx:
        yield np.unravel_index(i, shape)


def fd_check(
    f: Callable[[Tape], Var],
    params: ParameterSet,
    h: float = 1e-5,
    per_tensor: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds the scalar loss from ``tape.param(name, params[name])``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``per_tensor`` limits the number of probed coordinates per parameter.
    """
    loss, grads = value_and_grad(f, params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"parameter {name} has non-finite entries")
        for ix in _fd_coords(p.shape, per_tensor, rng):
            old = p[ix]
            p[ix] = old + h
            fp = float(f(_NullTape(params)).value)
            p[ix] = old - h
            fm = float(f(_NullTape(params)).value)
            p[ix] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}{list(ix)}")
            num = (fp - fm) / (2 * h)
            ana = float(grads[name][ix]) if name in grads else 0.0
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


class _NullTape:
    """Stand-in passed to ``f`` during finite differencing: params are plain constants."""

    def __init__(self, params):
        self._params = params

    def param(self, name, value):
        return Var(value)
