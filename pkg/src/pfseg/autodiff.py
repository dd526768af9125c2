"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are channels-first ``(C, W, H, D)`` for volumetric data; no batch
axis is carried because training runs at batch size 1. Elementwise ops
require equal shapes; the only broadcasting allowed is against a scalar.

Every op records a closure that maps the output gradient onto its inputs.
:func:`Tensor.backward` orders the recorded graph topologically and runs the
closures once each, in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


_GRAD_ENABLED = True
_SCOPE: list[str] = []
_PROFILERS: list["OpProfile"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def scope(name: str):
    """Tag every op executed inside the block with ``name`` (nestable)."""
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


@dataclass
class OpRecord:
    op: str
    scope: str
    elements: int


@dataclass
class OpProfile:
    """Collects one :class:`OpRecord` per executed op while active."""

    records: list[OpRecord] = field(default_factory=list)

    def count(self, scope_prefix: str = "", op: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if r.scope.startswith(scope_prefix) and (op is None or r.op == op)
        )

    def activation_elements(self) -> int:
        return sum(r.elements for r in self.records)


@contextlib.contextmanager
def profile():
    prof = OpProfile()
    _PROFILERS.append(prof)
    try:
        yield prof
    finally:
        _PROFILERS.remove(prof)


class Tensor:
    """A node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _record(out_data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _PROFILERS:
        rec = OpRecord(op, "/".join(_SCOPE), int(out_data.size))
        for prof in _PROFILERS:
            prof.records.append(rec)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record(ad / bd, "div", (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, "square", (x,), lambda g: (2.0 * xd * g,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), "log", (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), "clip", (x,), lambda g: (g * inside,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    pos = xd > 0
    scale = np.where(pos, 1.0, slope).astype(xd.dtype)
    return _record(xd * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    dtype = x.dtype
    return _record(
        np.asarray(x.data.sum(dtype=np.float64), dtype=dtype),
        "reduce_sum",
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


def reduce_mean(x: Tensor) -> Tensor:
    shape, n, dtype = x.shape, x.size, x.dtype
    return _record(
        np.asarray(x.data.mean(dtype=np.float64), dtype=dtype),
        "reduce_mean",
        (x,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _record(x.data.T, "transpose", (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _record(
        np.concatenate([a.data, b.data], axis=0),
        "concat",
        (a, b),
        lambda g: (g[:ca], g[ca:]),
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop].copy(), "slice", (x,), backward)


# ---------------------------------------------------------------- volumetric


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[C_in,W,H,D]`` with ``weight[C_out,C_in,k,k,k]``."""
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d: expected input rank 4 and kernel rank 5, got {x.shape} and {weight.shape}")
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[0] != cin:
        raise ShapeError(f"conv3d: input {x.shape} has {x.shape[0]} channels, kernel {weight.shape} expects {cin}")
    if weight.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic, got {weight.shape}")
    spatial = x.shape[1:]
    out_sp = tuple(_out_extent(n, k, stride, padding) for n in spatial)
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel {k} stride {stride} padding {padding}")
    n_out = out_sp[0] * out_sp[1] * out_sp[2]
    xd = x.data
    wmat = weight.data.reshape(cout, cin * k ** 3)

    if k == 1 and stride == 1 and padding == 0:
        cols = xd.reshape(cin, n_out)
    else:
        xp = np.pad(xd, ((0, 0),) + ((padding, padding),) * 3) if padding else xd
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
        win = win[:, ::stride, ::stride, ::stride][:, : out_sp[0], : out_sp[1], : out_sp[2]]
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(cin * k ** 3, n_out)

    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((cout,) + out_sp)

    def backward(g):
        g2 = g.reshape(cout, n_out)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if k == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(xd.shape)
            else:
                gcols = gcols.reshape((cin, k, k, k) + out_sp)
                padded = tuple(n + 2 * padding for n in spatial)
                gxp = np.zeros((cin,) + padded, dtype=g.dtype)
                ow, oh, od = out_sp
                s = stride
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            gxp[:, i : i + s * ow : s, j : j + s * oh : s, l : l + s * od : s] += gcols[:, i, j, l]
                if padding:
                    p = padding
                    gx = gxp[:, p:-p, p:-p, p:-p]
                else:
                    gx = gxp
                gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "conv3d", parents, backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes followed by an affine map."""
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    m = x.size // c
    if m < 2:
        raise ShapeError(f"instance_norm needs at least 2 spatial elements, got shape {x.shape}")
    xf = x.data.reshape(c, m)
    mu = xf.mean(axis=1, keepdims=True)
    xc = xf - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data[:, None], beta.data[:, None]
    out = (xhat * gd + bd).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(c, m)
        ggamma = (g2 * xhat).sum(axis=1)
        gbeta = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gh = g2 * gd
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            gx = gx.reshape(x.shape).astype(g.dtype, copy=False)
        return gx, ggamma.astype(g.dtype), gbeta.astype(g.dtype)

    return _record(out.astype(x.dtype, copy=False), "instance_norm", (x, gamma, beta), backward)


def max_pool3d(x: Tensor, size: int = 2) -> Tensor:
    c, w, h, d = x.shape
    if w % size or h % size or d % size:
        raise ShapeError(f"max_pool3d: spatial dims {x.shape[1:]} not divisible by {size}")
    s = size
    blocks = x.data.reshape(c, w // s, s, h // s, s, d // s, s).transpose(0, 1, 3, 5, 2, 4, 6)
    blocks = blocks.reshape(c, w // s, h // s, d // s, s ** 3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, w // s, h // s, d // s, s, s, s).transpose(0, 1, 4, 2, 5, 3, 6)
        return (gb.reshape(x.shape),)

    return _record(out, "max_pool3d", (x,), backward)


def linear_interp_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """``(factor*n, n)`` 1-D linear interpolation operator, align-corners=False."""
    m = np.zeros((factor * n, n), dtype=dtype)
    src = (np.arange(factor * n) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    rows = np.arange(factor * n)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _apply_separable(a: np.ndarray, mats: Sequence[np.ndarray]) -> np.ndarray:
    out = a
    for axis, mat in enumerate(mats, start=1):
        out = np.moveaxis(np.tensordot(mat, out, axes=(1, axis)), 0, axis)
    return np.ascontiguousarray(out)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear up-sampling by an integer factor (align-corners=False, edge clamped)."""
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_trilinear expects (C,W,H,D), got {x.shape}")
    mats = [linear_interp_matrix(n, factor, x.dtype) for n in x.shape[1:]]
    out = _apply_separable(x.data, mats)
    return _record(out, "upsample", (x,), lambda g: (_apply_separable(g, [m.T for m in mats]),))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place. Parameters without a gradient are left alone."""
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------- checking


GRADCHECK_FLOOR = 1e-3


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_error(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative deviation between analytic and finite-difference gradients.

    Per input the deviation is ``max|analytic - numeric|`` over the larger of
    the two gradient magnitudes, floored at ``GRADCHECK_FLOOR`` so inputs whose
    true gradient vanishes (a bias in front of a normalization) are judged on
    absolute error instead of on finite-difference noise. The maximum over
    inputs is returned.
    """
    for t in inputs:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_grad(f, t, eps)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), GRADCHECK_FLOOR)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
