"""Small reverse-mode autodiff over numpy arrays.

Every op result records its parents and a closure that pushes the upstream
gradient back to them. ``backward`` walks the recorded nodes in reverse
creation order, so each node is visited exactly once after all of its
consumers.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_counter = itertools.count()
_debug = False


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class ContractError(RuntimeError):
    """Caller broke an API precondition (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced while debug checking is on."""


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Raise NonFiniteError as soon as an op produces a non-finite value."""
    global _debug
    prev, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._id = next(_counter)
        self.op = op
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by {op}")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- graph plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def _make(data, parents, op, backward_fn) -> Tensor:
    live = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    out = Tensor(data, requires_grad=bool(live), _parents=live, op=op)
    if live:
        out._backward = backward_fn
    return out


def _data(x, like: np.ndarray | None = None):
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return arr


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)

    # reverse creation order is a valid reverse topological order
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    upstream = {loss._id: np.ones_like(loss.data)}
    for node in order:
        g = upstream.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if parent._id in upstream:
                upstream[parent._id] = upstream[parent._id] + pg
            else:
                upstream[parent._id] = pg
    return loss


# -- ops ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = ad @ bd

    def bw(g):
        res = []
        for p in node._parents:
            if p is a:
                res.append(g @ bd.T)
            else:
                res.append(ad.T @ g)
        return res

    node = _make(out, (a, b), "matmul", bw)
    if a is b and node._parents:
        # x @ x: both operand slots point at the same tensor
        node._parents = (a,)
        node._backward = lambda g: [g @ bd.T + ad.T @ g]
    return node


def add_bias(x, b) -> Tensor:
    """x[N, D] + b[D], or x[N, C, H, W] + b[C] (per-channel)."""
    xd, bd = _data(x), _data(b)
    if bd.ndim != 1:
        raise ShapeError("bias must be 1-d")
    if xd.ndim == 2 and xd.shape[1] == bd.shape[0]:
        out, axes, view = xd + bd, (0,), bd
    elif xd.ndim == 4 and xd.shape[1] == bd.shape[0]:
        view = bd.reshape(1, -1, 1, 1)
        out, axes = xd + view, (0, 2, 3)
    else:
        raise ShapeError(f"add_bias: bias {bd.shape} does not fit input {xd.shape}")

    def bw(g):
        return [g if p is x else g.sum(axis=axes) for p in node._parents]

    node = _make(out, (x, b), "add_bias", bw)
    return node


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    ad = _data(a)
    bd = _data(b, ad)
    if np.ndim(bd) == 0 and not isinstance(b, Tensor):
        out = ad + bd
        return _make(out, (a,), "add_scalar", lambda g: [g])
    _check_same(ad, bd, "add")
    out = ad + bd

    def bw(g):
        return [g for _ in node._parents]

    node = _make(out, (a, b), "add", bw)
    return node


def neg(a) -> Tensor:
    return _make(-_data(a), (a,), "neg", lambda g: [-g])


def sub(a, b) -> Tensor:
    ad = _data(a)
    bd = _data(b, ad)
    if np.ndim(bd) == 0 and not isinstance(b, Tensor):
        return _make(ad - bd, (a,), "sub_scalar", lambda g: [g])
    _check_same(ad, bd, "sub")

    def bw(g):
        return [g if p is a else -g for p in node._parents]

    node = _make(ad - bd, (a, b), "sub", bw)
    if a is b and node._parents:
        node._parents = (a,)
        node._backward = lambda g: [np.zeros_like(g)]
    return node


def mul(a, b) -> Tensor:
    ad = _data(a)
    bd = _data(b, ad)
    if not isinstance(b, Tensor):
        if np.ndim(bd) != 0:
            _check_same(ad, bd, "mul")
        return _make(ad * bd, (a,), "mul_const", lambda g: [g * bd])
    _check_same(ad, bd, "mul")
    if a is b:
        return _make(ad * ad, (a,), "square", lambda g: [2.0 * ad * g])

    def bw(g):
        return [g * bd if p is a else g * ad for p in node._parents]

    node = _make(ad * bd, (a, b), "mul", bw)
    return node


def square(a) -> Tensor:
    ad = _data(a)
    return _make(ad * ad, (a,), "square", lambda g: [2.0 * ad * g])


def relu(a) -> Tensor:
    ad = _data(a)
    mask = ad > 0
    return _make(np.where(mask, ad, 0).astype(ad.dtype), (a,), "relu", lambda g: [g * mask])


def tsum(a) -> Tensor:
    ad = _data(a)
    return _make(ad.sum(), (a,), "sum", lambda g: [np.broadcast_to(g, ad.shape).copy()])


def mean(a) -> Tensor:
    ad = _data(a)
    n = ad.size
    return _make(ad.mean(), (a,), "mean", lambda g: [np.full(ad.shape, g / n, dtype=ad.dtype)])


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    out = ad.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: [g.reshape(ad.shape)])


def flatten(a) -> Tensor:
    ad = _data(a)
    return reshape(a, (ad.shape[0], -1))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under softmax(logits).

    ``reduction='sum'`` gives per-sample-additive loss; attacks use it so
    each input gradient is independent of batch size.
    """
    ld = _data(logits)
    labels = np.asarray(labels)
    if ld.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {ld.shape}")
    n, c = ld.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = ld - ld.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.asarray(nll.sum() * scale, dtype=ld.dtype)

    def bw(g):
        p = softmax(ld)
        p[np.arange(n), labels] -= 1.0
        return [(p * (g * scale)).astype(ld.dtype)]

    return _make(out, (logits,), "softmax_xent", bw)


# -- convolution via im2col ----------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col_indices(c, h, w, kh, kw, stride, pad):
    oh = _conv_out(h, kh, stride, pad)
    ow = _conv_out(w, kw, stride, pad)
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(ow), oh)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return k, i, j, oh, ow


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[F,C,kh,kw] (no bias)."""
    xd, wd = _data(x), _data(w)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ValueError(f"conv2d: padding must be a non-negative int, got {padding!r}")
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {xd.shape}, {wd.shape}")
    n, c, h, wi = xd.shape
    f, c2, kh, kw = wd.shape
    if c != c2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c2}")
    if kh > h + 2 * padding or kw > wi + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")

    k, i, j, oh, ow = _im2col_indices(c, h, wi, kh, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = xp[:, k, i, j]  # N x (C*kh*kw) x (oh*ow)
    wmat = wd.reshape(f, -1)
    out = np.einsum("fk,nkp->nfp", wmat, cols, optimize=True).reshape(n, f, oh, ow)

    def bw(g):
        gm = g.reshape(n, f, oh * ow)
        res = []
        for p in node._parents:
            if p is w:
                gw = np.einsum("nfp,nkp->fk", gm, cols, optimize=True)
                res.append(gw.reshape(wd.shape))
            else:
                gcols = np.einsum("fk,nfp->nkp", wmat, gm, optimize=True)
                gxp = np.zeros_like(xp)
                np.add.at(gxp, (slice(None), k, i, j), gcols)
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                res.append(gxp)
        return res

    node = _make(out, (x, w), "conv2d", bw)
    return node
