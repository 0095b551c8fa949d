"""Array-level reverse-mode automatic differentiation on top of numpy.

Every op accepts plain ndarrays as well as :class:`Tensor`; with no Tensor
among its inputs an op returns a plain ndarray, so numerical code written
against this module runs unchanged in "audit" (numpy) and "training" (tape)
mode.  Only float64 is used.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def value(x):
    """Underlying array of a Tensor; anything else is returned unchanged."""
    return x.data if isinstance(x, Tensor) else x


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _make(data, parents, backward) -> Tensor:
    if not _tracked(*parents):
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _make(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _make(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = ad / bd
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)))


def neg(a):
    if not isinstance(a, Tensor):
        return np.negative(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    if not isinstance(a, Tensor):
        return np.square(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sin(a):
    if not isinstance(a, Tensor):
        return np.sin(a)
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a):
    if not isinstance(a, Tensor):
        return np.cos(a)
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Tensor):
        return np.abs(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a):
    if not isinstance(a, Tensor):
        return np.maximum(a, 0.0)
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def sigmoid(a):
    if not isinstance(a, Tensor):
        return expit(a)
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def hypot(a, b):
    """sqrt(a**2 + b**2) with a zero subgradient at the origin."""
    if not _any_tensor(a, b):
        return np.hypot(a, b)
    ad, bd = _data(a), _data(b)
    r = np.hypot(ad, bd)
    safe = np.where(r > 0, r, 1.0)
    ga = np.where(r > 0, ad / safe, 0.0)
    gb = np.where(r > 0, bd / safe, 0.0)
    return _make(r, (a, b), lambda g: (g * ga, g * gb))


# --- reductions / linear algebra ------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.data.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None):
    n = np.size(_data(a)) if axis is None else np.shape(_data(a))[axis]
    return div(sum(a, axis=axis), float(n)) if n else sum(a, axis=axis)


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    ad, bd = _data(a), _data(b)
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def layer_norm(x, scale, offset, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine map."""
    xd = _data(x)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    sd = _data(scale)
    out = xhat * sd + _data(offset)
    if not _any_tensor(x, scale, offset):
        return out

    def back(g):
        dxhat = g * sd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, scale, offset), back)


# --- indexing / graph ops --------------------------------------------------

def _scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(np.float64)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


def take(a, index):
    """Gather rows ``a[index]`` (index is an integer array)."""
    if not isinstance(a, Tensor):
        return np.asarray(a)[index]
    n = a.data.shape[0]
    return _make(a.data[index], (a,), lambda g: (_scatter(g, index, n),))


def segment_sum(a, segment_ids, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets."""
    if not isinstance(a, Tensor):
        return _scatter(np.asarray(a, dtype=np.float64), segment_ids, num_segments)
    return _make(_scatter(a.data, segment_ids, num_segments), (a,),
                 lambda g: (g[segment_ids],))


def concat(xs, axis=-1):
    if not _any_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    datas = [_data(x) for x in xs]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(xs), back)


def getitem(a, key):
    if not isinstance(a, Tensor):
        return a[key]
    shape = a.data.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), back)


def where(mask, a, b):
    """Select with a constant boolean mask."""
    m = np.asarray(mask, dtype=bool)
    if not _any_tensor(a, b):
        return np.where(m, a, b)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _make(np.where(m, ad, bd), (a, b),
                 lambda g: (_unbroadcast(np.where(m, g, 0.0), sa),
                            _unbroadcast(np.where(m, 0.0, g), sb)))


# --- driver ----------------------------------------------------------------

def backward(out: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``out`` w.r.t. every tracked tensor, keyed by ``id``."""
    if out.data.size != 1:
        raise ValueError("backward() needs a scalar output")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(out, False)]
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
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if isinstance(p, Tensor) and p.requires_grad and gp is not None:
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + gp
                else:
                    grads[k] = gp
    return grads


def value_and_grad(fn, params: dict[str, np.ndarray], *args, **kwargs):
    """Evaluate ``fn(tensors, *args)`` and return ``(value, aux, grads)``.

    ``fn`` must return either a scalar Tensor or ``(scalar Tensor, aux)``.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    res = fn(leaves, *args, **kwargs)
    loss, aux = res if isinstance(res, tuple) else (res, None)
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        return float(np.asarray(_data(loss))), aux, {k: np.zeros_like(v) for k, v in params.items()}
    gmap = backward(loss)
    grads = {k: gmap.get(id(t), np.zeros_like(t.data)).reshape(t.data.shape) for k, t in leaves.items()}
    return float(loss.data), aux, grads
