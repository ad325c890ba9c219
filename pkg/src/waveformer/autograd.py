"""A small reverse-mode autodiff engine over numpy arrays.

Each :class:`Var` remembers its parents and a closure mapping the upstream
gradient to one gradient per parent.  :func:`backward` walks the graph in
reverse topological order, accumulating by addition in a fixed order so runs
are reproducible bit for bit.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as T
from . import wavelet as W

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, np.generic):
            data = np.asarray(data)
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _node(data, parents, backward, op):
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Var(data, True, parents, backward, op)
    return Var(data, False, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Var, grad=None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``root``."""
    if grad is None:
        if root.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Var:
    if _is_scalar(b):
        return _node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Var) -> Var:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Var:
    # python scalars stay weakly typed so float32 graphs are not promoted
    if _is_scalar(b):
        return _node(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Var) -> Var:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def reciprocal(a: Var) -> Var:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def relu(a: Var) -> Var:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Var) -> Var:
    return _node(T.gelu(a.data), (a,), lambda g: (g * T.gelu_grad(a.data),), "gelu")


def sigmoid(a: Var) -> Var:
    out = T.sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- shape -------------------------------------------------------------------


def reshape(a: Var, shape) -> Var:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Var, axes=None) -> Var:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Var, idx) -> Var:
    def bw(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        full[idx] += g
        return (full,)

    return _node(a.data[idx], (a,), bw, "getitem")


def concat(vs, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vs]
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
    return _node(np.concatenate([v.data for v in vs], axis=axis), vs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(vs, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vs)))

    return _node(np.stack([v.data for v in vs], axis=axis), vs, bw, "stack")


# -- reductions --------------------------------------------------------------


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    n = float(n)
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T + b`` with ``w`` stored as ``(out, in)``."""
    y = matmul(x, transpose(w, (1, 0)))
    return y if b is None else add(y, b)


# -- fused normalisation / softmax --------------------------------------------


def softmax(a: Var, axis: int = -1) -> Var:
    out = T.softmax(a.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a: Var, axis: int = -1) -> Var:
    out = T.log_softmax(a.data, axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5, axis: int = -1) -> Var:
    axis = axis % x.ndim
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    out = xhat * gam + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx_hat = g * gam
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=axis, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(out, (x, gamma, beta), bw, "layer_norm")


# -- convolution -------------------------------------------------------------


def conv3d(x: Var, w: Var, b: Var | None = None, stride: int = 1, padding: int = 0,
           transposed: bool = False) -> Var:
    k = w.shape[2]
    out = T.conv3d(x.data, w.data, stride, padding, transposed)

    def bw(g):
        gx = T.conv3d_input_grad(g, w.data, x.shape, stride, padding, transposed) if x.requires_grad else None
        gw = T.conv3d_weight_grad(x.data, g, k, stride, padding, transposed) if w.requires_grad else None
        return gx, gw

    y = _node(out, (x, w), bw, "conv_transpose3d" if transposed else "conv3d")
    if b is not None:
        y = add(y, reshape(b, (-1, 1, 1, 1)))
    return y


def depthwise_conv3d(x: Var, w: Var, b: Var | None = None, padding: int = 1) -> Var:
    out = T.depthwise_conv3d(x.data, w.data, padding)
    y = _node(out, (x, w), lambda g: T.depthwise_conv3d_grads(x.data, w.data, g, padding), "depthwise_conv3d")
    if b is not None:
        y = add(y, reshape(b, (-1, 1, 1, 1)))
    return y


# -- wavelets ----------------------------------------------------------------


def dwt3d(x: Var, wavelet=W.HAAR) -> Var:
    """Stacked sub-bands ``(8, ...)``; gradient is the synthesis-form transpose."""
    return _node(W.dwt3d_stacked(x.data, wavelet), (x,),
                 lambda g: (W.dwt3d_adjoint(g, wavelet),), "dwt3d")


def idwt3d(bands: Var, wavelet=W.HAAR) -> Var:
    return _node(W.idwt3d_stacked(bands.data, wavelet), (bands,),
                 lambda g: (W.idwt3d_adjoint(g, wavelet),), "idwt3d")


def dwt3d_multi(x: Var, m: int, wavelet=W.HAAR):
    """Returns ``(approximations, details)``; ``approximations[j]`` is level ``j + 1``."""
    W.check_divisible(x.shape[-3:], m)
    approx, details = [], []
    cur = x
    for _ in range(m):
        bands = dwt3d(cur, wavelet)
        details.append(bands[1:])
        cur = bands[0]
        approx.append(cur)
    return approx, details


def lf_upsample(a: Var, m: int, wavelet=W.HAAR, mode: str = "idwt") -> Var:
    if m == 0:
        return a
    if mode == "nearest":
        return _node(W.nearest_upsample(a.data, m), (a,),
                     lambda g: (W.nearest_upsample_adjoint(g, m),), "nearest_upsample")
    return _node(W.lf_upsample(a.data, m, wavelet), (a,),
                 lambda g: (W.lf_upsample_adjoint(g, m, wavelet),), "lf_upsample")


# -- gradient checking -------------------------------------------------------


def numeric_grad(fn, arrays, index: int, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = float(fn(*arrays))
        x[i] = orig - eps
        fm = float(fn(*arrays))
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(fn, arrays, eps: float = 1e-5, rtol: float = 1e-3) -> float:
    """Compare reverse-mode and finite-difference gradients of ``fn``.

    ``fn`` maps Vars to a scalar Var.  Returns the worst relative error,
    measured as ``|a - n| / max(|a|, |n|, 1e-8)`` on the gradient norms'
    scale so near-zero entries do not dominate.  Raises AssertionError above
    ``rtol``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    vars_ = [Var(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*vars_))

    def scalar(*arrs):
        with no_grad():
            return fn(*[Var(a) for a in arrs]).data

    worst = 0.0
    for i, v in enumerate(vars_):
        num = numeric_grad(scalar, arrays, i, eps)
        ana = v.grad if v.grad is not None else np.zeros_like(num)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        err = float(np.abs(ana - num).max() / scale)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradcheck failed for input {i}: relative error {err:.3e}")
    return worst
