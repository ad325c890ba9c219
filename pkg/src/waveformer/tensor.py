"""Dense forward kernels on channels-first numpy arrays, plus a portable PRNG.

Feature maps are ``(C, D, H, W)`` arrays.  Every kernel here is a pure
function; the autodiff layer in :mod:`waveformer.autograd` wraps them and
supplies the matching backward kernels defined alongside.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class Prng:
    """splitmix64 stream with a Box-Muller normal generator.

    The stream is counter based, so the n-th draw only depends on the seed and
    n.  That keeps sequences identical on every platform numpy runs on.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        return z & _MASK64

    def uniform(self, n: int) -> np.ndarray:
        """Uniform float64 draws in the half-open interval (0, 1]."""
        u = self.next_u64(n) >> np.uint64(11)
        return (u.astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        span = high - low
        return np.minimum(np.floor(self.uniform(n) * span).astype(np.int64), span - 1) + low

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]


def seeded_randn(prng: Prng, shape, dtype=np.float64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    return prng.normal(n).reshape(shape).astype(dtype)


def trunc_normal(prng: Prng, shape, std: float, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
    """Normal draws with anything beyond ``bound`` standard deviations redrawn."""
    shape = tuple(int(s) for s in shape)
    z = prng.normal(int(np.prod(shape)))
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = prng.normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return (z * std).reshape(shape).astype(dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# -- convolution -------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {n + 2 * padding}")
    if span % stride:
        raise ValueError(f"non-integer output extent: ({n}+2*{padding}-{k})/{stride}")
    return span // stride + 1


def _offsets(k: int):
    return itertools.product(range(k), repeat=3)


def _window(xp: np.ndarray, a: int, b: int, c: int, out: tuple, stride: int) -> np.ndarray:
    d, h, w = out
    return xp[:, a : a + stride * (d - 1) + 1 : stride,
              b : b + stride * (h - 1) + 1 : stride,
              c : c + stride * (w - 1) + 1 : stride]


def _taps(kernel: np.ndarray) -> np.ndarray:
    """``(Co, Ci, k, k, k)`` -> contiguous ``(k, k, k, Co, Ci)`` so each tap is a BLAS-ready matrix."""
    return np.ascontiguousarray(kernel.transpose(2, 3, 4, 0, 1))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
           transposed: bool = False) -> np.ndarray:
    """Bias-free 3D convolution (cross-correlation) or its transpose.

    ``kernel`` is ``(C_out, C_in, k, k, k)`` in both modes.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError(f"expected x (C,D,H,W) and kernel (Co,Ci,k,k,k), got {x.shape}, {kernel.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ValueError(f"kernel must be cubic, got {kernel.shape[2:]}")
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if stride < 1 or k < 1 or padding < 0:
        raise ValueError("stride and kernel size must be >= 1, padding >= 0")
    if transposed:
        return _conv3d_transposed(x, kernel, stride, padding)

    out = tuple(_out_extent(n, k, stride, padding) for n in x.shape[1:])
    dtype = np.result_type(x, kernel)
    if k == stride and padding == 0:
        # non-overlapping patches: one contraction
        d, h, w = out
        patches = x.reshape(c_in, d, k, h, k, w, k)
        return np.einsum("oiabc,iXaYbZc->oXYZ", kernel, patches, optimize=True).astype(dtype, copy=False)
    xp = _pad(x, padding)
    taps = _taps(kernel)
    y = np.zeros((c_out, int(np.prod(out))), dtype=dtype)
    for a, b, c in _offsets(k):
        patch = _window(xp, a, b, c, out, stride).reshape(c_in, -1)
        y += taps[a, b, c] @ patch
    return y.reshape((c_out,) + out)


def _conv3d_transposed(x, kernel, stride, padding):
    c_out, c_in, k = kernel.shape[:3]
    d, h, w = x.shape[1:]
    full = tuple((n - 1) * stride + k for n in (d, h, w))
    out = tuple(n - 2 * padding for n in full)
    if min(out) < 1:
        raise ValueError(f"transposed conv output extent {out} is empty")
    dtype = np.result_type(x, kernel)
    flat = x.reshape(c_in, -1)
    if k == stride and padding == 0:
        y = np.einsum("oiabc,iXYZ->oXaYbZc", kernel, x, optimize=True)
        return y.reshape((c_out,) + full).astype(dtype, copy=False)
    y = np.zeros((c_out,) + full, dtype=dtype)
    taps = _taps(kernel)
    for a, b, c in _offsets(k):
        contrib = (taps[a, b, c] @ flat).reshape(c_out, d, h, w)
        _window(y, a, b, c, (d, h, w), stride)[...] += contrib
    p = padding
    if p:
        y = y[:, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(y)


def conv3d_weight_grad(x: np.ndarray, grad_out: np.ndarray, k: int, stride: int, padding: int,
                       transposed: bool = False) -> np.ndarray:
    """Gradient of a conv3d output w.r.t. its kernel, shape ``(C_out, C_in, k, k, k)``."""
    if transposed:
        # out = crop(sum_offsets scatter(W x)); d/dW_abc = window(pad(g)) @ x^T
        gp = _pad(grad_out, padding)
        d, h, w = x.shape[1:]
        flat = x.reshape(x.shape[0], -1)
        gw = np.empty((grad_out.shape[0], x.shape[0], k, k, k), dtype=np.result_type(x, grad_out))
        for a, b, c in _offsets(k):
            gw[:, :, a, b, c] = _window(gp, a, b, c, (d, h, w), stride).reshape(grad_out.shape[0], -1) @ flat.T
        return gw
    c_in, c_out = x.shape[0], grad_out.shape[0]
    out = grad_out.shape[1:]
    g = grad_out.reshape(c_out, -1)
    if k == stride and padding == 0:
        d, h, w = out
        patches = x.reshape(c_in, d, k, h, k, w, k)
        return np.einsum("oXYZ,iXaYbZc->oiabc", grad_out, patches, optimize=True)
    xp = _pad(x, padding)
    gw = np.empty((c_out, c_in, k, k, k), dtype=np.result_type(x, grad_out))
    for a, b, c in _offsets(k):
        gw[:, :, a, b, c] = g @ _window(xp, a, b, c, out, stride).reshape(c_in, -1).T
    return gw


def conv3d_input_grad(grad_out: np.ndarray, kernel: np.ndarray, in_shape: tuple, stride: int,
                      padding: int, transposed: bool = False) -> np.ndarray:
    """Gradient of a conv3d output w.r.t. its input (the adjoint operator)."""
    kt = np.ascontiguousarray(kernel.transpose(1, 0, 2, 3, 4))
    if transposed:
        return conv3d(grad_out, kt, stride=stride, padding=padding)
    y = conv3d(grad_out, kt, stride=stride, padding=padding, transposed=True)
    if y.shape != tuple(in_shape):
        raise AssertionError(f"adjoint shape {y.shape} != {in_shape}")
    return y


def depthwise_conv3d(x: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    """Stride-1 per-channel convolution; ``kernel`` is ``(C, 1, k, k, k)``."""
    c, k = x.shape[0], kernel.shape[2]
    if kernel.shape[:2] != (c, 1):
        raise ValueError(f"depthwise kernel must be ({c},1,k,k,k), got {kernel.shape}")
    out = tuple(_out_extent(n, k, 1, padding) for n in x.shape[1:])
    xp = _pad(x, padding)
    y = np.zeros((c,) + out, dtype=np.result_type(x, kernel))
    for a, b, cc in _offsets(k):
        y += kernel[:, 0, a, b, cc][:, None, None, None] * _window(xp, a, b, cc, out, 1)
    return y


def depthwise_conv3d_grads(x, kernel, grad_out, padding):
    k = kernel.shape[2]
    out = grad_out.shape[1:]
    xp = _pad(x, padding)
    gxp = np.zeros_like(xp, dtype=np.result_type(x, grad_out))
    gw = np.empty_like(kernel, dtype=np.result_type(kernel, grad_out))
    for a, b, c in _offsets(k):
        win = _window(xp, a, b, c, out, 1)
        gw[:, 0, a, b, c] = np.einsum("cxyz,cxyz->c", win, grad_out)
        _window(gxp, a, b, c, out, 1)[...] += kernel[:, 0, a, b, c][:, None, None, None] * grad_out
    p = padding
    gx = gxp[:, p:-p, p:-p, p:-p] if p else gxp
    return np.ascontiguousarray(gx), gw


# -- pointwise and normalisation ---------------------------------------------


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
               axis: int = -1) -> np.ndarray:
    axis = axis % x.ndim
    if gamma.shape != (x.shape[axis],) or beta.shape != gamma.shape:
        raise ValueError(f"affine params {gamma.shape}/{beta.shape} do not match feature axis {x.shape[axis]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    bshape = [1] * x.ndim
    bshape[axis] = -1
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
