"""Window attention and the wavelet-attention encoder blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ad
from .autograd import Var
from .tensor import Prng, trunc_normal
from .wavelet import HAAR


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    feature_dim: int
    window: int

    def __post_init__(self):
        if self.feature_dim % self.num_heads:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by num_heads {self.num_heads}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.num_heads


@dataclass
class BlockParams:
    """Weights of one wavelet-attention block.  Linear weights are ``(out, in)``."""

    ln1_g: Var
    ln1_b: Var
    qkv_w: Var
    qkv_b: Var
    proj_w: Var
    proj_b: Var
    ln2_g: Var
    ln2_b: Var
    fc1_w: Var
    fc1_b: Var
    fc2_w: Var
    fc2_b: Var

    @staticmethod
    def names() -> list:
        return [f.name for f in fields(BlockParams)]

    @classmethod
    def from_store(cls, store, prefix: str) -> "BlockParams":
        return cls(**{n: store[f"{prefix}.{n}"] for n in cls.names()})

    @staticmethod
    def init(prng: Prng, dim: int, mlp_ratio: int = 4, dtype=np.float32) -> dict:
        hidden = mlp_ratio * dim
        return {
            "ln1_g": np.ones(dim, dtype), "ln1_b": np.zeros(dim, dtype),
            "qkv_w": trunc_normal(prng, (3 * dim, dim), 0.02, dtype=dtype), "qkv_b": np.zeros(3 * dim, dtype),
            "proj_w": np.zeros((dim, dim), dtype), "proj_b": np.zeros(dim, dtype),
            "ln2_g": np.ones(dim, dtype), "ln2_b": np.zeros(dim, dtype),
            "fc1_w": trunc_normal(prng, (hidden, dim), 0.02, dtype=dtype), "fc1_b": np.zeros(hidden, dtype),
            "fc2_w": np.zeros((dim, hidden), dtype), "fc2_b": np.zeros(dim, dtype),
        }


def block_param_count(dim: int, mlp_ratio: int = 4) -> int:
    h = mlp_ratio * dim
    return 4 * dim + (3 * dim * dim + 3 * dim) + (dim * dim + dim) + (h * dim + h) + (dim * h + dim)


def _as_params(p) -> BlockParams:
    if isinstance(p, BlockParams):
        return p
    return BlockParams(**{k: ad.as_var(v) for k, v in p.items()})


def window_partition(x: Var, ws: int) -> Var:
    """``(C, d, h, w)`` -> ``(num_windows, ws**3, C)``."""
    c, d, h, w = x.shape
    x = x.reshape(c, d // ws, ws, h // ws, ws, w // ws, ws).transpose(1, 3, 5, 2, 4, 6, 0)
    return x.reshape(-1, ws ** 3, c)


def window_merge(x: Var, ws: int, grid: tuple) -> Var:
    d, h, w = grid
    c = x.shape[-1]
    x = x.reshape(d // ws, h // ws, w // ws, ws, ws, ws, c).transpose(6, 0, 3, 1, 4, 2, 5)
    return x.reshape(c, d, h, w)


def window_msa(tokens: Var, params, cfg: AttentionConfig) -> Var:
    """Multi-head self-attention inside non-overlapping ``window**3`` cubes."""
    p = _as_params(params)
    tokens = ad.as_var(tokens)
    c, d, h, w = tokens.shape
    ws = cfg.window
    if c != cfg.feature_dim:
        raise ValueError(f"token dim {c} != feature_dim {cfg.feature_dim}")
    if d % ws or h % ws or w % ws:
        raise ValueError(f"window {ws} does not divide token grid {(d, h, w)}")
    heads, hd = cfg.num_heads, cfg.head_dim
    x = window_partition(tokens, ws)
    nw, t = x.shape[0], x.shape[1]
    qkv = ad.linear(x, p.qkv_w, p.qkv_b).reshape(nw, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q * (1.0 / math.sqrt(hd)), k.transpose(0, 1, 3, 2))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(nw, t, c)
    out = ad.linear(out, p.proj_w, p.proj_b)
    return window_merge(out, ws, (d, h, w))


def mlp(x: Var, params) -> Var:
    """Two affine maps with GELU between, applied over the trailing feature axis."""
    p = _as_params(params)
    x = ad.as_var(x)
    if x.shape[-1] != p.fc1_w.shape[1]:
        raise ValueError(f"feature dim {x.shape[-1]} != MLP input {p.fc1_w.shape[1]}")
    return ad.linear(ad.gelu(ad.linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def _channel_ln(x: Var, g: Var, b: Var) -> Var:
    return ad.layer_norm(x, g, b, eps=1e-5, axis=0)


def _mlp_residual(zh: Var, p: BlockParams) -> Var:
    c = zh.shape[0]
    tokens = _channel_ln(zh, p.ln2_g, p.ln2_b).reshape(c, -1).T
    return mlp(tokens, p).T.reshape(zh.shape) + zh


def wavelet_attention_block(z: Var, m: int, params, cfg: AttentionConfig, wavelet=HAAR,
                            upsample: str = "idwt"):
    """Attention on the level-``m`` approximation, upsampled back and added to ``z``.

    Returns ``(z_next, hf_level1)`` where ``hf_level1`` is the ``(7, C, ...)``
    stack of finest detail bands, or None when ``m == 0``.
    """
    p = _as_params(params)
    z = ad.as_var(z)
    if m == 0:
        lf, hf1 = z, None
    else:
        approx, details = ad.dwt3d_multi(z, m, wavelet)
        lf, hf1 = approx[-1], details[0]
    a = window_msa(_channel_ln(lf, p.ln1_g, p.ln1_b), p, cfg)
    zh = ad.lf_upsample(a, m, wavelet, upsample) + z
    return _mlp_residual(zh, p), hf1


def multilevel_attention_block(z: Var, m: int, params, cfg: AttentionConfig, wavelet=HAAR,
                               upsample: str = "idwt"):
    """Shared-weight window attention on the approximation at every level 1..m.

    The upsampled per-level outputs are averaged before the residual add.
    """
    if m < 1:
        raise ValueError("multi-level attention needs m >= 1")
    p = _as_params(params)
    z = ad.as_var(z)
    approx, details = ad.dwt3d_multi(z, m, wavelet)
    for j, a in enumerate(approx, start=1):
        if any(n % cfg.window for n in a.shape[1:]):
            raise ValueError(f"window {cfg.window} does not divide level-{j} grid {a.shape[1:]}")
    ups = [ad.lf_upsample(window_msa(_channel_ln(a, p.ln1_g, p.ln1_b), p, cfg), j, wavelet, upsample)
           for j, a in enumerate(approx, start=1)]
    combined = ups[0]
    for u in ups[1:]:
        combined = combined + u
    if len(ups) > 1:
        combined = combined * (1.0 / len(ups))
    zh = combined + z
    return _mlp_residual(zh, p), details[0]
