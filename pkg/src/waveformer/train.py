"""Dice + cross-entropy objective, AdamW, synthetic volumes and the toy training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ad
from .autograd import Var
from .model import ModelConfig, ParamStore, forward, init_params
from .tensor import Prng

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class LossTerms:
    total: Var
    dice: float
    ce: float


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]")
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)


def dice_ce_loss(logits: Var, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> LossTerms:
    """Soft Dice loss averaged over all classes plus voxel-mean cross-entropy, weighted 1:1."""
    k = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape[1:]}")
    y = one_hot(labels, k, logits.dtype)
    flat = logits.reshape(k, -1)
    yf = y.reshape(k, -1)
    probs = ad.softmax(flat, axis=0)
    inter = (probs * yf).sum(axis=1)
    denom = probs.sum(axis=1) + yf.sum(axis=1) + smooth
    dice = (inter * 2.0 + smooth) * ad.reciprocal(denom)
    dice_loss = 1.0 - dice.mean()
    ce = -((ad.log_softmax(flat, axis=0) * yf).sum(axis=0).mean())
    total = dice_loss + ce
    return LossTerms(total, float(dice_loss.data), float(ce.data))


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One decoupled-weight-decay Adam update; returns new arrays, advances ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p * (1.0 - state.lr * state.weight_decay)
        new = new - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = new.astype(p.dtype, copy=False)
    return out


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthSample:
    volume: np.ndarray  # (P, D, H, W) float32
    labels: np.ndarray  # (D, H, W) int64


def class_signatures(num_classes: int, in_channels: int) -> np.ndarray:
    """Mean intensity of every class in every channel; background is zero."""
    k = np.arange(num_classes, dtype=np.float64)[:, None]
    p = np.arange(in_channels, dtype=np.float64)[None, :]
    return k * (1.0 + 0.5 * p) * np.where(p % 2 == 0, 1.0, -1.0)


def _ellipsoid(grid, prng: Prng, extent: int) -> np.ndarray:
    lo, hi = 0.08 * extent, 0.2 * extent
    radii = lo + (hi - lo) * prng.uniform(3)
    centre = radii + (extent - 2 * radii) * prng.uniform(3)
    zz, yy, xx = grid
    return ((zz - centre[0]) / radii[0]) ** 2 + ((yy - centre[1]) / radii[1]) ** 2 \
        + ((xx - centre[2]) / radii[2]) ** 2 <= 1.0


def gen_synthetic(seed: int, n: int, extent: int, in_channels: int, num_classes: int,
                  noise: float = 0.3, min_fg: float = 0.01, max_fg: float = 0.40) -> list:
    """Ellipsoid label volumes with per-class intensity signatures and Gaussian noise.

    Samples whose foreground fraction falls outside ``[min_fg, max_fg]`` or that
    miss a foreground class are redrawn, so every sample contains every class.
    """
    if num_classes < 2:
        raise ValueError("need background plus at least one foreground class")
    if extent < 8:
        raise ValueError(f"extent {extent} too small for ellipsoid phantoms")
    prng = Prng(seed)
    sig = class_signatures(num_classes, in_channels)
    grid = np.meshgrid(*(np.arange(extent) + 0.5,) * 3, indexing="ij")
    out = []
    while len(out) < n:
        labels = np.zeros((extent,) * 3, dtype=np.int64)
        for k in range(1, num_classes):
            for _ in range(int(prng.integers(1, 4, 1)[0])):
                labels[_ellipsoid(grid, prng, extent)] = k
        fg = float(np.mean(labels > 0))
        present = np.unique(labels)
        if not (min_fg <= fg <= max_fg) or len(present) != num_classes:
            continue
        vol = sig[labels].transpose(3, 0, 1, 2) + noise * prng.normal(in_channels * extent ** 3).reshape(
            (in_channels,) + (extent,) * 3)
        out.append(SynthSample(vol.astype(np.float32), labels))
    return out


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    trace: list  # (iteration, loss, dice_term, ce_term)


def batch_loss(params: dict, samples, cfg: ModelConfig):
    total, dice, ce = None, 0.0, 0.0
    for s in samples:
        terms = dice_ce_loss(forward(params, s.volume, cfg), s.labels)
        total = terms.total if total is None else total + terms.total
        dice += terms.dice
        ce += terms.ce
    n = len(samples)
    return total * (1.0 / n), dice / n, ce / n


def train_toy(cfg: ModelConfig, data: list, iters: int, seed: int, lr: float = 1e-4,
              weight_decay: float = 1e-5, batch_size: int = 2, params: ParamStore | None = None,
              callback=None) -> TrainResult:
    """Seeded forward / loss / backward / AdamW loop over ``data``.

    Batches cycle through a seeded permutation of the data, reshuffled every
    epoch.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if not data:
        raise ValueError("no training samples")
    for s in data:
        if s.volume.shape != (cfg.in_channels,) + (cfg.input_extent,) * 3:
            raise ValueError(f"sample shape {s.volume.shape} does not match the model config")
    store = params.copy() if params is not None else init_params(cfg, seed)
    arrays = dict(store.items())
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    order_rng = Prng(seed ^ 0x5EED)
    order: list = []
    trace = []
    for it in range(1, iters + 1):
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(np.argsort(order_rng.uniform(len(data)), kind="stable"))
            batch.append(data[order.pop(0)])
        vars_ = {k: Var(v, requires_grad=True) for k, v in arrays.items()}
        loss, dice, ce = batch_loss(vars_, batch, cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it}")
        ad.backward(loss)
        arrays = adamw_step(arrays, {k: v.grad for k, v in vars_.items()}, state)
        trace.append((it, value, dice, ce))
        if callback is not None:
            callback(it, value, dice, ce)
        if it % 50 == 0 or it == 1:
            log.info("iter %d loss %.4f (dice %.4f, ce %.4f)", it, value, dice, ce)
    return TrainResult(ParamStore(arrays), trace)
