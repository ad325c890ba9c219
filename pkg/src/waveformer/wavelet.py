"""Separable periodic 3D discrete wavelet transform and its inverse.

Conventions
-----------
Analysis along one axis of length ``N`` (even) with filter ``h`` of length
``L`` and periodic extension::

    a[n] = sum_k h[k] * x[(2n + k) mod N]

Synthesis is written in the adjoint form with the synthesis filters::

    x[(2n + k) mod N] += g_lo[k] * a[n] + g_hi[k] * d[n]

For the orthonormal families shipped here ``g == h`` and synthesis is both
the inverse and the transpose of analysis.

Sub-band ``b`` of a 3D level is indexed by the bits ``(D, H, W)`` with 1 for
the high-pass branch, so ``LLL = 0`` and ``HHH = 7``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BAND_NAMES = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")


@dataclass(frozen=True)
class WaveletFilter:
    name: str
    analysis_lo: tuple
    analysis_hi: tuple
    synthesis_lo: tuple
    synthesis_hi: tuple

    @classmethod
    def orthonormal(cls, name: str, lo) -> "WaveletFilter":
        lo = tuple(float(v) for v in lo)
        n = len(lo)
        hi = tuple(((-1) ** k) * lo[n - 1 - k] for k in range(n))
        return cls(name, lo, hi, lo, hi)


_S2 = 1.0 / math.sqrt(2.0)
_S3 = math.sqrt(3.0)
_D2 = 4.0 * math.sqrt(2.0)

HAAR = WaveletFilter("haar", (_S2, _S2), (_S2, -_S2), (_S2, _S2), (_S2, -_S2))
DB2 = WaveletFilter.orthonormal(
    "db2", ((1 + _S3) / _D2, (3 + _S3) / _D2, (3 - _S3) / _D2, (1 - _S3) / _D2)
)

FILTERS = {f.name: f for f in (HAAR, DB2)}


def get_filter(name) -> WaveletFilter:
    if isinstance(name, WaveletFilter):
        return name
    try:
        return FILTERS[name]
    except KeyError:
        raise ValueError(f"unknown wavelet {name!r}; available: {sorted(FILTERS)}") from None


# -- 1D kernels --------------------------------------------------------------


def _check_even(n: int, axis: int):
    if n % 2:
        raise ValueError(f"odd extent {n} on axis {axis}; the transform needs even extents")


def analysis_1d(x: np.ndarray, lo, hi, axis: int):
    """One periodic analysis step along ``axis``; returns ``(approx, detail)``."""
    n = x.shape[axis]
    _check_even(n, axis)
    xm = np.moveaxis(x, axis, 0)
    half = np.arange(n // 2) * 2
    a = np.zeros((n // 2,) + xm.shape[1:], dtype=x.dtype)
    d = np.zeros_like(a)
    for k in range(len(lo)):
        tap = xm[(half + k) % n]
        a += lo[k] * tap
        d += hi[k] * tap
    return np.moveaxis(a, 0, axis), np.moveaxis(d, 0, axis)


def synthesis_1d(a: np.ndarray, d: np.ndarray, lo, hi, axis: int) -> np.ndarray:
    """Adjoint-form synthesis along ``axis``: the inverse of :func:`analysis_1d`."""
    if a.shape != d.shape:
        raise ValueError(f"approx/detail shape mismatch {a.shape} vs {d.shape}")
    am = np.moveaxis(a, axis, 0)
    dm = np.moveaxis(d, axis, 0)
    n = 2 * am.shape[0]
    half = np.arange(n // 2) * 2
    x = np.zeros((n,) + am.shape[1:], dtype=np.result_type(a, d))
    for k in range(len(lo)):
        # (2n + k) mod N is a permutation-free injection for fixed k
        x[(half + k) % n] += lo[k] * am + hi[k] * dm
    return np.moveaxis(x, 0, axis)


# -- 3D single level ---------------------------------------------------------


@dataclass
class SubbandSet3D:
    """The eight half-extent sub-bands of one 3D level; ``lll`` is the approximation."""

    bands: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.bands) != 8:
            raise ValueError(f"expected 8 sub-bands, got {len(self.bands)}")
        shapes = {b.shape for b in self.bands}
        if len(shapes) != 1:
            raise ValueError(f"sub-bands disagree in shape: {sorted(shapes)}")

    @property
    def lll(self) -> np.ndarray:
        return self.bands[0]

    @property
    def details(self) -> list:
        return self.bands[1:]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.bands[BAND_NAMES.index(name)]

    def stacked(self) -> np.ndarray:
        return np.stack(self.bands)


def _spatial_axes(x: np.ndarray):
    return x.ndim - 3, x.ndim - 2, x.ndim - 1


def dwt3d_stacked(x: np.ndarray, wavelet=HAAR) -> np.ndarray:
    """One level over the last three axes; returns ``(8, *lead, D/2, H/2, W/2)``."""
    f = get_filter(wavelet)
    ad, ah, aw = _spatial_axes(x)
    lo, hi = f.analysis_lo, f.analysis_hi
    w_l, w_h = analysis_1d(x, lo, hi, aw)
    parts = []
    for wb in (w_l, w_h):
        parts.append(analysis_1d(wb, lo, hi, ah))
    out = [None] * 8
    for wbit in (0, 1):
        for hbit in (0, 1):
            dl, dh = analysis_1d(parts[wbit][hbit], lo, hi, ad)
            out[hbit * 2 + wbit] = dl
            out[4 + hbit * 2 + wbit] = dh
    return np.stack(out)


def idwt3d_stacked(bands: np.ndarray, wavelet=HAAR) -> np.ndarray:
    """Inverse of :func:`dwt3d_stacked`."""
    f = get_filter(wavelet)
    if bands.shape[0] != 8:
        raise ValueError(f"expected 8 stacked sub-bands, got leading extent {bands.shape[0]}")
    inner = bands[0]
    ad, ah, aw = _spatial_axes(inner)
    lo, hi = f.synthesis_lo, f.synthesis_hi
    # undo D, then H, then W
    hw = [[None, None], [None, None]]
    for hbit in (0, 1):
        for wbit in (0, 1):
            i = hbit * 2 + wbit
            hw[hbit][wbit] = synthesis_1d(bands[i], bands[4 + i], lo, hi, ad)
    w_parts = [synthesis_1d(hw[0][wbit], hw[1][wbit], lo, hi, ah) for wbit in (0, 1)]
    return synthesis_1d(w_parts[0], w_parts[1], lo, hi, aw)


def dwt3d_adjoint(grad_bands: np.ndarray, wavelet=HAAR) -> np.ndarray:
    """Transpose of :func:`dwt3d_stacked`: synthesis with the analysis filters."""
    f = get_filter(wavelet)
    swapped = WaveletFilter(f.name, f.analysis_lo, f.analysis_hi, f.analysis_lo, f.analysis_hi)
    return idwt3d_stacked(grad_bands, swapped)


def idwt3d_adjoint(grad: np.ndarray, wavelet=HAAR) -> np.ndarray:
    """Transpose of :func:`idwt3d_stacked`: analysis with the synthesis filters."""
    f = get_filter(wavelet)
    swapped = WaveletFilter(f.name, f.synthesis_lo, f.synthesis_hi, f.synthesis_lo, f.synthesis_hi)
    return dwt3d_stacked(grad, swapped)


def dwt3d(x: np.ndarray, wavelet=HAAR) -> SubbandSet3D:
    if x.ndim != 4:
        raise ValueError(f"expected (C,D,H,W), got shape {x.shape}")
    return SubbandSet3D(list(dwt3d_stacked(x, wavelet)))


def idwt3d(bands: SubbandSet3D, wavelet=HAAR) -> np.ndarray:
    return idwt3d_stacked(np.stack(bands.bands), wavelet)


# -- multi level -------------------------------------------------------------


@dataclass
class MultiLevelDecomposition:
    """Approximation after ``m`` levels plus per-level detail sets (finest first)."""

    lf: np.ndarray
    details: list  # details[j] is a (7, C, ...) array for level j + 1

    @property
    def levels(self) -> int:
        return len(self.details)


def check_divisible(shape, m: int):
    step = 2 ** m
    for n in shape:
        if n % step:
            raise ValueError(f"spatial extent {n} not divisible by 2^{m} = {step}")


def dwt3d_multi(x: np.ndarray, m: int, wavelet=HAAR) -> MultiLevelDecomposition:
    if m < 1:
        raise ValueError(f"levels must be >= 1, got {m}")
    check_divisible(x.shape[-3:], m)
    details = []
    cur = x
    for _ in range(m):
        bands = dwt3d_stacked(cur, wavelet)
        details.append(bands[1:])
        cur = bands[0]
    return MultiLevelDecomposition(cur, details)


def idwt3d_multi(dec: MultiLevelDecomposition, wavelet=HAAR) -> np.ndarray:
    cur = dec.lf
    for det in reversed(dec.details):
        if det.shape[0] != 7 or det.shape[1:] != cur.shape:
            raise ValueError(f"detail set {det.shape} inconsistent with approximation {cur.shape}")
        cur = idwt3d_stacked(np.concatenate([cur[None], det]), wavelet)
    return cur


def lf_upsample(lf: np.ndarray, m: int, wavelet=HAAR) -> np.ndarray:
    """Inverse transform of ``lf`` with every detail band zero; extents grow by ``2**m``."""
    cur = lf
    for _ in range(m):
        bands = np.zeros((8,) + cur.shape, dtype=cur.dtype)
        bands[0] = cur
        cur = idwt3d_stacked(bands, wavelet)
    return cur


def lf_upsample_adjoint(grad: np.ndarray, m: int, wavelet=HAAR) -> np.ndarray:
    cur = grad
    for _ in range(m):
        cur = idwt3d_adjoint(cur, wavelet)[0]
    return cur


def nearest_upsample(x: np.ndarray, m: int) -> np.ndarray:
    f = 2 ** m
    for ax in (-3, -2, -1):
        x = np.repeat(x, f, axis=ax)
    return x


def nearest_upsample_adjoint(grad: np.ndarray, m: int) -> np.ndarray:
    f = 2 ** m
    *lead, d, h, w = grad.shape
    return grad.reshape(*lead, d // f, f, h // f, f, w // f, f).sum(axis=(-5, -3, -1))


def level_energies(dec: MultiLevelDecomposition) -> tuple:
    """Energy in the approximation and in each detail level (finest first)."""
    lf = float(np.sum(np.asarray(dec.lf, dtype=np.float64) ** 2))
    det = [float(np.sum(np.asarray(d, dtype=np.float64) ** 2)) for d in dec.details]
    return lf, det
