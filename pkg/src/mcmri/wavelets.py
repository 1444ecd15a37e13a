"""Periodized orthonormal 2D wavelet transform stored in one Mallat array.

A thin layer over PyWavelets.  Coefficients fill an array of the input's
shape with the coarsest approximation in the top-left corner, so group
norms across contrasts are plain reductions over axis 0.  Transforms act
on the last two axes.
"""

from __future__ import annotations

import numpy as np
import pywt

WAVELETS = ("haar", "db4")
_AXES = (-2, -1)


class WaveletError(ValueError):
    pass


def check_levels(shape, levels: int) -> None:
    H, W = shape[-2:]
    if levels < 0 or (levels > 0 and levels > np.log2(min(H, W))):
        raise WaveletError(f"{levels} levels exceed log2(min({H}, {W}))")
    step = 2**levels
    if H % step or W % step:
        raise WaveletError(f"size {H}x{W} not divisible by 2**{levels}")


def dwt2(x: np.ndarray, wavelet: str = "haar", levels: int = 3) -> np.ndarray:
    check_levels(x.shape, levels)
    x = np.asarray(x, dtype=np.float64)
    if levels == 0:
        return x.copy()
    coeffs = pywt.wavedec2(x, wavelet, mode="periodization", level=levels, axes=_AXES)
    return pywt.coeffs_to_array(coeffs, axes=_AXES)[0]


def _layout(shape, wavelet, levels):
    coeffs = pywt.wavedec2(np.zeros(shape[-2:]), wavelet, mode="periodization", level=levels)
    return pywt.coeffs_to_array(coeffs)[1]


def idwt2(c: np.ndarray, wavelet: str = "haar", levels: int = 3) -> np.ndarray:
    check_levels(c.shape, levels)
    c = np.asarray(c, dtype=np.float64)
    if levels == 0:
        return c.copy()
    slices = _layout(c.shape, wavelet, levels)
    if c.ndim > 2:
        lead = (slice(None),) * (c.ndim - 2)
        slices = [s if isinstance(s, tuple) and len(s) == c.ndim else _widen(s, lead) for s in slices]
    coeffs = pywt.array_to_coeffs(c, slices, output_format="wavedec2")
    return pywt.waverec2(coeffs, wavelet, mode="periodization", axes=_AXES)


def _widen(s, lead):
    if isinstance(s, dict):
        return {k: lead + v for k, v in s.items()}
    return lead + tuple(s)
