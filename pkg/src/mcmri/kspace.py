"""Unitary Fourier operators, undersampling masks and the data-fidelity solve.

All transforms act on the last two axes and use orthonormal scaling, so
``ifft2(fft2(x)) == x`` and Parseval holds without extra factors.  The DC
coefficient sits at index ``(0, 0)`` (standard DFT layout).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

MaskKind = Literal["cartesian1d", "random2d"]
Lambda = Union[float, Sequence[float], np.ndarray]

DEFAULT_LAMBDA = 1e6


class ParameterError(ValueError):
    """Raised for out-of-range numerical parameters."""


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


def fft2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes."""
    return np.fft.fft2(x, norm="ortho")


def ifft2(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`."""
    return np.fft.ifft2(k, norm="ortho")


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space selection grid in DFT layout (DC at the corner)."""

    grid: np.ndarray
    ratio_target: float
    kind: str
    seed: int
    center_fraction: float = 0.0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2:
            raise DimensionError(f"mask grid must be 2D, got shape {grid.shape}")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @property
    def achieved_ratio(self) -> float:
        return self.count / self.grid.size


def _central_block(n: int, m: int) -> np.ndarray:
    centre = n // 2
    shifted = np.arange(centre - m // 2, centre - m // 2 + m)
    return np.fft.ifftshift(np.arange(n))[shifted]


def _draw_remaining(rng, candidates, freq_sq, sigma_sq, k):
    if k <= 0:
        return np.empty(0, dtype=int)
    p = np.exp(-freq_sq / (2.0 * sigma_sq))
    p /= p.sum()
    return rng.choice(candidates, size=k, replace=False, p=p)


def make_mask(
    kind: MaskKind,
    H: int,
    W: int,
    ratio: float,
    center_fraction: float = 0.04,
    seed: int = 0,
    density_sigma: float = 0.25,
) -> SamplingMask:
    """Variable-density undersampling mask.

    Parameters
    ----------
    kind : {"cartesian1d", "random2d"}
        ``cartesian1d`` samples full rows (phase-encode lines); ``random2d``
        samples individual k-space points.
    H, W : int
        Grid size.
    ratio : float
        Target sampling ratio in (0, 1]. Exactly ``round(ratio * H)`` rows or
        ``round(ratio * H * W)`` points are selected.
    center_fraction : float
        Fraction of lowest-frequency rows/points that are always sampled.
    seed : int
        Seed for the random draw of the remaining samples.
    density_sigma : float
        Standard deviation of the Gaussian sampling density, as a fraction
        of the grid size.
    """
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio must lie in (0, 1], got {ratio}")
    if not 0.0 <= center_fraction < ratio:
        raise ParameterError(
            f"center_fraction must satisfy 0 <= center_fraction < ratio, got {center_fraction}"
        )
    if H < 2 or W < 2:
        raise ParameterError(f"mask size must be at least 2x2, got {H}x{W}")
    rng = np.random.default_rng(seed)
    grid = np.zeros((H, W), dtype=bool)

    if kind == "cartesian1d":
        n_total = int(round(ratio * H))
        n_centre = min(int(round(center_fraction * H)), n_total)
        centre = _central_block(H, n_centre)
        rest = np.setdiff1d(np.arange(H), centre)
        freq = np.fft.fftfreq(H, d=1.0 / H)[rest]
        extra = _draw_remaining(rng, rest, freq**2, (density_sigma * H) ** 2, n_total - n_centre)
        grid[np.concatenate([centre, extra]).astype(int), :] = True
    elif kind == "random2d":
        n_total = int(round(ratio * H * W))
        n_centre = min(int(round(center_fraction * H * W)), n_total)
        fy = np.fft.fftfreq(H, d=1.0 / H)[:, None]
        fx = np.fft.fftfreq(W, d=1.0 / W)[None, :]
        radius_sq = (fy / H) ** 2 + (fx / W) ** 2
        flat = radius_sq.ravel()
        # lowest radius first; raster order of the shifted grid breaks ties
        shifted_rank = np.fft.ifftshift(np.arange(H * W).reshape(H, W)).ravel()
        order = np.lexsort((shifted_rank, flat))
        centre = order[:n_centre]
        rest = order[n_centre:]
        extra = _draw_remaining(rng, rest, flat[rest], density_sigma**2, n_total - n_centre)
        grid.ravel()[np.concatenate([centre, extra]).astype(int)] = True
    else:
        raise ParameterError(f"unknown mask kind {kind!r}")

    return SamplingMask(grid, float(ratio), kind, int(seed), float(center_fraction))


def full_mask(H: int, W: int) -> SamplingMask:
    return SamplingMask(np.ones((H, W), dtype=bool), 1.0, "cartesian1d", 0, 0.0)


# ---------------------------------------------------------- measurements


@dataclass(frozen=True)
class KSpaceMeasurements:
    """Masked k-space samples of one contrast; exactly zero off the mask."""

    values: np.ndarray
    mask: SamplingMask

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise DimensionError(
                f"measurement shape {self.values.shape} != mask shape {self.mask.shape}"
            )


def undersample(x: np.ndarray, mask: SamplingMask) -> KSpaceMeasurements:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.shape:
        raise DimensionError(f"image shape {x.shape} != mask shape {mask.shape}")
    values = np.where(mask.grid, fft2(x.astype(np.complex128)), 0.0 + 0.0j)
    return KSpaceMeasurements(values, mask)


def zero_fill(y: KSpaceMeasurements) -> np.ndarray:
    """Real part of the inverse transform with unsampled coefficients at zero."""
    return ifft2(y.values).real


def _check_lambda(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ParameterError(f"fidelity weight must be finite and nonnegative, got {lam}")
    return lam


def fidelity_spectrum(x_in, y_values, mask_grid, lam) -> np.ndarray:
    """Complex closed-form minimiser of the per-contrast fidelity problem.

    Evaluates ``(lam*m*Y + F x_in) / (lam*m + 1)`` elementwise.  Arrays
    broadcast over leading axes; ``lam`` may be a scalar or broadcastable
    array (e.g. shape ``(L, 1, 1)`` for one weight per contrast).
    """
    lam = _check_lambda(lam)
    m = np.asarray(mask_grid, dtype=np.float64)
    K = fft2(np.asarray(x_in, dtype=np.float64))
    w = lam * m
    return (w * y_values + K) / (w + 1.0)


def data_fidelity(x_in: np.ndarray, y: KSpaceMeasurements, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    x_in = np.asarray(x_in)
    if x_in.shape != y.values.shape:
        raise DimensionError(f"input shape {x_in.shape} != measurement shape {y.values.shape}")
    return ifft2(fidelity_spectrum(x_in, y.values, y.mask.grid, lam)).real


def data_fidelity_vjp(upstream: np.ndarray, mask, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Transpose-Jacobian product of :func:`data_fidelity` w.r.t. its input.

    The map is linear with Fourier-domain Jacobian ``1 / (lam*m + 1)``, a
    real diagonal, so it is self-adjoint and this is also the forward
    Jacobian.  ``mask`` may be a :class:`SamplingMask` or a boolean array.
    """
    grid = mask.grid if isinstance(mask, SamplingMask) else mask
    lam = _check_lambda(lam)
    scale = 1.0 / (lam * np.asarray(grid, dtype=np.float64) + 1.0)
    return ifft2(scale * fft2(np.asarray(upstream, dtype=np.float64))).real


def sampled_relative_error(spectrum, y_values, mask_grid) -> float:
    """Norm-wise relative mismatch ``||m(K - Y)|| / ||m Y||`` at sampled positions."""
    m = np.asarray(mask_grid, dtype=bool)
    m = np.broadcast_to(m, np.broadcast_shapes(m.shape, np.shape(spectrum)))
    diff = np.asarray(spectrum)[m] - np.broadcast_to(y_values, m.shape)[m]
    ref = np.linalg.norm(np.broadcast_to(y_values, m.shape)[m])
    return float(np.linalg.norm(diff) / max(ref, 1e-300))
