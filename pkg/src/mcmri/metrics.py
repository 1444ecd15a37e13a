"""PSNR, SSIM and error-map rendering for images on a [0, 1] scale."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.

    Returns ``inf`` when the images agree to float64 round-off, i.e. the
    MSE is at most ``(4 eps peak)**2`` (about 301 dB), so a fully sampled
    FFT round trip reports the sentinel rather than a noise-floor value.
    """
    x, ref = _check_pair(x, ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((x - ref) ** 2)
    if mse <= (4 * np.finfo(np.float64).eps * peak) ** 2:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(x, ref, peak: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows.

    Uses sigma 1.5, K1 = 0.01, K2 = 0.03 and population (weighted, not
    bias-corrected) local moments.
    """
    x, ref = _check_pair(x, ref)
    if x.ndim != 2 or min(x.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs 2D images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    w = gaussian_window()
    m = SSIM_WIN // 2

    def filt(a):
        a = correlate1d(a, w, axis=0, mode="constant")
        a = correlate1d(a, w, axis=1, mode="constant")
        return a[m:-m, m:-m]

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(ref * ref) - mu_y * mu_y
    sxy = filt(x * ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def error_map(x, ref, clip_hi: float = 0.1) -> np.ndarray:
    """``|x - ref|`` clipped to ``[0, clip_hi]`` as uint8, rounding half up.

    A tiny slack (1e-9 grey levels) absorbs representation error so that,
    e.g., a difference of 0.05 at ``clip_hi=0.1`` maps to 128.
    """
    x, ref = _check_pair(x, ref)
    d = np.clip(np.abs(x - ref), 0.0, clip_hi) * (255.0 / clip_hi)
    return np.clip(np.floor(d + 0.5 + 1e-9), 0, 255).astype(np.uint8)


@dataclass
class MetricReport:
    identifier: str
    method: str
    contrasts: tuple[str, ...]
    psnr_db: tuple[float, ...]
    ssim: tuple[float, ...]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))


def evaluate_stack(recon, ref, identifier, method, contrasts) -> MetricReport:
    return MetricReport(
        identifier,
        method,
        tuple(contrasts),
        tuple(psnr(r, g) for r, g in zip(recon, ref)),
        tuple(ssim(r, g) for r, g in zip(recon, ref)),
    )


def write_metrics_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "contrast", "method", "psnr_db", "ssim"])
        for rep in reports:
            for c, p, s in zip(rep.contrasts, rep.psnr_db, rep.ssim):
                w.writerow([rep.identifier, c, rep.method, repr(p), repr(s)])
