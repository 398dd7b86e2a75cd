"""Reconstruction quality metrics: RMSE, PSNR and SSIM.

Parametric maps carry physical values (m/s) rather than 8-bit intensities,
so the peak for PSNR/SSIM defaults to the dynamic range of the reference
map, max(ref) - min(ref).  PSNR and RMSE are duals by construction:
psnr = 20 log10(peak / rmse), with identical maps reporting +inf.

SSIM is the mean local index over all fully-interior 11x11 windows with a
sigma = 1.5 Gaussian weight and stability constants K1 = 0.01 and
K2 = 0.03 on the same dynamic range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import _as_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    rmse: float
    ssim: float
    peak_used: float


def _pair(ref, test):
    r = _as_array(ref)
    t = _as_array(test)
    if r.shape != t.shape:
        raise ValueError(f"dimension mismatch: {r.shape} vs {t.shape}")
    return r, t


def rmse(ref, test) -> float:
    """sqrt(mean((ref - test)^2))."""
    r, t = _pair(ref, test)
    return float(np.sqrt(np.mean((r - t) ** 2)))


def default_peak(ref) -> float:
    r = _as_array(ref)
    return float(r.max() - r.min())


def psnr(ref, test, peak: float | None = None) -> float:
    """20 log10(peak / rmse); +inf for identical maps."""
    r, t = _pair(ref, test)
    if peak is None:
        peak = default_peak(ref)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    e = rmse(r, t)
    if e == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / e)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test, peak: float | None = None) -> float:
    """Mean local SSIM over all interior windows.

    The local statistics are Gaussian-weighted means/variances/covariance;
    the dynamic range defaults to max(ref) - min(ref) as in :func:`psnr`.
    """
    r, t = _pair(ref, test)
    if r.shape[0] < SSIM_WINDOW or r.shape[1] < SSIM_WINDOW:
        raise ValueError(f"maps must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if peak is None:
        peak = default_peak(ref)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    w = gaussian_window()

    def windowed(img):
        # valid-mode Gaussian filtering via the 11x11 shift expansion
        h = img.shape[0] - SSIM_WINDOW + 1
        v = img.shape[1] - SSIM_WINDOW + 1
        out = np.zeros((h, v))
        for a in range(SSIM_WINDOW):
            for b in range(SSIM_WINDOW):
                out += w[a, b] * img[a : a + h, b : b + v]
        return out

    mu_r = windowed(r)
    mu_t = windowed(t)
    var_r = windowed(r * r) - mu_r**2
    var_t = windowed(t * t) - mu_t**2
    cov = windowed(r * t) - mu_r * mu_t
    num = (2.0 * mu_r * mu_t + c1) * (2.0 * cov + c2)
    den = (mu_r**2 + mu_t**2 + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def evaluate(ref, test, peak: float | None = None) -> MetricReport:
    """All three metrics against a reference map."""
    r, t = _pair(ref, test)
    if peak is None:
        peak = default_peak(r)
    return MetricReport(
        psnr_db=psnr(r, t, peak),
        rmse=rmse(r, t),
        ssim=ssim(r, t, peak),
        peak_used=peak,
    )


def format_metric(x: float) -> str:
    """Repr-precision float field; infinities as the 'inf' literal."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def reports_to_csv(rows, path) -> None:
    """MetricReport rows as CSV: method, freq_label, psnr, rmse, ssim."""
    with open(path, "w") as fh:
        fh.write("method,freq_label,psnr,rmse,ssim\n")
        for method, freq_label, report in rows:
            fh.write(
                f"{method},{freq_label},{format_metric(report.psnr_db)},"
                f"{format_metric(report.rmse)},{format_metric(report.ssim)}\n"
            )
