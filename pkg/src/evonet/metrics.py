"""Band-averaged image quality metrics: MPSNR, MSSIM and ERGAS.

Each metric is computed per band on ``H x W x C`` data and then averaged
over bands, so reordering the bands of both cubes leaves it unchanged.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import HsiCube

PSNR_CAP = 100.0


def _pair(clean, test) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(clean, HsiCube):
        peak = clean.peak
        clean = clean.data
    else:
        peak = 1.0
    test = test.data if isinstance(test, HsiCube) else test
    clean = np.asarray(clean, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if clean.shape != test.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {test.shape}")
    return clean, test, peak


def band_psnr(clean, test, peak: float | None = None, cap: float = PSNR_CAP) -> np.ndarray:
    c, t, cube_peak = _pair(clean, test)
    peak = cube_peak if peak is None else peak
    mse = np.mean((c - t) ** 2, axis=(0, 1))
    out = np.full(mse.shape, cap)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(peak ** 2 / mse[nz])
    return out


def mpsnr(clean, test, peak: float | None = None, cap: float = PSNR_CAP) -> float:
    """Mean over bands of ``10 log10(peak**2 / MSE_b)``; zero-error bands score ``cap``."""
    return float(np.mean(band_psnr(clean, test, peak, cap)))


def band_ssim(clean, test, peak: float | None = None, window: int = 8) -> np.ndarray:
    """Per-band SSIM with a uniform ``window x window`` sliding window at stride 1.

    Window statistics are population moments (weights 1/window**2). The band
    score is the mean of the SSIM map.
    """
    c, t, cube_peak = _pair(clean, test)
    peak = cube_peak if peak is None else peak
    if window > c.shape[0] or window > c.shape[1]:
        raise ValueError(f"SSIM window {window} larger than image {c.shape[0]}x{c.shape[1]}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wc = sliding_window_view(c, (window, window), axis=(0, 1))  # Ho, Wo, C, w, w
    wt = sliding_window_view(t, (window, window), axis=(0, 1))
    mu_c = wc.mean(axis=(-2, -1))
    mu_t = wt.mean(axis=(-2, -1))
    dc = wc - mu_c[..., None, None]
    dt = wt - mu_t[..., None, None]
    var_c = (dc * dc).mean(axis=(-2, -1))
    var_t = (dt * dt).mean(axis=(-2, -1))
    cov = (dc * dt).mean(axis=(-2, -1))
    smap = ((2 * mu_c * mu_t + c1) * (2 * cov + c2)) / (
        (mu_c ** 2 + mu_t ** 2 + c1) * (var_c + var_t + c2))
    return smap.mean(axis=(0, 1))


def mssim(clean, test, peak: float | None = None, window: int = 8) -> float:
    return float(np.mean(band_ssim(clean, test, peak, window)))


def band_ergas_terms(clean, test) -> np.ndarray:
    """``(RMSE_b / mean_b)**2`` per band."""
    c, t, _ = _pair(clean, test)
    mu = c.mean(axis=(0, 1))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise ValueError(f"ERGAS undefined: bands with zero mean {zero.tolist()}")
    rmse = np.sqrt(np.mean((c - t) ** 2, axis=(0, 1)))
    return (rmse / mu) ** 2


def mergas(clean, test, scale_ratio: float = 1.0) -> float:
    """ERGAS, ``100 * scale_ratio * sqrt(mean_b (RMSE_b / mean_b)**2)``; lower is better."""
    return float(100.0 * scale_ratio * np.sqrt(np.mean(band_ergas_terms(clean, test))))


def report(clean: HsiCube, test: HsiCube, window: int = 8) -> dict:
    psnr = band_psnr(clean, test)
    ssim = band_ssim(clean, test, window=window)
    terms = band_ergas_terms(clean, test)
    return {
        "mpsnr": float(np.mean(psnr)),
        "mssim": float(np.mean(ssim)),
        "mergas": float(100.0 * np.sqrt(np.mean(terms))),
        "bands": {
            "psnr": psnr.tolist(),
            "ssim": ssim.tolist(),
            "ergas_terms": terms.tolist(),
        },
    }
