"""Image quality, rate, and Bjontegaard-delta metrics."""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple, Tuple

import numpy as np
from scipy.ndimage import correlate1d

LUMA_WEIGHTS = {
    "bt709": (0.2126, 0.7152, 0.0722),
    "bt601": (0.299, 0.587, 0.114),
}
PSNR_CAP = 100.0
MSSSIM_DB_CAP = 60.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03


def rgb_to_y(image, standard: str = "bt709") -> np.ndarray:
    """Luma of an ``(..., 3)`` RGB array on the same scale as the input."""
    wr, wg, wb = LUMA_WEIGHTS[standard]
    image = np.asarray(image, dtype=np.float64)
    return wr * image[..., 0] + wg * image[..., 1] + wb * image[..., 2]


def mse(ref, rec) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    return float(np.mean((ref - rec) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    if err <= 0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / err))


def psnr(ref, rec, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    return psnr_from_mse(mse(ref, rec), peak, cap)


def _views(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape((-1,) + a.shape[-3:])


def psnr_y(ref, rec, standard: str = "bt709", aggregate: str = "view") -> float:
    """Luma PSNR over a stack of views ``(..., h, w, 3)``.

    ``aggregate="view"`` averages per-view PSNR; ``"mse"`` pools the error first.
    """
    ry = rgb_to_y(_views(ref), standard)
    cy = rgb_to_y(_views(rec), standard)
    if aggregate == "mse":
        return psnr(ry, cy)
    return float(np.mean([psnr(a, b) for a, b in zip(ry, cy)]))


def psnr_rgb(ref, rec, aggregate: str = "view") -> float:
    ref, rec = _views(ref), _views(rec)
    if aggregate == "mse":
        return psnr(ref, rec)
    return float(np.mean([psnr(a, b) for a, b in zip(ref, rec)]))


# ---------------------------------------------------------------------------
# MS-SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(correlate1d(a, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
    return out[r:a.shape[0] - r, r:a.shape[1] - r]


def ssim_components(x: np.ndarray, y: np.ndarray, win: np.ndarray, peak: float = 1.0) -> Tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over valid windows."""
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x ** 2
    syy = _filter_valid(y * y, win) - mu_y ** 2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def max_scales(h: int, w: int, window: int = 11) -> int:
    s = 0
    while min(h, w) >> s >= window and s < len(MSSSIM_WEIGHTS):
        s += 1
    return s


def ms_ssim(ref, rec, peak: float = 1.0, scales: int = 5, window: int = 11, sigma: float = 1.5) -> float:
    """Multi-scale SSIM of two 2D images (canonical five-scale weights).

    Images too small for ``scales`` levels use fewer levels with the leading
    weights renormalized, and a warning is issued.
    """
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(rec, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ms_ssim expects two 2D images of equal shape")
    avail = max_scales(*x.shape, window)
    if avail < 1:
        raise ValueError(f"image {x.shape} too small for an {window}x{window} window")
    if avail < scales:
        warnings.warn(f"image {x.shape} supports only {avail} MS-SSIM scales", stacklevel=2)
        scales = avail
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    if scales < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()
    win = gaussian_window(window, sigma)
    score = 1.0
    for j in range(scales):
        s, cs = ssim_components(x, y, win, peak)
        term = s if j == scales - 1 else cs
        score *= max(term, 0.0) ** weights[j]
        if j < scales - 1:
            x, y = _downsample(x), _downsample(y)
    return float(score)


def msssim_db(score: float, cap: float = MSSSIM_DB_CAP) -> float:
    if score >= 1.0:
        return cap
    return min(cap, -10.0 * math.log10(1.0 - score))


def ms_ssim_y(ref, rec, standard: str = "bt709", scales: int = 5) -> float:
    """Per-view luma MS-SSIM in dB, averaged over the views of ``(..., h, w, 3)``."""
    ry = rgb_to_y(_views(ref), standard)
    cy = rgb_to_y(_views(rec), standard)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vals = [msssim_db(ms_ssim(a, b, scales=scales)) for a, b in zip(ry, cy)]
    if max_scales(*ry.shape[1:]) < scales:
        warnings.warn(f"views of size {ry.shape[1:]} use fewer than {scales} MS-SSIM scales", stacklevel=2)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Rate


def bits_per_pixel(n_bytes, h: int, w: int, views: int = 64) -> float:
    """Container bits over unpadded light field pixels. Accepts a byte count or the bytes."""
    if not isinstance(n_bytes, (int, np.integer)):
        n_bytes = len(n_bytes)
    return 8.0 * int(n_bytes) / (views * h * w)


# ---------------------------------------------------------------------------
# Bjontegaard deltas


class BDResult(NamedTuple):
    bd_br_percent: float
    bd_psnr_db: float
    low_confidence: bool


def _curve_arrays(curve) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(curve, "rates"):
        rates, quality = curve.rates(), curve.quality()
    else:
        rates, quality = curve
    rates = np.asarray(rates, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if rates.shape != quality.shape or rates.ndim != 1:
        raise ValueError("rate and quality must be 1D arrays of equal length")
    if len(rates) < 2:
        raise ValueError("a curve needs at least two points")
    if np.any(rates <= 0):
        raise ValueError("rates must be positive")
    return rates, quality


def _avg_poly_diff(xa, ya, xb, yb, degree) -> float:
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if not hi > lo:
        return float("nan")
    pa = np.polyint(np.polyfit(xa, ya, degree))
    pb = np.polyint(np.polyfit(xb, yb, degree))
    area_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    area_b = np.polyval(pb, hi) - np.polyval(pb, lo)
    return float((area_b - area_a) / (hi - lo))


def bd_metrics(curve_a, curve_b) -> BDResult:
    """Bjontegaard deltas of curve B against anchor curve A.

    Curves are ``RDCurve`` objects or ``(rates, psnr)`` pairs. Quality is fit
    as a polynomial in log10(rate) (cubic with four or more points, lower
    degree otherwise, flagged ``low_confidence``) and the difference is
    averaged over the overlapping interval; BD-BR swaps the axes and is
    reported in percent. A delta whose axis has no overlap is NaN; if
    neither axis overlaps the curves are not comparable and ValueError is
    raised.
    """
    ra, qa = _curve_arrays(curve_a)
    rb, qb = _curve_arrays(curve_b)
    degree = min(3, len(ra) - 1, len(rb) - 1)
    la, lb = np.log10(ra), np.log10(rb)
    bd_psnr = _avg_poly_diff(la, qa, lb, qb, degree)
    avg_log_rate = _avg_poly_diff(qa, la, qb, lb, degree)
    if math.isnan(bd_psnr) and math.isnan(avg_log_rate):
        raise ValueError("curves do not overlap in rate or quality")
    # a sliver of quality overlap can extrapolate far enough to overflow
    with np.errstate(over="ignore"):
        bd_br = float(np.expm1(avg_log_rate * math.log(10.0)) * 100.0)
    return BDResult(bd_br, bd_psnr, degree < 3)
