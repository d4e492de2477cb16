"""Image quality (PSNR, SSIM) and depth error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .errors import ConfigError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_hwc(img) -> np.ndarray:
    """Accept (C, H, W) tensors or (H, W[, C]) arrays; return float64 (H, W, C) clamped to [0, 1]."""
    if isinstance(img, torch.Tensor):
        a = img.detach().cpu().numpy()
        if a.ndim == 3:
            a = a.transpose(1, 2, 0)
    else:
        a = np.asarray(img)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    return np.clip(a, 0.0, 1.0)


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB; identical images give 99 dB."""
    a, b = _to_hwc(pred), _to_hwc(target)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation over the two spatial axes, keeping only fully covered pixels."""
    out = correlate1d(img, w, axis=0, mode="reflect")
    out = correlate1d(out, w, axis=1, mode="reflect")
    r = len(w) // 2
    return out[r:-r, r:-r]


def ssim(pred, target) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Statistics use the unbiased (N-1) covariance normalization, and the mean
    is taken over pixels whose window lies inside the image; color images
    average the per-channel values.
    """
    a, b = _to_hwc(pred), _to_hwc(target)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ConfigError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    n = SSIM_WINDOW * SSIM_WINDOW
    cov_norm = n / (n - 1)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        ux, uy = _filter(x, w), _filter(y, w)
        vx = cov_norm * (_filter(x * x, w) - ux * ux)
        vy = cov_norm * (_filter(y * y, w) - uy * uy)
        vxy = cov_norm * (_filter(x * y, w) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class DepthErrors:
    mae: float
    rmse: float
    abs_rel: float
    frac_within: dict[float, float]
    count: int


def depth_errors(pred, gt, mask=None, thresholds=(1.0,)) -> DepthErrors:
    """Error statistics over masked pixels; ``frac_within[t]`` counts |error| <= t."""
    p = np.asarray(pred.detach() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    g = np.asarray(gt.detach() if isinstance(gt, torch.Tensor) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ConfigError(f"depth shapes differ: {p.shape} vs {g.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ConfigError("depth_errors: empty mask")
    e = p[m] - g[m]
    if not np.isfinite(e).all():
        raise ConfigError("depth_errors: non-finite values under the mask")
    ae = np.abs(e)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(g[m] != 0, ae / np.abs(g[m]), np.nan)
    return DepthErrors(
        mae=float(ae.mean()),
        rmse=float(np.sqrt((e**2).mean())),
        abs_rel=float(np.nanmean(rel)) if np.isfinite(rel).any() else float("nan"),
        frac_within={float(t): float((ae <= t).mean()) for t in thresholds},
        count=int(m.sum()),
    )
