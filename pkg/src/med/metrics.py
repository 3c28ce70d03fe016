"""PSNR and SSIM on [0, 1] images."""

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b, mask=None):
    """10 log10(1 / MSE) over all channels, capped at 100 dB.

    With ``mask`` (H, W, 1 or H, W) only pixels where mask is nonzero count.
    """
    a, b = _pair(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        sel = np.broadcast_to(np.asarray(mask).reshape(a.shape[0], a.shape[1], -1) != 0, a.shape)
        if not sel.any():
            return PSNR_CAP
        mse = sq[sel].mean()
    else:
        mse = sq.mean()
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    r = len(g) // 2
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b, data_range=1.0, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Gaussian-window SSIM over the valid region, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < win:
        raise ValueError(f"SSIM needs both sides >= {win}, got {a.shape[:2]}")
    g = gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))
