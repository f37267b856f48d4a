"""Full-image and region-masked fidelity metrics, and spectrum rendering.

Images are numpy arrays, (H, W) or (H, W, C), with values in [0, 1].
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
LUMA = np.array([0.2126, 0.7152, 0.0722])


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def psnr(pred, target) -> float:
    """PSNR in dB for unit peak; capped at 100 dB (zero error)."""
    pred, target = _check(pred, target)
    return _psnr_from_mse(float(np.mean((pred - target) ** 2)))


def masked_psnr(pred, target, mask) -> float | None:
    """PSNR over the mask-positive pixels (all channels).

    Returns None when the mask is empty: the metric does not apply.
    """
    pred, target = _check(pred, target)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {pred.shape[:2]}")
    if not mask.any():
        return None
    err = (pred - target) ** 2
    return _psnr_from_mse(float(np.mean(err[mask])))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation keeping only fully covered positions
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(pred, target, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a gaussian window, averaged over channels."""
    pred, target = _check(pred, target)
    if pred.shape[0] < win_size or pred.shape[1] < win_size:
        raise ValueError(f"image {pred.shape[:2]} is smaller than the {win_size}x{win_size} window")
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    c1, c2 = k1**2, k2**2
    g = _gaussian_window(win_size, sigma)
    vals = []
    for ch in range(pred.shape[-1]):
        x, y = pred[..., ch], target[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx**2
        vy = _filter_valid(y * y, g) - my**2
        cxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def luminance(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[-1] == 3:
        return image @ LUMA
    return image.mean(-1)


def log_spectrum(image) -> np.ndarray:
    """log(1 + |F|) of the luminance, full spectrum with DC at the centre."""
    lum = luminance(image)
    f = np.fft.fftshift(np.fft.fft2(lum, norm="ortho"))
    return np.log1p(np.abs(f))


def spectrum_image(image) -> np.ndarray:
    """Centred log-amplitude spectrum scaled to [0, 1].

    The scaling uses the non-DC bins only (DC is clipped into range), so
    adding a constant to the image changes only the DC pixel. A spectrum
    with no non-DC energy renders as a single bright centre pixel.
    """
    spec = log_spectrum(image)
    h, w = spec.shape
    dc = (h // 2, w // 2)
    rest = np.delete(spec.ravel(), dc[0] * w + dc[1])
    lo, hi = rest.min(), rest.max()
    if hi - lo <= 1e-12:
        out = np.zeros_like(spec)
        out[dc] = 1.0 if spec[dc] > hi + 1e-12 else 0.0
        return out
    out = np.clip((spec - lo) / (hi - lo), 0.0, 1.0)
    return out


def high_frequency_log_magnitude(image, radius_fraction: float = 1 / 8) -> float:
    """Mean log(1 + |F|) outside a central disk around DC.

    The disk radius is ``radius_fraction`` of the Nyquist radius min(H, W) / 2.
    """
    spec = log_spectrum(image)
    h, w = spec.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - h // 2, xx - w // 2)
    return float(spec[r > radius_fraction * min(h, w) / 2].mean())
