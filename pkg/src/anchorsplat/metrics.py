"""Image quality metrics and tracking accuracy.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) in 'valid' mode,
averaged over channels; its analytic gradient w.r.t. the first image is
exposed for the photometric loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ConsistencyError

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WINDOW = 11
WINDOW_SIGMA = 1.5


def _gaussian_window() -> np.ndarray:
    half = (WINDOW - 1) / 2.0
    coords = np.arange(WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * WINDOW_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()

_KERNEL = _gaussian_window()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio over RGB in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConsistencyError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    mu_x = convolve2d(x, _KERNEL, mode="valid")
    mu_y = convolve2d(y, _KERNEL, mode="valid")
    x2 = convolve2d(x * x, _KERNEL, mode="valid")
    y2 = convolve2d(y * y, _KERNEL, mode="valid")
    xy = convolve2d(x * y, _KERNEL, mode="valid")
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * (xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = (x2 - mu_x**2) + (y2 - mu_y**2) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mu_x, mu_y, a1, a2, b1, b2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels; requires spatial dims >= the window."""
    val, _ = ssim_with_cache(a, b)
    return val


def ssim_with_cache(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConsistencyError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ConsistencyError(f"image must be at least {WINDOW}x{WINDOW} for SSIM")
    maps = []
    caches = []
    for c in range(a.shape[2]):
        s, cache = _ssim_channel(a[:, :, c], b[:, :, c])
        maps.append(s)
        caches.append(cache)
    value = float(np.mean(np.stack(maps)))
    return value, {"a": a, "b": b, "caches": caches, "maps": maps}


def ssim_backward(cache, upstream: float = 1.0) -> np.ndarray:
    """Gradient of mean SSIM w.r.t. the first image."""
    a = cache["a"]
    b = cache["b"]
    h, w, channels = a.shape
    nvalid = (h - WINDOW + 1) * (w - WINDOW + 1) * channels
    grad = np.zeros_like(a)
    for c in range(channels):
        mu_x, mu_y, a1, a2, b1, b2 = cache["caches"][c]
        s = cache["maps"][c]
        denom = b1 * b2
        d_mu_x = 2.0 * mu_y * (a2 - a1) / denom - 2.0 * mu_x * s * (1.0 / b1 - 1.0 / b2)
        d_x2 = -s / b2
        d_xy = 2.0 * a1 / denom
        scale = upstream / nvalid
        u_mu = convolve2d(d_mu_x * scale, _KERNEL, mode="full")
        u_x2 = convolve2d(d_x2 * scale, _KERNEL, mode="full")
        u_xy = convolve2d(d_xy * scale, _KERNEL, mode="full")
        grad[:, :, c] = u_mu + u_x2 * 2.0 * a[:, :, c] + u_xy * b[:, :, c]
    return grad


def pck_t(predicted: np.ndarray, gt: np.ndarray, threshold_frac: float,
          image_size: tuple[int, int], valid: np.ndarray | None = None) -> float:
    """Fraction of valid (track, frame) samples whose 2D error is strictly
    below threshold_frac * image diagonal."""
    predicted = np.asarray(predicted, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if predicted.shape != gt.shape or predicted.shape[-1] != 2:
        raise ConsistencyError(f"track shapes differ: {predicted.shape} vs {gt.shape}")
    w, h = image_size
    diag = float(np.hypot(w, h))
    err = np.linalg.norm(predicted - gt, axis=-1)
    mask = np.ones(err.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if mask.shape != err.shape:
        raise ConsistencyError("validity mask shape mismatch")
    total = int(mask.sum())
    if total == 0:
        return 0.0
    hits = int(((err < threshold_frac * diag) & mask).sum())
    return hits / total


@dataclass
class EvalReport:
    frame_psnr: list = field(default_factory=list)
    frame_ssim: list = field(default_factory=list)
    pck: float = float("nan")
    seconds: float = 0.0
    num_gaussians: int = 0

    def mean_psnr(self) -> float:
        return float(np.mean(self.frame_psnr)) if self.frame_psnr else float("nan")

    def mean_ssim(self) -> float:
        return float(np.mean(self.frame_ssim)) if self.frame_ssim else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "psnr", "ssim"])
            for i, (p, s) in enumerate(zip(self.frame_psnr, self.frame_ssim), start=1):
                writer.writerow([i, "%.17g" % p, "%.17g" % s])
            writer.writerow(["pck_t", "%.17g" % self.pck])
            writer.writerow(["seconds", "%.17g" % self.seconds])

    @staticmethod
    def read_csv(path) -> "EvalReport":
        report = EvalReport()
        with open(path, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0] == "frame":
                    continue
                if row[0] == "pck_t":
                    report.pck = float(row[1])
                elif row[0] == "seconds":
                    report.seconds = float(row[1])
                else:
                    report.frame_psnr.append(float(row[1]))
                    report.frame_ssim.append(float(row[2]))
        return report
