"""PSNR and SSIM on [0, 1] images (NCHW arrays or engine tensors)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x):
    data = x.data if hasattr(x, "data") else np.asarray(x)
    if data.ndim != 4:
        raise ValueError(f"expected NCHW, got shape {data.shape}")
    return np.asarray(data, dtype=np.float64)


def psnr(a, b):
    """10*log10(1/MSE) over all channels and pixels, capped at 99 dB."""
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, kernel):
    """Separable valid-mode correlation of a 2-d image with a 1-d kernel."""
    k = len(kernel)
    h, w = img.shape
    out = np.zeros((h - k + 1, w), dtype=img.dtype)
    for i, kv in enumerate(kernel):
        out += kv * img[i:i + h - k + 1, :]
    out2 = np.zeros((h - k + 1, w - k + 1), dtype=img.dtype)
    for j, kv in enumerate(kernel):
        out2 += kv * out[:, j:j + w - k + 1]
    return out2


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean local SSIM over valid window positions, averaged over channels.

    Gaussian window, K1 = 0.01, K2 = 0.03, data range 1. Valid-window
    convention: no border padding.
    """
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window}")
    kernel = gaussian_window(window, sigma)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ni in range(n):
        for ci in range(c):
            xa = x[ni, ci]
            yb = y[ni, ci]
            mu_x = _filter_valid(xa, kernel)
            mu_y = _filter_valid(yb, kernel)
            xx = _filter_valid(xa * xa, kernel) - mu_x * mu_x
            yy = _filter_valid(yb * yb, kernel) - mu_y * mu_y
            xy = _filter_valid(xa * yb, kernel) - mu_x * mu_y
            num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
            den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
            vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """Per-image rows plus aggregate means; data range fixed at [0, 1]."""

    rows: list = field(default_factory=list)  # (image_id, psnr_db, ssim)
    window: int = SSIM_WINDOW

    def add(self, image_id, psnr_db, ssim_val):
        self.rows.append((image_id, float(psnr_db), float(ssim_val)))

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows]))

    def to_tsv(self):
        lines = ["id\tpsnr_db\tssim\tlpips"]
        for image_id, p, s in self.rows:
            lines.append(f"{image_id}\t{p:.6f}\t{s:.6f}\tn/a")
        lines.append(f"mean\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}\tn/a")
        return "\n".join(lines) + "\n"

    def render(self):
        width = max([len(str(r[0])) for r in self.rows] + [4])
        lines = [f"{'id':<{width}}  {'psnr_db':>9}  {'ssim':>7}  lpips"]
        for image_id, p, s in self.rows:
            lines.append(f"{image_id:<{width}}  {p:>9.3f}  {s:>7.4f}  n/a")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:>9.3f}  {self.mean_ssim:>7.4f}  n/a")
        return "\n".join(lines)
