"""Full-reference image quality metrics: PSNR and SSIM.

PSNR is computed over all channels; SSIM follows the canonical
configuration (11-tap Gaussian window, sigma 1.5, K1 0.01, K2 0.03,
dynamic range 1.0) evaluated on the 0.299/0.587/0.114 luminance channel
with valid-region windowing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputError, ParameterError
from .haze_model import LUMA_WEIGHTS

PSNR_CAP_DB = 100.0


def psnr(a, b, peak=1.0, cap=PSNR_CAP_DB):
    """Peak signal-to-noise ratio in dB; zero-MSE pairs return the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ParameterError(f"peak must be positive, got {peak}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak**2 / mse), cap)


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _to_luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        w = np.asarray(LUMA_WEIGHTS).reshape(3, 1, 1)
        return (img * w).sum(axis=0)
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise InputError(f"expected (H, W), (1, H, W) or (3, H, W), got shape {img.shape}")


def _filter_valid(img, window):
    # separable Gaussian, then crop to the region unaffected by padding
    pad = (len(window) - 1) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[pad:-pad, pad:-pad] if pad else out


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Mean local structural similarity with Gaussian weighting."""
    if window % 2 == 0 or window < 3:
        raise ParameterError(f"window must be an odd integer >= 3, got {window}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = _to_luminance(a)
    y = _to_luminance(b)
    if min(x.shape) < window:
        raise InputError(f"image {x.shape} smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    xx = _filter_valid(x * x, w)
    yy = _filter_valid(y * y, w)
    xy = _filter_valid(x * y, w)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows plus their means."""

    rows: list = field(default_factory=list)  # entries: (id, psnr_db, ssim)
    psnr_cap: float = PSNR_CAP_DB
    ssim_window: int = 11

    def add(self, image_id, psnr_db, ssim_value):
        self.rows.append((str(image_id), float(psnr_db), float(ssim_value)))

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for image_id, p, s in self.rows:
                fh.write(json.dumps({"id": image_id, "psnr": p, "ssim": s}) + "\n")
            fh.write(
                json.dumps(
                    {
                        "summary": True,
                        "n": len(self.rows),
                        "mean_psnr": self.mean_psnr,
                        "mean_ssim": self.mean_ssim,
                    }
                )
                + "\n"
            )

    def summary_line(self):
        return (
            f"n={len(self.rows)} mean_psnr={self.mean_psnr:.4f} dB "
            f"mean_ssim={self.mean_ssim:.6f}"
        )


def compare(a, b, image_id="0"):
    """Convenience: one (psnr, ssim) pair as a single-row report entry."""
    return psnr(a, b), ssim(a, b)
