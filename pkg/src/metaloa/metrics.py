"""Reconstruction quality metrics on magnitude images.

``x`` is always the reconstruction and ``ref`` the ground truth.  NMSE is
normalized by the reconstruction, not the reference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

REPORT_FIELDS = (
    "ratio", "pattern", "method",
    "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "nmse_mean", "nmse_std",
    "sigma_omega",
)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _mag(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.abs(np.asarray(a)).astype(np.float64)


def _pair(x, ref):
    x, ref = _mag(x), _mag(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref) -> float:
    """20 log10(max|ref| / RMSE); ``inf`` for an exact match."""
    x, ref = _pair(x, ref)
    peak = ref.max()
    if peak == 0:
        raise ValueError("reference image is identically zero")
    rmse = math.sqrt(np.mean((ref - x) ** 2))
    if rmse == 0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, ref, window: np.ndarray | None = None, k1=SSIM_K1, k2=SSIM_K2) -> np.ndarray:
    """Local SSIM over every window position fully inside the image."""
    x, ref = _pair(x, ref)
    w = gaussian_window() if window is None else window
    if x.shape[0] < w.shape[0] or x.shape[1] < w.shape[1]:
        raise ValueError(f"image {x.shape} smaller than the {w.shape} window")
    peak = ref.max()
    L = peak if peak > 0 else 1.0  # all-zero reference: keep the constants positive
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    filt = lambda a: convolve2d(a, w[::-1, ::-1], mode="valid")
    mu_x, mu_r = filt(x), filt(ref)
    # population moments under the window weights
    sxx = filt(x * x) - mu_x**2
    srr = filt(ref * ref) - mu_r**2
    sxr = filt(x * ref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * sxr + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (sxx + srr + c2)
    return num / den


def ssim(x, ref, window: np.ndarray | None = None, k1=SSIM_K1, k2=SSIM_K2) -> float:
    x, ref = _pair(x, ref)
    if np.array_equal(x, ref):
        return 1.0
    return float(ssim_map(x, ref, window, k1, k2).mean())


def nmse(x, ref) -> float:
    """||x - ref||^2 / ||x||^2 with ``x`` the reconstruction."""
    x, ref = _pair(x, ref)
    denom = np.sum(x**2)
    diff = np.sum((x - ref) ** 2)
    if denom == 0:
        if diff == 0:
            return 0.0
        raise ValueError("reconstruction is identically zero")
    return float(diff / denom)


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    nmse: list[float] = field(default_factory=list)

    def add(self, x, ref) -> None:
        self.psnr.append(psnr(x, ref))
        self.ssim.append(ssim(x, ref))
        self.nmse.append(nmse(x, ref))

    def __len__(self):
        return len(self.psnr)

    @staticmethod
    def _ms(v: Sequence[float]) -> tuple[float, float]:
        a = np.asarray(v, dtype=np.float64)
        if np.isinf(a).any():
            return float(a.mean()), math.nan if len(a) > 1 else 0.0
        return float(a.mean()), float(a.std())

    def summary(self) -> dict:
        out = {}
        for name in ("psnr", "ssim", "nmse"):
            m, s = self._ms(getattr(self, name))
            out[f"{name}_mean"], out[f"{name}_std"] = m, s
        return out

    def rows(self, ratio, pattern, method, sigma_omega, per_image: bool = True) -> list[dict]:
        """Per-image rows (``method:imgNNN``, std 0) followed by the aggregate row."""
        rows = []
        if per_image:
            for i, (p, s, n) in enumerate(zip(self.psnr, self.ssim, self.nmse)):
                rows.append({
                    "ratio": ratio, "pattern": pattern, "method": f"{method}:img{i:03d}",
                    "psnr_mean": p, "psnr_std": 0.0, "ssim_mean": s, "ssim_std": 0.0,
                    "nmse_mean": n, "nmse_std": 0.0, "sigma_omega": sigma_omega,
                })
        rows.append({"ratio": ratio, "pattern": pattern, "method": method,
                     **self.summary(), "sigma_omega": sigma_omega})
        return rows


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return "" if v is None else str(v)


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in REPORT_FIELDS})


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k in REPORT_FIELDS:
                v = r[k]
                if k in ("pattern", "method"):
                    row[k] = v
                elif v == "":
                    row[k] = None
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows
