"""Undersampled Fourier operators, sampling masks, phantoms and task datasets.

Conventions
-----------
* Images are complex128 tensors of shape (H, W) or (B, H, W).
* k-space uses the native FFT layout (DC at index [0, 0]) with unitary
  normalization, so the data-fidelity gradient is 1-Lipschitz.
* Masks are stored in the same native layout.  ``SamplingMask.centered()``
  gives the display layout with DC in the middle.
* Measurements live on the full grid with exact zeros off the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import CDTYPE, DTYPE

PATTERNS = ("radial", "cartesian")
RATIO_TOL = 0.02


def as_complex(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.is_complex():
        return x.to(CDTYPE)
    return x.to(DTYPE).to(CDTYPE)


def dft2(x: torch.Tensor) -> torch.Tensor:
    return torch.fft.fft2(as_complex(x), norm="ortho")


def idft2(k: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(as_complex(k), norm="ortho")


@dataclass
class SamplingMask:
    values: np.ndarray  # (H, W) uint8, native FFT layout
    pattern: str
    ratio: float

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def achieved_ratio(self) -> float:
        return float(self.values.mean())

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.values.astype(np.float64))

    def centered(self) -> np.ndarray:
        return np.fft.fftshift(self.values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SamplingMask)
            and self.pattern == other.pattern
            and self.ratio == other.ratio
            and np.array_equal(self.values, other.values)
        )


def _mask_tensor(mask) -> torch.Tensor:
    if isinstance(mask, SamplingMask):
        return mask.tensor()
    return torch.as_tensor(mask).to(DTYPE)


def _check_dims(x: torch.Tensor, m: torch.Tensor) -> None:
    if tuple(x.shape[-2:]) != tuple(m.shape[-2:]):
        raise ValueError(f"image dims {tuple(x.shape[-2:])} do not match mask dims {tuple(m.shape[-2:])}")


def apply_mask(k: torch.Tensor, mask) -> torch.Tensor:
    m = _mask_tensor(mask)
    _check_dims(k, m)
    return k * m


def forward_model(x, mask, noise_std: float = 0.0, seed: int | None = None) -> torch.Tensor:
    """Masked k-space measurement ``mask * (dft2(x) + n)``."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    x = as_complex(x)
    m = _mask_tensor(mask)
    _check_dims(x, m)
    k = dft2(x)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        n = rng.normal(0.0, noise_std, size=(2,) + tuple(k.shape))
        k = k + torch.complex(torch.from_numpy(n[0]), torch.from_numpy(n[1]))
    return k * m


def data_fidelity(x, y, mask) -> torch.Tensor:
    """0.5 * ||mask * dft2(x) - y||^2, per batch entry."""
    m = _mask_tensor(mask)
    r = dft2(x) * m - y
    return 0.5 * (r.real.square() + r.imag.square()).sum(dim=(-2, -1))


def grad_data_fidelity(x, y, mask) -> torch.Tensor:
    m = _mask_tensor(mask)
    return idft2(m * (dft2(x) * m - y))


def zero_fill(y) -> torch.Tensor:
    return idft2(y)


# -- masks -------------------------------------------------------------------


def _check_ratio(ratio: float) -> None:
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")


def _radial_pattern(h: int, w: int, n_spokes: int, offset: float) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    cy, cx = h // 2, w // 2
    reach = math.hypot(h, w)
    t = np.arange(-reach, reach + 0.25, 0.25)
    theta = offset + math.pi * np.arange(n_spokes)[:, None] / n_spokes
    rows = np.rint(cy + t * np.sin(theta)).astype(int).ravel()
    cols = np.rint(cx + t * np.cos(theta)).astype(int).ravel()
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    m[rows[keep], cols[keep]] = 1
    return m


def gen_radial_mask(h: int, w: int, ratio: float, seed: int = 0) -> SamplingMask:
    """Equiangular spokes through the k-space center.

    Spoke count and fan rotation are chosen jointly so the achieved ratio is
    closest to ``ratio``; the seed fixes the candidate rotations.
    """
    _check_ratio(ratio)
    if ratio >= 1.0:
        return SamplingMask(np.ones((h, w), dtype=np.uint8), "radial", float(ratio))
    offsets = np.random.default_rng(seed).uniform(0.0, math.pi, size=16)
    best, best_err = None, math.inf
    for offset in offsets:
        lo, hi = 1, 4 * (h + w)
        # achieved ratio is monotone in spoke count up to rasterization noise
        while lo < hi:
            mid = (lo + hi) // 2
            if _radial_pattern(h, w, mid, offset).mean() < ratio:
                lo = mid + 1
            else:
                hi = mid
        for n in range(max(1, lo - 2), lo + 3):
            m = _radial_pattern(h, w, n, offset)
            err = abs(m.mean() - ratio)
            if err < best_err - 1e-12:
                best, best_err = m, err
        if best_err <= RATIO_TOL / 4:
            break
    if best_err > RATIO_TOL:
        raise ValueError(f"cannot reach radial ratio {ratio} within {RATIO_TOL} on a {h}x{w} grid")
    return SamplingMask(np.fft.ifftshift(best), "radial", float(ratio))


def gen_cartesian_mask(h: int, w: int, ratio: float, seed: int = 0) -> SamplingMask:
    """Fully sampled phase-encode rows: a 4% center band plus random rows."""
    _check_ratio(ratio)
    n_rows = min(h, max(1, int(round(ratio * h))))
    n_center = min(n_rows, max(1, int(math.ceil(0.04 * h))))
    start = h // 2 - n_center // 2
    center = np.arange(start, start + n_center)
    rest = np.setdiff1d(np.arange(h), center)
    rng = np.random.default_rng(seed)
    picked = rng.choice(rest, size=n_rows - n_center, replace=False)
    m = np.zeros((h, w), dtype=np.uint8)
    m[np.concatenate([center, picked])] = 1
    if abs(m.mean() - ratio) > RATIO_TOL:
        raise ValueError(f"cannot reach cartesian ratio {ratio} within {RATIO_TOL} with {h} rows")
    return SamplingMask(np.fft.ifftshift(m), "cartesian", float(ratio))


def gen_mask(pattern: str, h: int, w: int, ratio: float, seed: int = 0) -> SamplingMask:
    if pattern == "radial":
        return gen_radial_mask(h, w, ratio, seed)
    if pattern == "cartesian":
        return gen_cartesian_mask(h, w, ratio, seed)
    raise ValueError(f"unknown mask pattern {pattern!r}")


# -- phantoms ----------------------------------------------------------------

# Modified Shepp-Logan (Toft): intensity, semi-axes a, b, center x0, y0, angle (deg)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def rasterize_ellipses(h: int, w: int, ellipses) -> np.ndarray:
    """Sum of filled ellipses on [-1, 1]^2, y axis pointing up."""
    ys = 1.0 - (2.0 * np.arange(h) + 1.0) / h
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    X, Y = np.meshgrid(xs, ys)
    img = np.zeros((h, w))
    for val, a, b, x0, y0, ang in ellipses:
        th = math.radians(ang)
        xr = (X - x0) * math.cos(th) + (Y - y0) * math.sin(th)
        yr = -(X - x0) * math.sin(th) + (Y - y0) * math.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img


def _random_ellipses(rng: np.random.Generator, count: int):
    out = [(1.0, rng.uniform(0.6, 0.8), rng.uniform(0.7, 0.9), 0.0, 0.0, rng.uniform(-15, 15))]
    for _ in range(count):
        out.append((
            rng.uniform(-0.4, 0.5),
            rng.uniform(0.05, 0.35),
            rng.uniform(0.05, 0.35),
            rng.uniform(-0.4, 0.4),
            rng.uniform(-0.5, 0.5),
            rng.uniform(0.0, 180.0),
        ))
    return out


def gen_phantom(h: int, w: int, kind: str = "shepp-logan", seed: int = 0) -> torch.Tensor:
    """Nonnegative real phantom scaled to max 1, returned as complex128."""
    if kind == "shepp-logan":
        img = rasterize_ellipses(h, w, SHEPP_LOGAN)
    elif kind == "random-ellipses":
        rng = np.random.default_rng(seed)
        img = rasterize_ellipses(h, w, _random_ellipses(rng, int(rng.integers(4, 9))))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return as_complex(torch.from_numpy(img))


# -- datasets ----------------------------------------------------------------


@dataclass
class TaskDataset:
    """One reconstruction task: a fixed mask with train/val(/test) pairs.

    ``y_*`` are complex (n, H, W) measurements, ``x_*`` complex ground truth.
    """

    task_id: str
    mask: SamplingMask
    y_train: torch.Tensor
    x_train: torch.Tensor
    y_val: torch.Tensor
    x_val: torch.Tensor
    y_test: torch.Tensor | None = None
    x_test: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return int(self.y_train.shape[0])

    @property
    def n_val(self) -> int:
        return int(self.y_val.shape[0])


def make_task(
    task_id: str,
    mask: SamplingMask,
    n_train: int,
    n_val: int,
    n_test: int = 0,
    kind: str = "random-ellipses",
    seed: int = 0,
    noise_std: float = 0.0,
) -> TaskDataset:
    """Assemble a task from fresh phantoms; splits use disjoint phantom seeds."""
    h, w = mask.shape
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_val + n_test, replace=False)

    def build(sub):
        if len(sub) == 0:
            empty = torch.zeros((0, h, w), dtype=CDTYPE)
            return empty, empty.clone()
        xs = torch.stack([gen_phantom(h, w, kind, int(s)) for s in sub])
        ys = torch.stack([
            forward_model(x, mask, noise_std, seed=int(s) + 1) for x, s in zip(xs, sub)
        ])
        return ys, xs

    y_tr, x_tr = build(seeds[:n_train])
    y_va, x_va = build(seeds[n_train:n_train + n_val])
    y_te, x_te = build(seeds[n_train + n_val:])
    return TaskDataset(
        task_id, mask, y_tr, x_tr, y_va, x_va, y_te, x_te,
        meta={"pattern": mask.pattern, "ratio": mask.ratio, "kind": kind, "seed": seed},
    )
