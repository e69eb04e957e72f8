"""Learned l2,1 feature regularizer and the smoothed objective.

The feature extractor is a bias-free complex CNN

    g(x) = w_l * act(... act(w_2 * act(w_1 * x)))

with the smoothed ReLU applied separately to real and imaginary parts.  The
l2,1 group index runs over pixels, the group norm over the d complex
channels (viewed as 2d reals).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

import torch.nn.functional as F

from .autodiff import DTYPE, _block_weight
from .mri import _mask_tensor, as_complex, data_fidelity, dft2, grad_data_fidelity, idft2

DELTA_ACT = 1e-3


def smoothed_relu(v: torch.Tensor, delta: float = DELTA_ACT) -> torch.Tensor:
    """0 below -delta, x above delta, x^2/(4 delta) + x/2 + delta/4 in between."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = v.clamp(-delta, delta)
    return (c + delta).square() / (4 * delta) + torch.relu(v - delta)


def smoothed_relu_grad(v: torch.Tensor, delta: float = DELTA_ACT) -> torch.Tensor:
    return ((v + delta) / (2 * delta)).clamp(0.0, 1.0)


def split_act(z: torch.Tensor, delta: float = DELTA_ACT) -> torch.Tensor:
    return torch.complex(smoothed_relu(z.real, delta), smoothed_relu(z.imag, delta))


@dataclass
class FeatureNetParams:
    """Kernels are real tensors of shape (C_out, C_in, k, k, 2) holding (re, im)."""

    kernels: list[torch.Tensor]
    delta_act: float = DELTA_ACT

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("need at least one layer")
        if self.kernels[0].shape[1] != 1:
            raise ValueError("first layer must take a single input channel")
        for a, b in zip(self.kernels[:-1], self.kernels[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("consecutive layers disagree on channel count")

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def width(self) -> int:
        return int(self.kernels[-1].shape[0])

    def num_params(self) -> int:
        return sum(k.numel() for k in self.kernels)

    def detach(self) -> "FeatureNetParams":
        return FeatureNetParams([k.detach() for k in self.kernels], self.delta_act)


def layer_shapes(depth: int = 3, width: int = 4, ksize: int = 3) -> list[tuple[int, ...]]:
    shapes = []
    c_in = 1
    for _ in range(depth):
        shapes.append((width, c_in, ksize, ksize, 2))
        c_in = width
    return shapes


def random_params(depth=3, width=4, ksize=3, scale=None, seed=0, delta_act=DELTA_ACT):
    """Gaussian kernels; ``scale=None`` uses the Glorot variance."""
    rng = np.random.default_rng(seed)
    kernels = []
    for shp in layer_shapes(depth, width, ksize):
        fan = (shp[0] + shp[1]) * ksize * ksize
        s = np.sqrt(1.0 / fan) if scale is None else scale
        kernels.append(torch.from_numpy(rng.normal(0.0, s, size=shp)))
    return FeatureNetParams(kernels, delta_act)


def _stack(x: torch.Tensor) -> torch.Tensor:
    # complex (..., H, W) -> real (B, 2, H, W)
    x = as_complex(x)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    return torch.stack([x.real, x.imag], dim=1)


def _features_real(x: torch.Tensor, theta: FeatureNetParams):
    """Forward pass on stacked (re, im) channels; returns (g, pre-activations, weights)."""
    h = _stack(x)
    weights = [_block_weight(w) for w in theta.kernels]
    pre = []
    last = theta.depth - 1
    for q, wb in enumerate(weights):
        h = F.conv2d(h, wb, padding=wb.shape[-1] // 2)
        if q < last:
            pre.append(h)
            h = smoothed_relu(h, theta.delta_act)
    return h, pre, weights


def _unbatch(v: torch.Tensor, x) -> torch.Tensor:
    return v[0] if torch.as_tensor(x).ndim == 2 else v


def feature_extract(x: torch.Tensor, theta: FeatureNetParams) -> torch.Tensor:
    """Feature field of shape (..., d, H, W); no activation after the last layer."""
    g = _features_real(x, theta)[0]
    d = theta.width
    return _unbatch(torch.complex(g[:, :d], g[:, d:]), x)


def _eps_view(eps) -> torch.Tensor:
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if eps.ndim == 0:
        return eps
    return eps.reshape(eps.shape + (1, 1, 1))


def _sq_norms(g: torch.Tensor) -> torch.Tensor:
    return g.square().sum(dim=1, keepdim=True)


def r_value(x, theta: FeatureNetParams) -> torch.Tensor:
    g = _features_real(x, theta)[0]
    return _unbatch(_sq_norms(g).sqrt().sum(dim=(1, 2, 3)), x)


def _r_eps_from(g, eps):
    e = _eps_view(eps)
    return (torch.sqrt(_sq_norms(g) + e * e) - e).sum(dim=(1, 2, 3))


def r_eps_value(x, theta: FeatureNetParams, eps) -> torch.Tensor:
    """Sum over pixels of sqrt(||g_j||^2 + eps^2) - eps."""
    return _unbatch(_r_eps_from(_features_real(x, theta)[0], eps), x)


def _grad_r_eps_from(g, pre, weights, theta, eps):
    e = _eps_view(eps)
    h = g / torch.sqrt(_sq_norms(g) + e * e)
    for q in range(theta.depth - 1, -1, -1):
        wb = weights[q]
        h = F.conv_transpose2d(h, wb, padding=wb.shape[-1] // 2)
        if q > 0:
            h = h * smoothed_relu_grad(pre[q - 1], theta.delta_act)
    return torch.complex(h[:, 0], h[:, 1])


def _check_eps(eps):
    if bool((torch.as_tensor(eps) <= 0).any()):
        raise ValueError("eps must be positive")


def grad_r_eps(x, theta: FeatureNetParams, eps) -> torch.Tensor:
    """Back-propagate g_j / sqrt(||g_j||^2 + eps^2) through the feature net by hand."""
    _check_eps(eps)
    g, pre, weights = _features_real(x, theta)
    return _unbatch(_grad_r_eps_from(g, pre, weights, theta, eps), x)


def r_eps_value_and_grad(x, theta: FeatureNetParams, eps):
    _check_eps(eps)
    g, pre, weights = _features_real(x, theta)
    val = _r_eps_from(g, eps)
    grad = _grad_r_eps_from(g, pre, weights, theta, eps)
    return _unbatch(val, x), _unbatch(grad, x)


def reg_weight(omega, kappa=None) -> torch.Tensor:
    """sigmoid(omega), or the fixed weight ``kappa`` when given."""
    if kappa is not None:
        return torch.as_tensor(kappa, dtype=DTYPE)
    return torch.sigmoid(torch.as_tensor(omega, dtype=DTYPE))


def _img_view(w: torch.Tensor) -> torch.Tensor:
    return w if w.ndim == 0 else w.reshape(w.shape + (1, 1))


def phi_eps(x, y, mask, theta, omega, eps, kappa=None) -> torch.Tensor:
    return data_fidelity(x, y, mask) + reg_weight(omega, kappa) * r_eps_value(x, theta, eps)


def grad_phi_eps(x, y, mask, theta, omega, eps, kappa=None) -> torch.Tensor:
    w = _img_view(reg_weight(omega, kappa))
    return grad_data_fidelity(x, y, mask) + w * grad_r_eps(x, theta, eps)


def phi_eps_value_and_grad(x, y, mask, theta, omega, eps, kappa=None):
    w = reg_weight(omega, kappa)
    r, gr = r_eps_value_and_grad(x, theta, eps)
    m = _mask_tensor(mask)
    res = dft2(x) * m - y
    f = 0.5 * (res.real.square() + res.imag.square()).sum(dim=(-2, -1))
    gf = idft2(m * res)
    return f + w * r, gf + _img_view(w) * gr
