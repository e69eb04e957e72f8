"""Reverse-mode differentiation helpers on top of torch autograd.

Complex tensors follow the real-pair convention: for a real-valued program
``p`` and a complex input ``z = a + ib`` the returned gradient is
``dp/da + i dp/db``.  This is what torch autograd produces natively for
real-valued outputs, so no Wirtinger bookkeeping is needed anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.autograd.forward_ad as fwAD
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64
CDTYPE = torch.complex128

HVP_METHODS = ("fwd-rev", "rev-rev", "fd")


class NumericFailure(RuntimeError):
    """A non-finite value or a runaway iteration was encountered."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node: {node})")
        self.node = node


class _FiniteCheck(TorchFunctionMode):
    # Checks every op output while a program is being recorded.
    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in out if isinstance(out, (tuple, list)) else (out,):
            if isinstance(t, torch.Tensor) and (t.is_floating_point() or t.is_complex()):
                with torch._C.DisableTorchFunction():
                    bad = not bool(torch.isfinite(t).all())
                if bad:
                    name = getattr(func, "__name__", repr(func))
                    raise NumericFailure("non-finite intermediate value", node=name)
        return out


def _prepare(inputs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    leaves = []
    for t in inputs:
        t = torch.as_tensor(t)
        if not (t.is_floating_point() or t.is_complex()):
            t = t.to(DTYPE)
        if not bool(torch.isfinite(t).all()):
            raise NumericFailure("non-finite input")
        leaves.append(t.detach().clone().requires_grad_(True))
    return leaves


def record_and_grad(
    program: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    check_finite: bool = True,
) -> tuple[float, list[torch.Tensor]]:
    """Evaluate a scalar ``program(*inputs)`` and its gradient w.r.t. every input.

    Inputs that the program ignores receive zero gradients.  With
    ``check_finite`` every intermediate is checked and the first non-finite
    one raises :class:`NumericFailure` naming the offending op.
    """
    leaves = _prepare(inputs)
    if check_finite:
        with _FiniteCheck():
            out = program(*leaves)
    else:
        out = program(*leaves)
    out = torch.as_tensor(out)
    if out.numel() != 1:
        raise ValueError(f"program must return a scalar, got shape {tuple(out.shape)}")
    if not out.requires_grad:
        return float(out), [torch.zeros_like(t) for t in leaves]
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NumericFailure("non-finite gradient", node="backward")
    return float(out.detach()), grads


@dataclass
class HVPResult:
    vectors: list[torch.Tensor]
    method: str


def hvp(
    program: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    direction: Sequence[torch.Tensor],
    method: str = "fwd-rev",
    fd_step: float = 1e-4,
) -> HVPResult:
    """Hessian-vector product ``H v`` of a scalar program.

    ``method`` is one of ``fwd-rev`` (forward-mode tangent pushed through the
    reverse pass), ``rev-rev`` (double backward) or ``fd`` (symmetric
    difference of gradients with step ``fd_step``).
    """
    inputs = list(inputs)
    direction = list(direction)
    if len(inputs) != len(direction):
        raise ValueError("direction must have one entry per input")
    for t, v in zip(inputs, direction):
        if tuple(torch.as_tensor(t).shape) != tuple(torch.as_tensor(v).shape):
            raise ValueError(
                f"direction shape {tuple(v.shape)} does not match input {tuple(t.shape)}"
            )
    direction = [torch.as_tensor(v).detach() for v in direction]

    if method == "fd":
        plus = [t.detach() + fd_step * v for t, v in zip(inputs, direction)]
        minus = [t.detach() - fd_step * v for t, v in zip(inputs, direction)]
        _, gp = record_and_grad(program, plus, check_finite=False)
        _, gm = record_and_grad(program, minus, check_finite=False)
        return HVPResult([(a - b) / (2 * fd_step) for a, b in zip(gp, gm)], method)

    if method == "rev-rev":
        leaves = _prepare(inputs)
        out = program(*leaves)
        grads = torch.autograd.grad(out, leaves, create_graph=True, allow_unused=True)
        dot = sum(
            (g * v.to(g.dtype)).real.sum() if g.is_complex() else (g * v).sum()
            for g, v in zip(grads, direction)
            if g is not None
        )
        if not isinstance(dot, torch.Tensor) or not dot.requires_grad:
            return HVPResult([torch.zeros_like(t) for t in leaves], method)
        hv = torch.autograd.grad(dot, leaves, allow_unused=True)
        return HVPResult(
            [torch.zeros_like(t) if h is None else h for t, h in zip(leaves, hv)], method
        )

    if method == "fwd-rev":
        with fwAD.dual_level():
            leaves = [
                fwAD.make_dual(t.detach().clone(), v.to(t.dtype)).requires_grad_(True)
                for t, v in zip(_prepare(inputs), direction)
            ]
            out = program(*leaves)
            if not out.requires_grad:
                return HVPResult([torch.zeros_like(t) for t in inputs], method)
            grads = torch.autograd.grad(out, leaves, allow_unused=True)
            hv = []
            for t, g in zip(leaves, grads):
                tangent = None if g is None else fwAD.unpack_dual(g).tangent
                hv.append(torch.zeros_like(fwAD.unpack_dual(t).primal)
                          if tangent is None else tangent.detach().clone())
        return HVPResult(hv, method)

    raise ValueError(f"unknown hvp method {method!r}; expected one of {HVP_METHODS}")


def _block_weight(kernel: torch.Tensor) -> torch.Tensor:
    # (Co, Ci, k, k, 2) real pairs -> real block weight [[c, -d], [d, c]]
    c, d = kernel[..., 0], kernel[..., 1]
    top = torch.cat([c, -d], dim=1)
    bottom = torch.cat([d, c], dim=1)
    return torch.cat([top, bottom], dim=0)


def _check_kernel(x: torch.Tensor, kernel: torch.Tensor, in_dim: int) -> int:
    if kernel.ndim != 5 or kernel.shape[-1] != 2:
        raise ValueError("kernel must have shape (C_out, C_in, k, k, 2)")
    k = kernel.shape[2]
    if k % 2 == 0 or kernel.shape[3] != k:
        raise ValueError(f"kernel must be square with odd size, got {tuple(kernel.shape[2:4])}")
    if x.shape[-3] != kernel.shape[in_dim]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[-3]}, kernel expects {kernel.shape[in_dim]}"
        )
    return k


def complex_conv2d(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Same-size complex cross-correlation with zero padding.

    ``x`` is complex with shape (C_in, H, W) or (B, C_in, H, W); ``kernel``
    stores real/imaginary parts in a trailing axis, shape
    (C_out, C_in, k, k, 2).  Realized as one real convolution over stacked
    (re, im) channels, i.e. ``(ac - bd) + i(ad + bc)``.
    """
    k = _check_kernel(x, kernel, 1)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    xr = torch.cat([x.real, x.imag], dim=1)
    out = F.conv2d(xr, _block_weight(kernel), padding=k // 2)
    c = kernel.shape[0]
    out = torch.complex(out[:, :c], out[:, c:])
    return out[0] if squeeze else out


def complex_conv2d_adjoint(g: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Adjoint of :func:`complex_conv2d` in the real-pair inner product."""
    k = _check_kernel(g, kernel, 0)
    squeeze = g.ndim == 3
    if squeeze:
        g = g.unsqueeze(0)
    gr = torch.cat([g.real, g.imag], dim=1)
    out = F.conv_transpose2d(gr, _block_weight(kernel), padding=k // 2)
    c = kernel.shape[1]
    out = torch.complex(out[:, :c], out[:, c:])
    return out[0] if squeeze else out


def real_dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Real-pair inner product <a, b> = Re(sum conj(a) b)."""
    if a.is_complex() or b.is_complex():
        return (a.conj() * b).real.sum()
    return (a * b).sum()
