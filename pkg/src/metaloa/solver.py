"""Safeguarded smoothing line-search solver and its differentiable unrolling.

One phase at smoothing level eps:

    z = x - alpha grad f(x)
    u = z - tau kappa grad r_eps(z)
    accept u  iff  ||grad phi(x)|| <= a ||u - x||  and  phi(u) - phi(x) <= -||u - x||^2 / a
    else      v = x - alpha' grad phi(x), alpha' = alpha rho^k with the first k
              passing  phi(v) - phi(x) <= -||v - x||^2 / a
    eps <- gamma eps  if  ||grad phi_eps(x_next)|| < sigma_red gamma eps

All comparisons are taken on detached values, so the same code serves plain
inference (``solve``) and training (``unrolled_forward``), where gradients
flow through the arithmetic of whichever branch was taken.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .autodiff import DTYPE, NumericFailure
from .mri import as_complex, grad_data_fidelity, zero_fill
from .regularizer import (
    FeatureNetParams,
    grad_phi_eps,
    grad_r_eps,
    phi_eps,
    phi_eps_value_and_grad,
    reg_weight,
)

MAX_BACKTRACKS = 200
TRACE_FIELDS = ("t", "eps", "phi", "grad_norm", "branch", "alpha", "backtracks")


@dataclass
class SolverConfig:
    a: float = 1e3
    rho: float = 0.5
    gamma: float = 0.9
    sigma_red: float = 1.0
    eps0: float | torch.Tensor = 1e-3
    eps_tol: float = 0.0
    T: int = 20
    alphas: Sequence[float] | torch.Tensor | None = None
    taus: Sequence[float] | torch.Tensor | None = None

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("a must be positive")
        if not (0 < self.rho < 1) or not (0 < self.gamma < 1):
            raise ValueError("rho and gamma must lie in (0, 1)")
        if self.sigma_red <= 0:
            raise ValueError("sigma_red must be positive")
        if float(self.eps0) <= 0:
            raise ValueError("eps0 must be positive")
        if self.eps_tol < 0:
            raise ValueError("eps_tol must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alphas is None:
            self.alphas = [0.1] * self.T
        if self.taus is None:
            self.taus = [0.5 * float(a) for a in self.alphas]
        if len(self.alphas) == 0 or len(self.taus) != len(self.alphas):
            raise ValueError("alphas and taus must be nonempty and of equal length")
        if any(float(a) < 0 for a in self.alphas) or any(float(t) < 0 for t in self.taus):
            raise ValueError("step sizes must be nonnegative")

    def alpha(self, t: int) -> torch.Tensor:
        # phases past the learned ones reuse the last step size
        return torch.as_tensor(self.alphas[min(t, len(self.alphas) - 1)], dtype=DTYPE)

    def tau(self, t: int) -> torch.Tensor:
        return torch.as_tensor(self.taus[min(t, len(self.taus) - 1)], dtype=DTYPE)


@dataclass
class PhaseRecord:
    t: int
    eps: float
    phi: float
    grad_norm: float
    branch: str
    alpha: float
    backtracks: int
    step_norm: float
    phi_next: float  # phi at x_{t+1}, same eps
    grad_norm_next: float  # ||grad phi_eps(x_{t+1})||, drives the eps test
    eps_next: float
    phi_next_reduced: float  # phi_{eps_next}(x_{t+1})

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in TRACE_FIELDS}


@dataclass
class SolverTrace:
    records: list[PhaseRecord] = field(default_factory=list)
    termination: str = "max_phases"

    def __len__(self):
        return len(self.records)

    @property
    def eps(self) -> list[float]:
        return [r.eps for r in self.records]


class SmoothedObjective:
    """phi_eps(x) = f(x) + kappa r_eps(x) with batch-shaped (B,) outputs."""

    def __init__(self, y, mask, theta: FeatureNetParams, omega, eps, kappa=None):
        self.y, self.mask, self.theta = y, mask, theta
        self.omega, self.eps, self.kappa = omega, eps, kappa

    def value(self, x):
        return phi_eps(x, self.y, self.mask, self.theta, self.omega, self.eps, self.kappa)

    def grad(self, x):
        return grad_phi_eps(x, self.y, self.mask, self.theta, self.omega, self.eps, self.kappa)

    def value_and_grad(self, x):
        return phi_eps_value_and_grad(
            x, self.y, self.mask, self.theta, self.omega, self.eps, self.kappa
        )


def batch_norm(t: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over all but the leading axis (real-pair for complex)."""
    t = t.reshape(t.shape[0], -1)
    if t.is_complex():
        return (t.real.square() + t.imag.square()).sum(dim=1).sqrt()
    return t.square().sum(dim=1).sqrt()


def _bview(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(v)
    if v.dtype != torch.bool:
        v = v.to(DTYPE)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.ndim - 1))


def candidate_u(x, y, mask, theta, omega, eps, alpha, tau, kappa=None) -> torch.Tensor:
    """Gradient step on f followed by a linearized regularizer step at z."""
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    tau = torch.as_tensor(tau, dtype=DTYPE)
    z = x - alpha * grad_data_fidelity(x, y, mask)
    w = _bview(reg_weight(omega, kappa), z)
    return z - tau * w * grad_r_eps(z, theta, eps)


def accept_u(x, u, objective, a: float, phi_x=None, grad_norm_x=None, phi_u=None) -> torch.Tensor:
    """Both acceptance inequalities for the candidate u, per batch entry."""
    with torch.no_grad():
        if phi_x is None:
            phi_x = objective.value(x)
        if grad_norm_x is None:
            grad_norm_x = batch_norm(objective.grad(x))
        if phi_u is None:
            phi_u = objective.value(u)
        du = batch_norm(u - x)
        decrease = phi_u - phi_x <= -(du * du) / a
        return (grad_norm_x <= a * du) & decrease


def _shrunk(alpha: torch.Tensor, rho: float, k: torch.Tensor) -> torch.Tensor:
    return alpha * torch.pow(torch.as_tensor(rho, dtype=DTYPE), k.to(DTYPE))


def safeguard_v(x, objective, alpha, rho: float, a: float, grad_x=None, phi_x=None,
                active=None, max_backtracks: int = MAX_BACKTRACKS):
    """Backtracking gradient step on phi with the sufficient-decrease test.

    Returns ``(v, alpha_final, backtracks)`` with per-entry step sizes and
    counts.  Trial points are evaluated without gradient tracking; the
    returned ``v`` is rebuilt from ``alpha`` and ``grad_x`` so it stays
    differentiable.  ``active`` restricts which entries need a decision.
    """
    alpha = torch.as_tensor(alpha, dtype=DTYPE)
    if grad_x is None:
        grad_x = objective.grad(x)
    b = x.shape[0]
    k = torch.zeros(b, dtype=torch.long)
    pending = torch.ones(b, dtype=torch.bool) if active is None else active.clone()
    with torch.no_grad():
        if phi_x is None:
            phi_x = objective.value(x)
        gx = grad_x.detach()
        a_det = alpha.detach()
        while bool(pending.any()):
            step = _shrunk(a_det, rho, k)
            cand = x - _bview(step, x) * gx
            dv = batch_norm(cand - x)
            ok = objective.value(cand) - phi_x <= -(dv * dv) / a
            pending = pending & ~ok
            k = torch.where(pending, k + 1, k)
            if bool((k > max_backtracks).any()):
                raise NumericFailure(
                    f"line search exceeded {max_backtracks} backtracks", node="safeguard_v"
                )
    alpha_final = _shrunk(alpha, rho, k)
    v = x - _bview(alpha_final, x) * grad_x
    return v, alpha_final, k


def update_epsilon(eps, grad_norm_next, sigma_red: float, gamma: float):
    """Shrink eps by gamma when the new gradient norm is below sigma_red*gamma*eps."""
    eps = torch.as_tensor(eps, dtype=DTYPE)
    g = torch.as_tensor(grad_norm_next, dtype=DTYPE)
    reduce = g.detach() < sigma_red * gamma * eps.detach()
    return torch.where(reduce, gamma * eps, eps)


def _run_phases(y, mask, theta, omega, config: SolverConfig, phases: int, kappa=None,
                record: bool = False, stop_on_tol: bool = True):
    y = as_complex(y)
    batched = y.ndim == 3
    if not batched:
        y = y.unsqueeze(0)
    b = y.shape[0]
    x = zero_fill(y)
    omega = torch.as_tensor(omega, dtype=DTYPE)
    if omega.ndim == 0:
        omega = omega.expand(b)
    eps = torch.as_tensor(config.eps0, dtype=DTYPE).expand(b)
    done = torch.zeros(b, dtype=torch.bool)
    traces = [SolverTrace() for _ in range(b)] if record else None
    cached = None  # (phi, grad) at x for the current eps

    for t in range(phases):
        alpha, tau = config.alpha(t), config.tau(t)
        obj = SmoothedObjective(y, mask, theta, omega, eps, kappa)
        if cached is not None:
            phi_x, gx = cached
        else:
            phi_x, gx = obj.value_and_grad(x)
            phi_x = phi_x.detach()
        gnorm = batch_norm(gx.detach())

        u = candidate_u(x, y, mask, theta, omega, eps, alpha, tau, kappa)
        # grad at u keeps its graph: it is the next phase's gradient whenever u is taken
        phi_u, g_u = obj.value_and_grad(u)
        phi_u = phi_u.detach()
        acc = accept_u(x, u, obj, config.a, phi_x=phi_x, grad_norm_x=gnorm, phi_u=phi_u)
        active = ~acc & ~done
        v, alpha_v, k = safeguard_v(x, obj, alpha, config.rho, config.a,
                                    grad_x=gx, phi_x=phi_x, active=active)
        x_new = torch.where(_bview(acc, x), u, v)
        if bool(done.any()):
            x_new = torch.where(_bview(done, x), x, x_new)

        phi_next, g_next = phi_u, g_u
        if not bool(acc.all()):
            phi_v, g_v = obj.value_and_grad(x_new)
            phi_next = torch.where(acc, phi_u, phi_v.detach())
            g_next = torch.where(_bview(acc, x), g_u, g_v)
        with torch.no_grad():
            gn_next = batch_norm(g_next)
        eps_new = update_epsilon(eps, gn_next, config.sigma_red, config.gamma)
        eps_new = torch.where(done, eps, eps_new)
        reduced = ~torch.eq(eps_new.detach(), eps.detach())
        if record:
            with torch.no_grad():
                phi_red = phi_next.clone()
                if bool(reduced.any()):
                    phi_red = torch.where(
                        reduced,
                        phi_eps(x_new, y, mask, theta, omega, eps_new, kappa),
                        phi_next,
                    )
                step = batch_norm(x_new - x)
            for i in range(b):
                if bool(done[i]):
                    continue
                traces[i].records.append(PhaseRecord(
                    t=t,
                    eps=float(eps[i]),
                    phi=float(phi_x[i]),
                    grad_norm=float(gnorm[i]),
                    branch="u" if bool(acc[i]) else "v",
                    alpha=float(alpha) if bool(acc[i]) else float(alpha_v[i]),
                    backtracks=0 if bool(acc[i]) else int(k[i]),
                    step_norm=float(step[i]),
                    phi_next=float(phi_next[i]),
                    grad_norm_next=float(gn_next[i]),
                    eps_next=float(eps_new[i]),
                    phi_next_reduced=float(phi_red[i]),
                ))
        if bool(reduced.any()):
            cached = None
        else:
            cached = (phi_next, g_next)
        x, eps = x_new, eps_new
        if stop_on_tol and config.eps_tol > 0:
            newly = (config.sigma_red * eps.detach() < config.eps_tol) & ~done
            if record:
                for i in torch.nonzero(newly).flatten().tolist():
                    traces[i].termination = "tolerance"
            done = done | newly
            if bool(done.all()):
                break

    if not batched:
        x = x[0]
    return x, traces


def solve(y, mask, theta, omega, config: SolverConfig | None = None, kappa=None):
    """Run up to ``config.T`` phases from the zero-filled image.

    Returns ``(x, trace)`` for a single (H, W) measurement or
    ``(x, [trace, ...])`` for a batch.
    """
    config = config or SolverConfig()
    with torch.no_grad():
        x, traces = _run_phases(y, mask, theta, omega, config, config.T, kappa, record=True)
    return x, (traces if as_complex(y).ndim == 3 else traces[0])


def unrolled_forward(y, mask, theta, omega, phase_count: int, config: SolverConfig | None = None,
                     kappa=None):
    """``phase_count`` phases with gradients flowing to theta, omega, eps0 and step sizes."""
    if phase_count < 1:
        raise ValueError("phase_count must be >= 1")
    config = config or SolverConfig()
    x, _ = _run_phases(y, mask, theta, omega, config, phase_count, kappa)
    return x


# -- trace audits and export -------------------------------------------------


@dataclass
class TraceAudit:
    lyapunov: list[float] = field(default_factory=list)  # positive = violation
    per_eps_descent: list[float] = field(default_factory=list)
    u_certificate: list[float] = field(default_factory=list)
    v_certificate: list[float] = field(default_factory=list)
    max_backtracks: int = 0

    def worst(self, name: str) -> float:
        vals = getattr(self, name)
        return max(vals) if vals else -math.inf


def audit_trace(trace: SolverTrace, a: float) -> TraceAudit:
    """Margins of every descent inequality the solver promises (>0 means violated)."""
    out = TraceAudit()
    for r in trace.records:
        out.lyapunov.append((r.phi_next_reduced + r.eps_next) - (r.phi + r.eps))
        out.per_eps_descent.append(r.phi_next - r.phi)
        decrease = (r.phi_next - r.phi) + r.step_norm ** 2 / a
        if r.branch == "u":
            out.u_certificate.append(max(decrease, r.grad_norm - a * r.step_norm))
        else:
            out.v_certificate.append(decrease)
        out.max_backtracks = max(out.max_backtracks, r.backtracks)
    return out


def write_trace_csv(trace: SolverTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for r in trace.records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.csv_row().items()})


def read_trace_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "t": int(row["t"]),
                "eps": float(row["eps"]),
                "phi": float(row["phi"]),
                "grad_norm": float(row["grad_norm"]),
                "branch": row["branch"],
                "alpha": float(row["alpha"]),
                "backtracks": int(row["backtracks"]),
            })
    return rows
