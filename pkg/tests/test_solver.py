import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from metaloa.autodiff import NumericFailure, record_and_grad
from metaloa.mri import (
    SamplingMask,
    forward_model,
    gen_phantom,
    gen_radial_mask,
    grad_data_fidelity,
    zero_fill,
)
from metaloa.regularizer import grad_r_eps, random_params, reg_weight
from metaloa.solver import (
    MAX_BACKTRACKS,
    TRACE_FIELDS,
    SolverConfig,
    SolverTrace,
    accept_u,
    audit_trace,
    batch_norm,
    candidate_u,
    read_trace_csv,
    safeguard_v,
    solve,
    unrolled_forward,
    update_epsilon,
    write_trace_csv,
)

from conftest import crandn


def _t(v):
    return torch.as_tensor(v, dtype=torch.float64)


class Quadratic:
    """phi(x) = 0.5 * c * x^2 on a batch of real 1-vectors."""

    def __init__(self, c=1.0):
        self.c = c

    def value(self, x):
        return 0.5 * self.c * x.square().sum(dim=1)

    def grad(self, x):
        return self.c * x


def _instance(n=16, ratio=0.3, seed=0):
    m = gen_radial_mask(n, n, ratio, seed)
    x = gen_phantom(n, n, "random-ellipses", seed)
    return m, x, forward_model(x, m), random_params(seed=seed)


# -- candidate_u -------------------------------------------------------------


def test_candidate_u_vanishing_weight_is_gradient_step():
    m, _, y, theta = _instance()
    x = zero_fill(y) + 0.1
    u = candidate_u(x, y, m, theta, _t(-40.0), 1e-3, 0.3, 0.15)
    z = x - 0.3 * grad_data_fidelity(x, y, m)
    assert torch.allclose(u, z, atol=1e-9)


def test_candidate_u_zero_steps_is_identity():
    m, _, y, theta = _instance()
    x = zero_fill(y) + 0.1
    assert torch.equal(candidate_u(x, y, m, theta, _t(0.0), 1e-3, 0.0, 0.0), x)


def test_candidate_u_matches_two_step_oracle(rng):
    m, _, y, theta = _instance(seed=3)
    x = crandn(rng, 16, 16)
    alpha, tau, omega, eps = 0.4, 0.1, _t(0.7), 1e-2
    z = x - alpha * grad_data_fidelity(x, y, m)
    ref = z - tau * reg_weight(omega) * grad_r_eps(z, theta, eps)
    assert torch.allclose(candidate_u(x, y, m, theta, omega, eps, alpha, tau), ref, atol=1e-14)


# -- accept_u ----------------------------------------------------------------


def test_accept_u_rejects_null_step():
    x = _t([[1.0]])
    assert not bool(accept_u(x, x.clone(), Quadratic(), a=10.0)[0])


def test_accept_u_takes_descent_step():
    # x = 1, u = 0.5: grad 1 <= 10 * 0.5; decrease -0.375 <= -0.025
    x, u = _t([[1.0]]), _t([[0.5]])
    assert bool(accept_u(x, u, Quadratic(), a=10.0)[0])


def test_accept_u_rejects_ascent_step():
    x, u = _t([[1.0]]), _t([[1.5]])
    assert not bool(accept_u(x, u, Quadratic(), a=10.0)[0])


def test_accept_u_needs_both_inequalities():
    # tiny descent step: decrease holds but grad 1 > a * 1e-4
    x, u = _t([[1.0]]), _t([[1.0 - 1e-4]])
    assert not bool(accept_u(x, u, Quadratic(), a=10.0)[0])


# -- safeguard_v -------------------------------------------------------------


def test_safeguard_small_step_accepted_first_try():
    x = _t([[1.0]])
    v, alpha, k = safeguard_v(x, Quadratic(), 0.1, rho=0.5, a=10.0)
    assert int(k[0]) == 0 and float(v[0, 0]) == pytest.approx(0.9, abs=1e-15)
    assert float(alpha[0]) == 0.1


def test_safeguard_backtracks_to_closed_form():
    # decrease test: 0.5 (1-s)^2 - 0.5 <= -s^2 / a  <=>  s <= 2 / (1 + 2/a)
    a, rho, s0 = 10.0, 0.5, 100.0
    x = _t([[1.0]])
    v, alpha, k = safeguard_v(x, Quadratic(), s0, rho=rho, a=a)
    bound = 2.0 / (1.0 + 2.0 / a)
    k_expect = math.ceil(math.log(s0 / bound) / math.log(1 / rho))
    assert int(k[0]) == k_expect
    assert float(alpha[0]) == s0 * rho**k_expect
    assert float(v[0, 0]) == pytest.approx(1.0 - s0 * rho**k_expect, abs=1e-15)


def test_safeguard_at_stationary_point_returns_x():
    x = _t([[0.0]])
    v, _, k = safeguard_v(x, Quadratic(), 1.0, rho=0.5, a=10.0)
    assert int(k[0]) == 0 and torch.equal(v, x)


def test_safeguard_caps_backtracks():
    class Drifting(Quadratic):
        # every evaluation reports a larger value, so no trial point ever passes
        calls = 0

        def value(self, x):
            self.calls += 1
            return super().value(x) + self.calls

    with pytest.raises(NumericFailure):
        safeguard_v(_t([[1.0]]), Drifting(), 1.0, rho=0.5, a=10.0)


def test_safeguard_respects_active_mask():
    x = _t([[1.0], [1.0]])
    v, _, k = safeguard_v(x, Quadratic(), 100.0, rho=0.5, a=10.0, active=torch.tensor([True, False]))
    assert int(k[0]) > 0 and int(k[1]) == 0


# -- update_epsilon ----------------------------------------------------------


def test_update_epsilon_cases():
    assert float(update_epsilon(1e-3, 0.0, 1.0, 0.9)) == pytest.approx(9e-4)
    assert float(update_epsilon(1e-3, 1e6, 1.0, 0.9)) == 1e-3
    boundary = 1.0 * 0.9 * 1e-3
    assert float(update_epsilon(1e-3, boundary, 1.0, 0.9)) == 1e-3


@given(eps=st.floats(1e-8, 1.0), g=st.floats(0.0, 2.0), gamma=st.floats(0.05, 0.95))
def test_update_epsilon_never_increases(eps, g, gamma):
    out = float(update_epsilon(eps, g, 1.0, gamma))
    assert out in (eps, float(_t(gamma) * _t(eps)))
    assert out <= eps


def test_solver_config_validation():
    for bad in (dict(a=0), dict(rho=1.0), dict(gamma=0.0), dict(sigma_red=0),
                dict(eps0=0.0), dict(eps_tol=-1), dict(T=0), dict(alphas=[0.1], taus=[0.1, 0.2]),
                dict(alphas=[-0.1])):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    cfg = SolverConfig(alphas=[0.3, 0.2], taus=[0.1, 0.05])
    assert float(cfg.alpha(7)) == 0.2 and float(cfg.tau(7)) == 0.05


# -- solve -------------------------------------------------------------------


def test_full_mask_negligible_prior_recovers_image():
    n = 16
    full = SamplingMask(np.ones((n, n), np.uint8), "radial", 1.0)
    x = gen_phantom(n, n)
    xT, trace = solve(forward_model(x, full), full, random_params(), _t(-40.0))
    assert torch.allclose(xT, x, atol=1e-8)
    assert trace.records[-1].phi_next < 1e-12


def test_trace_invariants_on_random_runs():
    rng = np.random.default_rng(0)
    for _ in range(6):
        n = int(rng.choice([16, 24, 32]))
        m = gen_radial_mask(n, n, float(rng.choice([0.1, 0.2, 0.3, 0.4])), int(rng.integers(100)))
        y = forward_model(gen_phantom(n, n, "random-ellipses", int(rng.integers(100))), m)
        theta = random_params(seed=int(rng.integers(100)))
        cfg = SolverConfig()
        _, trace = solve(y, m, theta, _t(rng.normal(0, 2)), cfg)
        audit = audit_trace(trace, cfg.a)
        eps = trace.eps
        assert all(b <= a for a, b in zip(eps, eps[1:]))
        assert len(trace) <= cfg.T
        assert audit.worst("per_eps_descent") <= 1e-10
        assert audit.worst("lyapunov") <= 1e-10
        assert audit.worst("u_certificate") <= 1e-10
        assert audit.worst("v_certificate") <= 1e-10
        assert audit.max_backtracks <= MAX_BACKTRACKS


def _weighted_lyapunov_margin(trace, m, weight):
    return max((r.phi_next_reduced + weight * m * r.eps_next) - (r.phi + weight * m * r.eps)
               for r in trace.records)


@pytest.mark.parametrize("seed", range(5))
def test_weighted_lyapunov_holds_under_forced_reductions(seed):
    # reduce eps every phase: phi_eps + kappa * m * eps is the quantity that must decrease
    n = 32
    m, _, y, theta = _instance(n, 0.2, seed)
    cfg = SolverConfig(sigma_red=1e6)
    _, trace = solve(y, m, theta, _t(0.0), cfg)
    assert sum(r.eps_next < r.eps for r in trace.records) == len(trace)
    assert _weighted_lyapunov_margin(trace, n * n, 0.5) <= 1e-10


def test_unweighted_lyapunov_can_fail_under_forced_reductions():
    # documented counterexample: the plain +eps form is too weak once eps shrinks
    m, _, y, theta = _instance(32, 0.2, 1)
    _, trace = solve(y, m, theta, _t(0.0), SolverConfig(sigma_red=1e6))
    assert audit_trace(trace, 1e3).worst("lyapunov") > 1e-4
    assert _weighted_lyapunov_margin(trace, 32 * 32, 0.5) <= 1e-10


@pytest.mark.parametrize("omega,seed", [(-6.0, 0), (-6.0, 1), (-4.0, 0), (-4.0, 1)])
def test_tolerance_termination_meets_stationarity_threshold(omega, seed):
    n = 16
    full = SamplingMask(np.ones((n, n), np.uint8), "radial", 1.0)
    x = gen_phantom(n, n, "random-ellipses", seed)
    cfg = SolverConfig(T=300, eps_tol=1e-5, alphas=[1.0], taus=[0.5])
    _, trace = solve(forward_model(x, full), full, random_params(seed=seed), _t(omega), cfg)
    assert trace.termination == "tolerance"
    last = trace.records[-1]
    assert last.eps_next < last.eps
    assert last.grad_norm_next < cfg.sigma_red * cfg.gamma * last.eps
    assert cfg.sigma_red * last.eps_next < cfg.eps_tol


def test_frozen_eps_drives_gradient_to_zero():
    n = 12
    full = SamplingMask(np.ones((n, n), np.uint8), "radial", 1.0)
    x = gen_phantom(n, n, "random-ellipses", 2)
    cfg = SolverConfig(T=400, sigma_red=1e-12, alphas=[1.0], taus=[0.5])
    _, trace = solve(forward_model(x, full), full, random_params(seed=2), _t(-2.0), cfg)
    assert set(trace.eps) == {cfg.eps0}
    assert min(r.grad_norm_next for r in trace.records) < 1e-4


def test_batched_solve_matches_single():
    m, _, y, theta = _instance(16, 0.3, 4)
    y2 = forward_model(gen_phantom(16, 16, "random-ellipses", 9), m)
    omegas = _t([0.3, -1.0])
    xb, traces = solve(torch.stack([y, y2]), m, theta, omegas)
    for i, yi in enumerate((y, y2)):
        xi, ti = solve(yi, m, theta, omegas[i])
        assert torch.allclose(xb[i], xi, atol=1e-12)
        assert [r.branch for r in traces[i].records] == [r.branch for r in ti.records]


# -- unrolled_forward --------------------------------------------------------


@pytest.mark.parametrize("phases", [1, 3, 6])
def test_unrolled_equals_truncated_solve(phases):
    m, _, y, theta = _instance(16, 0.2, 5)
    cfg = SolverConfig(T=phases)
    xs, _ = solve(y, m, theta, _t(0.2), cfg)
    xu = unrolled_forward(y, m, theta, _t(0.2), phases, cfg)
    assert torch.equal(xs, xu)


def test_unrolled_rejects_zero_phases():
    m, _, y, theta = _instance()
    with pytest.raises(ValueError):
        unrolled_forward(y, m, theta, _t(0.0), 0)


def _unrolled_loss(m, y, x_true, theta, phases):
    def loss(omega, alphas, taus, eps0, *kernels):
        th = type(theta)(list(kernels), theta.delta_act)
        cfg = SolverConfig(T=phases, alphas=alphas, taus=taus, eps0=eps0)
        out = unrolled_forward(y, m, th, omega, phases, cfg)
        return (out - x_true).abs().square().sum()
    return loss


def test_unrolled_single_phase_step_size_gradient():
    # negligible prior: x1 = x0 - alpha grad f(x0), loss quadratic in alpha
    m, x, y, theta = _instance(16, 0.3, 6)
    cfg = lambda a: SolverConfig(T=1, alphas=[a], taus=[0.0])

    def loss(alpha):
        out = unrolled_forward(y, m, theta, _t(-40.0), 1, cfg(alpha), kappa=None)
        return (out - x).abs().square().sum()

    a0 = _t(0.3)
    _, (g,) = record_and_grad(loss, [a0])
    h = 1e-5
    fd = (float(loss(a0 + h)) - float(loss(a0 - h))) / (2 * h)
    assert abs(float(g) - fd) <= 1e-6 * max(1.0, abs(fd))


def test_unrolled_parameter_gradients_match_finite_differences():
    m, x, y, theta = _instance(16, 0.3, 7)
    phases = 3
    loss = _unrolled_loss(m, y, x, theta, phases)
    params = [_t(0.4), _t([0.5, 0.4, 0.3]), _t([0.2, 0.2, 0.1]), _t(2e-3), *theta.kernels]
    _, grads = record_and_grad(loss, params)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        d = [torch.from_numpy(rng.normal(size=p.shape)) for p in params]
        d[3] = d[3] * 1e-3
        fp = float(loss(*[p + h * v for p, v in zip(params, d)]))
        fm = float(loss(*[p - h * v for p, v in zip(params, d)]))
        an = sum(float((g * v).sum()) for g, v in zip(grads, d))
        assert abs((fp - fm) / (2 * h) - an) <= 1e-4 * abs(an)


def test_unrolled_omega_gradient_is_nonzero():
    m, x, y, theta = _instance(16, 0.2, 8)
    loss = _unrolled_loss(m, y, x, theta, 2)
    _, (g, *_) = record_and_grad(loss, [_t(0.0), _t([0.5]), _t([0.25]), _t(1e-3), *theta.kernels])
    assert abs(float(g)) > 1e-8


# -- trace export ------------------------------------------------------------


def test_trace_csv_round_trip(tmp_path):
    m, _, y, theta = _instance(16, 0.2, 2)
    _, trace = solve(y, m, theta, _t(0.1), SolverConfig(T=8))
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_FIELDS)
    rows = read_trace_csv(path)
    assert len(rows) == len(trace)
    for r, rec in zip(rows, trace.records):
        assert r == rec.csv_row()


def test_batch_norm_real_and_complex():
    t = torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=torch.float64)
    assert torch.equal(batch_norm(t), _t([5.0, 0.0]))
    c = torch.tensor([[3 + 4j, 0]], dtype=torch.complex128)
    assert float(batch_norm(c)[0]) == 5.0


def test_empty_trace_defaults():
    tr = SolverTrace()
    assert len(tr) == 0 and tr.termination == "max_phases"
    assert audit_trace(tr, 1.0).worst("lyapunov") == -math.inf
