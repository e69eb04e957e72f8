import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from metaloa.autodiff import (
    NumericFailure,
    complex_conv2d,
    complex_conv2d_adjoint,
    hvp,
    real_dot,
    record_and_grad,
)
from metaloa.mri import dft2, idft2
from metaloa.regularizer import r_eps_value, random_params, smoothed_relu

from conftest import crandn
from oracles import naive_complex_conv


def test_square_norm_value_and_grad():
    val, (g,) = record_and_grad(lambda x: (x * x).sum(), [torch.tensor([1.0, 2.0], dtype=torch.float64)])
    assert val == 5.0
    assert torch.equal(g, torch.tensor([2.0, 4.0], dtype=torch.float64))


def test_constant_program_has_zero_grads():
    x = torch.randn(3, dtype=torch.float64)
    val, (g,) = record_and_grad(lambda x: torch.tensor(7.0, dtype=torch.float64), [x])
    assert val == 7.0 and torch.count_nonzero(g) == 0


def test_unused_input_gets_zero_grad():
    a, b = torch.ones(2, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    _, (ga, gb) = record_and_grad(lambda a, b: a.sum(), [a, b])
    assert torch.equal(ga, torch.ones(2, dtype=torch.float64))
    assert torch.count_nonzero(gb) == 0


def test_nonfinite_intermediate_names_the_node():
    with pytest.raises(NumericFailure) as err:
        record_and_grad(lambda x: torch.log(x - 2.0).sum(), [torch.tensor([1.0], dtype=torch.float64)])
    assert err.value.node is not None and "log" in err.value.node


def test_nonfinite_input_rejected():
    with pytest.raises(NumericFailure):
        record_and_grad(lambda x: x.sum(), [torch.tensor([float("nan")])])


def test_non_scalar_program_rejected():
    with pytest.raises(ValueError):
        record_and_grad(lambda x: x * 2, [torch.ones(2, dtype=torch.float64)])


def test_complex_input_uses_real_pair_convention():
    # p(z) = |z|^2 = a^2 + b^2 -> (2a, 2b)
    z = torch.tensor([1.0 + 2.0j], dtype=torch.complex128)
    _, (g,) = record_and_grad(lambda z: (z.real**2 + z.imag**2).sum(), [z])
    assert torch.allclose(g, torch.tensor([2.0 + 4.0j], dtype=torch.complex128))


def _fd_complex_grad(fn, x, h=1e-5):
    g = np.zeros(x.shape, dtype=complex)
    flat = x.reshape(-1)
    for idx in range(flat.numel()):
        for unit in (1.0, 1j):
            xp, xm = flat.clone(), flat.clone()
            xp[idx] += h * unit
            xm[idx] -= h * unit
            d = (float(fn(xp.reshape(x.shape))) - float(fn(xm.reshape(x.shape)))) / (2 * h)
            g.reshape(-1)[idx] += d * unit
    return torch.from_numpy(g)


def test_feature_net_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    theta = random_params(seed=3)
    x = crandn(rng, 8, 8)
    prog = lambda x: r_eps_value(x, theta, 1e-2)
    _, (g,) = record_and_grad(prog, [x])
    g_fd = _fd_complex_grad(prog, x)
    rel = float((g - g_fd).abs().norm() / g.abs().norm())
    assert rel < 1e-5


def test_feature_net_kernel_grads_match_directional_fd():
    rng = np.random.default_rng(1)
    theta = random_params(seed=4)
    x = crandn(rng, 8, 8)
    ks = theta.kernels

    def prog(*ks):
        from metaloa.regularizer import FeatureNetParams
        return r_eps_value(x, FeatureNetParams(list(ks)), 1e-2)

    _, grads = record_and_grad(prog, ks)
    h = 1e-5
    for _ in range(5):
        d = [torch.from_numpy(rng.normal(size=k.shape)) for k in ks]
        fp = float(prog(*[k + h * v for k, v in zip(ks, d)]))
        fm = float(prog(*[k - h * v for k, v in zip(ks, d)]))
        fd = (fp - fm) / (2 * h)
        an = float(sum((g * v).sum() for g, v in zip(grads, d)))
        assert abs(fd - an) <= 1e-5 * abs(an)


@pytest.mark.parametrize("method", ["fwd-rev", "rev-rev", "fd"])
def test_hvp_quadratic(method):
    A = torch.tensor([[2.0, 1.0], [1.0, 3.0]], dtype=torch.float64)
    x = torch.tensor([0.3, -0.7], dtype=torch.float64)
    res = hvp(lambda x: 0.5 * x @ A @ x, [x], [torch.tensor([1.0, 0.0], dtype=torch.float64)], method)
    assert res.method == method
    assert torch.allclose(res.vectors[0], torch.tensor([2.0, 1.0], dtype=torch.float64), atol=1e-8)


@pytest.mark.parametrize("method", ["fwd-rev", "rev-rev", "fd"])
def test_hvp_linear_is_zero(method):
    c = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    res = hvp(lambda x: c @ x, [torch.ones(3, dtype=torch.float64)], [torch.ones(3, dtype=torch.float64)], method)
    assert torch.allclose(res.vectors[0], torch.zeros(3, dtype=torch.float64), atol=1e-10)


def test_hvp_shape_mismatch():
    with pytest.raises(ValueError):
        hvp(lambda x: (x * x).sum(), [torch.ones(3)], [torch.ones(2)])
    with pytest.raises(ValueError):
        hvp(lambda x: (x * x).sum(), [torch.ones(3)], [torch.ones(3)], method="bogus")


def _small_net_program(x):
    def prog(*ks):
        from metaloa.regularizer import FeatureNetParams
        return r_eps_value(x, FeatureNetParams(list(ks)), 5e-2)
    return prog


@pytest.mark.parametrize("method", ["fwd-rev", "rev-rev"])
def test_hvp_matches_gradient_differences(method):
    rng = np.random.default_rng(2)
    theta = random_params(depth=2, width=2, seed=5)
    prog = _small_net_program(crandn(rng, 6, 6))
    ks = theta.kernels
    v = [torch.from_numpy(rng.normal(size=k.shape)) for k in ks]
    hv = hvp(prog, ks, v, method).vectors
    h = 1e-4
    _, gp = record_and_grad(prog, [k + h * d for k, d in zip(ks, v)])
    _, gm = record_and_grad(prog, [k - h * d for k, d in zip(ks, v)])
    fd = [(a - b) / (2 * h) for a, b in zip(gp, gm)]
    num = sum(float(((a - b) ** 2).sum()) for a, b in zip(hv, fd)) ** 0.5
    den = sum(float((a**2).sum()) for a in hv) ** 0.5
    assert num / den < 1e-4


@given(seed=st.integers(0, 10_000))
def test_hvp_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    theta = random_params(depth=2, width=2, seed=seed)
    prog = _small_net_program(crandn(rng, 5, 5))
    ks = theta.kernels
    v = [torch.from_numpy(rng.normal(size=k.shape)) for k in ks]
    w = [torch.from_numpy(rng.normal(size=k.shape)) for k in ks]
    hv = hvp(prog, ks, v).vectors
    hw = hvp(prog, ks, w).vectors
    a = sum(float((x * y).sum()) for x, y in zip(v, hw))
    b = sum(float((x * y).sum()) for x, y in zip(w, hv))
    assert abs(a - b) <= 1e-8 * max(abs(a), abs(b), 1e-12)


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    theta = random_params(seed=6)
    x = crandn(rng, 8, 8)
    v1, g1 = record_and_grad(lambda x: r_eps_value(x, theta, 1e-3), [x])
    v2, g2 = record_and_grad(lambda x: r_eps_value(x, theta, 1e-3), [x])
    assert v1 == v2 and torch.equal(g1[0], g2[0])


def _pairs(k):
    k = np.asarray(k, dtype=complex)
    return torch.from_numpy(np.stack([k.real, k.imag], axis=-1))


def test_conv_identity_kernel():
    rng = np.random.default_rng(4)
    x = crandn(rng, 1, 5, 5)
    assert torch.equal(complex_conv2d(x, _pairs(np.ones((1, 1, 1, 1)))), x)


def test_conv_rotation_by_i():
    x = torch.ones(1, 4, 4, dtype=torch.complex128)
    out = complex_conv2d(x, _pairs(np.full((1, 1, 1, 1), 1j)))
    assert torch.equal(out, torch.full((1, 4, 4), 1j, dtype=torch.complex128))


@pytest.mark.parametrize("ci,co", [(1, 1), (2, 3)])
def test_conv_matches_naive_loop(ci, co):
    rng = np.random.default_rng(5)
    x = crandn(rng, ci, 5, 5)
    k = rng.normal(size=(co, ci, 3, 3)) + 1j * rng.normal(size=(co, ci, 3, 3))
    ref = naive_complex_conv(x.numpy(), k)
    out = complex_conv2d(x, _pairs(k)).numpy()
    assert np.max(np.abs(out - ref)) < 1e-12


def test_conv_batched_equals_unbatched():
    rng = np.random.default_rng(6)
    x = crandn(rng, 3, 2, 6, 6)
    k = _pairs(rng.normal(size=(4, 2, 3, 3)) + 1j * rng.normal(size=(4, 2, 3, 3)))
    out = complex_conv2d(x, k)
    for b in range(3):
        assert torch.allclose(out[b], complex_conv2d(x[b], k), atol=1e-13)


def test_conv_argument_errors():
    x = torch.ones(2, 5, 5, dtype=torch.complex128)
    with pytest.raises(ValueError):
        complex_conv2d(x, torch.zeros(1, 3, 3, 3, 2, dtype=torch.float64))
    with pytest.raises(ValueError):
        complex_conv2d(x, torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64))


@given(seed=st.integers(0, 10_000), k=st.sampled_from([1, 3, 5]))
def test_conv_adjoint_identity(seed, k):
    rng = np.random.default_rng(seed)
    x = crandn(rng, 2, 7, 6)
    g = crandn(rng, 3, 7, 6)
    ker = _pairs(rng.normal(size=(3, 2, k, k)) + 1j * rng.normal(size=(3, 2, k, k)))
    lhs = float(real_dot(complex_conv2d(x, ker), g))
    rhs = float(real_dot(x, complex_conv2d_adjoint(g, ker)))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# each registered primitive against central differences at 100 random points
PRIMITIVES = {
    "dft2": lambda x: (dft2(x) * torch.tensor(np.arange(16.0).reshape(4, 4) / 7)).real.sum(),
    "idft2": lambda x: (idft2(x).imag * torch.tensor(np.linspace(-1, 1, 16).reshape(4, 4))).sum(),
    "conv": lambda x: complex_conv2d(x.unsqueeze(0), _pairs(np.array([[[[1, 2j, 0], [0.5, -1, 1j],
                                                                      [0, 1, 0.3]]]]))).real.pow(2).sum(),
    "smoothed_relu": lambda x: smoothed_relu(x.real * 1e-3, 1e-3).sum(),
    "group_norm": lambda x: torch.sqrt(x.real**2 + x.imag**2 + 1e-4).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_at_random_points(name):
    prog = PRIMITIVES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        x = crandn(rng, 4, 4)
        d = crandn(rng, 4, 4)
        _, (g,) = record_and_grad(prog, [x])
        an = float(real_dot(g, d))
        fd = (float(prog(x + h * d)) - float(prog(x - h * d))) / (2 * h)
        worst = max(worst, abs(an - fd) / max(abs(an), 1e-8))
    assert worst < 1e-5
