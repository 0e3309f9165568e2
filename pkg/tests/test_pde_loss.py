import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdegen import autodiff as ad
from pdegen.autodiff import Tensor
from pdegen.oracle import FdmConfig, solve_fdm
from pdegen.pde_loss import (LossConfig, PhysicalDomain, burgers_residual, ddt, ddx, ic_batch,
                             initial_condition, laplacian, loss_parts, total_loss)


def grid(n):
    dom = PhysicalDomain(n)
    t, x = np.meshgrid(dom.t(), dom.x(), indexing="ij")
    return dom, t, x


def interior(a):
    return a[1:-1, 1:-1]


# initial condition

def test_ic_c3_n5():
    np.testing.assert_allclose(initial_condition(3, 5), [0, 0.5, 1, 0.5, 0], atol=1e-15)


def test_ic_c0_zero():
    assert np.all(initial_condition(0, 17) == 0)


@pytest.mark.parametrize("c", [1, 2, 5, 7])
def test_ic_integer_c_vanishes_at_ends(c):
    u = initial_condition(c, 33)
    assert abs(u[0]) < 1e-15 and abs(u[-1]) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 20), st.integers(2, 300))
def test_ic_range(c, n):
    u = initial_condition(c, n)
    assert u.shape == (n,) and u.min() >= 0 and u.max() <= 1


def test_domain_spacing():
    dom = PhysicalDomain(65)
    assert dom.dx == 1 / 64 and dom.dt == 0.2 / 64
    with pytest.raises(ValueError):
        PhysicalDomain(1)


# stencils

def test_ddx_linear_exact():
    dom, t, x = grid(17)
    out = ddx(x, dom).data[0, 0]
    assert out.shape == (15, 15)
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_ddt_linear_exact():
    dom, t, x = grid(17)
    np.testing.assert_allclose(ddt(t, dom).data, 1.0, atol=1e-12)


def test_derivatives_of_constant_vanish():
    dom, t, x = grid(9)
    c = np.full_like(x, 0.37)
    assert np.all(np.abs(ddx(c, dom).data) < 1e-12)
    assert np.all(np.abs(ddt(c, dom).data) < 1e-12)


def test_derivatives_exact_on_mixed_linear():
    dom, t, x = grid(11)
    u = 2.0 * x - 3.0 * t + 0.5
    np.testing.assert_allclose(ddx(u, dom).data, 2.0, atol=1e-12)
    np.testing.assert_allclose(ddt(u, dom).data, -3.0, atol=1e-11)


def test_ddx_sine_convergence():
    errs = []
    for n in (128, 256, 512):
        dom, t, x = grid(n)
        err = np.max(np.abs(ddx(np.sin(2 * np.pi * x), dom).data[0, 0] - interior(2 * np.pi * np.cos(2 * np.pi * x))))
        errs.append(err)
    assert errs[1] < 1e-2
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_ddt_sine_convergence():
    errs = []
    for n in (128, 256, 512):
        dom, t, x = grid(n)
        w = 2 * np.pi * 5
        err = np.max(np.abs(ddt(np.sin(w * t), dom).data[0, 0] - interior(w * np.cos(w * t))))
        errs.append(err)
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_laplacian():
    dom, t, x = grid(33)
    np.testing.assert_allclose(laplacian(x ** 2, dom).data, 2.0, rtol=1e-9)
    assert np.max(np.abs(laplacian(3 * x + 1, dom).data)) < 1e-8
    errs = []
    for n in (64, 128):
        dom, t, x = grid(n)
        exact = interior(-(2 * np.pi) ** 2 * np.sin(2 * np.pi * x))
        errs.append(np.max(np.abs(laplacian(np.sin(2 * np.pi * x), dom).data[0, 0] - exact)))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_stencils_need_3x3():
    with pytest.raises(ad.ShapeError):
        ddx(np.zeros((2, 2)), PhysicalDomain(2))


# residual

def test_residual_of_constant_is_zero():
    dom, t, x = grid(12)
    assert np.all(burgers_residual(np.full_like(x, 0.5), dom).data == 0)
    assert np.max(np.abs(burgers_residual(np.full_like(x, 0.8), dom).data)) < 1e-12


def test_residual_of_exact_solution_converges():
    means = []
    for n in (64, 128, 256):
        dom, t, x = grid(n)
        means.append(np.mean(np.abs(burgers_residual(x / (1 + t), dom).data)))
    assert means[2] < 5e-3
    assert means[0] > means[1] > means[2]


def test_residual_elementwise_recomputation():
    rng = np.random.default_rng(0)
    dom = PhysicalDomain(10)
    u = rng.uniform(size=(2, 1, 10, 10))
    want = ddt(u[0, 0], dom).data[0, 0] + u[0, 0, 1:-1, 1:-1] * ddx(u[0, 0], dom).data[0, 0]
    assert np.array_equal(burgers_residual(u, dom).data[0, 0], want)


def test_residual_of_tiled_ic():
    n = 64
    dom = PhysicalDomain(n)
    ic = initial_condition(3, n)
    u = np.tile(ic, (n, 1))
    # u_t = 0, so the residual is u * u_x with the Sobel x-derivative
    ux = np.zeros(n - 2)
    for j in range(1, n - 1):
        ux[j - 1] = (ic[j + 1] - ic[j - 1]) * 4 / (8 * dom.dx)
    want = np.tile(ic[1:-1] * ux, (n - 2, 1))
    res = burgers_residual(u, dom).data[0, 0]
    np.testing.assert_allclose(res, want, rtol=1e-12, atol=1e-12)
    assert np.mean(res ** 2) > 0
    np.testing.assert_allclose(np.mean(res ** 2), np.mean(want ** 2), rtol=1e-12)


# loss

def test_loss_of_tiled_ic_has_no_boundary_term():
    n = 32
    ics = ic_batch([3.0, 4.5], n)
    field = np.stack([np.tile(r, (n, 1)) for r in ics])[:, None]
    for lam in (0.5, 10.0, 1000.0):
        parts = loss_parts(field, ics, LossConfig(lam), PhysicalDomain(n))
        assert parts.boundary == 0
        assert float(parts.total.data) == parts.residual


@pytest.mark.parametrize("n", [16, 64, 256])
@pytest.mark.parametrize("c", [1, 3, 4])
def test_zero_output_loss(n, c):
    ics = ic_batch([c], n)
    parts = loss_parts(np.zeros((1, 1, n, n)), ics, LossConfig(10.0), PhysicalDomain(n))
    assert parts.residual == 0
    # discrete mean of u0^2 on nodes j/(n-1): the node x=1 repeats x=0
    np.testing.assert_allclose(parts.boundary, 0.375 * (1 - 1 / n), rtol=1e-12)
    np.testing.assert_allclose(float(parts.total.data), 3.75 * (1 - 1 / n), rtol=1e-12)


def test_zero_output_loss_tends_to_continuum_value():
    vals = [loss_parts(np.zeros((1, 1, n, n)), ic_batch([3], n), LossConfig(), PhysicalDomain(n)).total.data
            for n in (64, 1024)]
    assert abs(vals[1] - 3.75) < abs(vals[0] - 3.75) < 0.1


def test_oracle_field_beats_trivial_fields():
    n, c = 128, 3
    dom = PhysicalDomain(n)
    ics = ic_batch([c], n)
    lc = LossConfig()
    oracle = float(total_loss(solve_fdm(c, FdmConfig(), n)[None, None], ics, lc, dom).data)
    zero = float(total_loss(np.zeros((1, 1, n, n)), ics, lc, dom).data)
    tiled = float(total_loss(np.tile(ics[0], (n, 1))[None, None], ics, lc, dom).data)
    assert oracle < zero and oracle < tiled


def test_loss_nonnegative_and_zero_only_at_exact_fit():
    rng = np.random.default_rng(1)
    dom = PhysicalDomain(8)
    for _ in range(20):
        u = rng.uniform(size=(2, 1, 8, 8))
        assert float(total_loss(u, rng.uniform(size=(2, 8)), LossConfig(), dom).data) > 0
    const = np.full((2, 1, 8, 8), 0.5)
    assert float(total_loss(const, np.full((2, 8), 0.5), LossConfig(), dom).data) == 0


def test_loss_batch_permutation_invariance():
    rng = np.random.default_rng(2)
    dom = PhysicalDomain(12)
    u = rng.uniform(size=(4, 1, 12, 12))
    ics = rng.uniform(size=(4, 12))
    perm = [2, 0, 3, 1]
    a = float(total_loss(u, ics, LossConfig(), dom).data)
    b = float(total_loss(u[perm], ics[perm], LossConfig(), dom).data)
    assert abs(a - b) <= 1e-12 * abs(a)
    assert float(total_loss(u, ics, LossConfig(), dom).data) == a


def test_loss_gradient_wrt_field():
    rng = np.random.default_rng(3)
    dom = PhysicalDomain(7)
    ics = Tensor(rng.uniform(size=(2, 7)))

    def build(t):
        return total_loss(ad.reshape(t, (2, 1, 7, 7)), ics, LossConfig(3.0), dom)

    assert ad.grad_check(build, rng.uniform(size=98)) < 1e-5


def test_x_boundary_flag_adds_edge_penalty():
    n = 8
    dom = PhysicalDomain(n)
    u = np.full((1, 1, n, n), 0.5)
    ics = np.full((1, n), 0.5)
    off = loss_parts(u, ics, LossConfig(x_boundary=False), dom)
    on = loss_parts(u, ics, LossConfig(x_boundary=True), dom)
    assert off.boundary == 0
    assert on.boundary == pytest.approx(0.25)


def test_nonfinite_loss_names_component():
    dom = PhysicalDomain(6)
    u = np.zeros((1, 1, 6, 6))
    u[0, 0, 3, 3] = np.inf
    with pytest.raises(ad.NonFiniteError, match="residual"):
        loss_parts(u, np.zeros((1, 6)), LossConfig(), dom)
    with pytest.raises(ad.NonFiniteError, match="boundary"):
        loss_parts(np.zeros((1, 1, 6, 6)), np.full((1, 6), np.nan), LossConfig(), dom)


def test_lambda_must_be_positive():
    with pytest.raises(ValueError):
        LossConfig(lam=0)


def test_shape_mismatch_between_field_and_ics():
    with pytest.raises(ad.ShapeError):
        total_loss(np.zeros((2, 1, 6, 6)), np.zeros((3, 6)), LossConfig(), PhysicalDomain(6))
