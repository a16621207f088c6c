import numpy as np
import pytest

from thinhomog.cell import CellSolver, CoefficientSet
from thinhomog.errors import NonSPD, OutOfDomain
from thinhomog.limit1d import derivative, evaluate, solve_effective, solve_two_point

from corpus import channel, channel_coeffs, flat

COSH_MID = 1.0 - 1.0 / np.cosh(1.0)


def _cosh_exact(x):
    return 1.0 - np.cosh(x) / np.cosh(1.0)


@pytest.fixture(scope="module")
def cosh_solution():
    return solve_effective(flat(), CoefficientSet.from_strings(c="1", f="1"), 256, (8, 8))


def test_cosh_benchmark(cosh_solution):
    u = cosh_solution
    assert np.allclose(u.a_eff, 2.0, atol=1e-9)
    assert np.allclose(u.c_bar, 2.0, atol=1e-12)
    assert np.allclose(u.box_measure, 2.0, atol=1e-12)
    assert np.max(np.abs(u.u - _cosh_exact(u.nodes))) <= 1e-4


def test_evaluate_and_derivative(cosh_solution):
    u = cosh_solution
    assert evaluate(u, -1.0) == 0.0 and evaluate(u, 1.0) == 0.0
    assert evaluate(u, 0.0) == pytest.approx(COSH_MID, abs=1e-4)
    a, b = u.nodes[10], u.nodes[11]
    xs = np.linspace(a, b, 5)[1:-1]
    d = derivative(u, xs)
    assert np.ptp(d) == 0.0
    assert d[0] == pytest.approx((u.u[11] - u.u[10]) / (b - a), rel=1e-14)
    with pytest.raises(OutOfDomain):
        evaluate(u, 1.5)


def test_energy_identity(cosh_solution):
    assert cosh_solution.energy_identity_gap() <= 1e-9


def test_zero_source_gives_zero():
    u = solve_effective(channel(), CoefficientSet.from_strings(a11="2 + cos(2*pi*y1)", c="1"),
                        16, (16, 8))
    assert np.all(u.u == 0.0)


def _manufactured(n, L=1.0):
    k = np.pi / (2 * L)

    def u_star(x):
        return np.sin(k * (x + L))

    def a(x):
        return 1.0 + 0.5 * x ** 2

    def rhs(x):
        # -(a u')' + c u with c = 1 + x
        du = k * np.cos(k * (x + L))
        ddu = -k ** 2 * np.sin(k * (x + L))
        return -(x * du + a(x) * ddu) + (1.0 + x) * u_star(x)

    sol = solve_two_point(L, n, a, lambda x: 1.0 + x, rhs)
    xg, wg = np.polynomial.legendre.leggauss(6)
    h = np.diff(sol.nodes)
    xq = 0.5 * (sol.nodes[:-1, None] + sol.nodes[1:, None]) + 0.5 * h[:, None] * xg
    err = np.sqrt(np.sum(0.5 * h[:, None] * wg * (sol.evaluate(xq) - u_star(xq)) ** 2))
    return err


def test_manufactured_l2_rate():
    errs = np.array([_manufactured(n) for n in (16, 32, 64, 128)])
    rates = errs[:-1] / errs[1:]
    assert np.all(rates >= 3.5), rates


def test_two_point_rejects_nonpositive_diffusion():
    with pytest.raises(NonSPD):
        solve_two_point(1.0, 8, lambda x: x, lambda x: 0.0, lambda x: 1.0)


def test_channel_limit_properties():
    solver = CellSolver(channel(), channel_coeffs(), 16, 8)
    u = solve_effective(channel(), channel_coeffs(), 16, solver=solver, profile_interp=True)
    assert len(solver) == 17
    assert np.all(u.u[1:-1] > 0)                  # positive source
    assert u.energy_identity_gap() <= 1e-9
    # at the nodes the interpolated tables equal the cell solves
    again = solve_effective(channel(), channel_coeffs(), 16, solver=solver, profile_interp=True)
    np.testing.assert_array_equal(again.u, u.u)
    assert len(solver) == 17


def test_symmetric_data_gives_even_solution():
    coeffs = CoefficientSet.from_strings(a11="2 + cos(2*pi*y1)", c="1", f="1 - x1^2")
    model = flat()
    u = solve_effective(model, coeffs, 32, (16, 8))
    np.testing.assert_allclose(u.u, u.u[::-1], atol=1e-12)


def test_too_few_elements():
    with pytest.raises(ValueError):
        solve_effective(flat(), CoefficientSet.from_strings(f="1"), 4)
