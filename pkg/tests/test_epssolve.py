import dataclasses

import numpy as np
import pytest

from thinhomog.cell import CellSolver, CoefficientSet
from thinhomog.epssolve import (average_gap, flux_two_scale_residual, l2_error_vs_limit,
                                local_average, periods_resolution, poincare_ratio,
                                solve_eps_problem)
from thinhomog.errors import OutOfDomain, ResolutionError
from thinhomog.limit1d import solve_effective

from corpus import channel, channel_coeffs, flat

UNIT = CoefficientSet.from_strings(c="1", f="1")


@pytest.fixture(scope="module")
def flat_pair():
    s = solve_eps_problem(flat(), UNIT, 0.5, 16, 8)
    u = solve_effective(flat(), UNIT, s.mesh.n1, (8, 8))
    return s, u


@pytest.fixture(scope="module")
def channel_solution():
    return solve_eps_problem(channel(), channel_coeffs(), 0.2, 16, 8)


def test_resolution_counts():
    assert periods_resolution(1.0, 0.1, 16) == 320
    assert periods_resolution(1.0, 0.3, 8) == 54


def test_zero_source_gives_zero():
    s = solve_eps_problem(channel(), CoefficientSet.from_strings(c="1"), 0.5, 8, 8)
    assert np.all(s.u == 0.0)
    assert s.apriori_norm() == 0.0


def test_flat_problem_reduces_to_limit(flat_pair):
    s, u = flat_pair
    # x2-independent data: each column equals the 1D solution on the same nodes
    assert np.max(np.abs(s.grid - u.u[:, None])) <= 1e-8
    assert l2_error_vs_limit(s, u) <= 1e-15
    assert average_gap(s, u) <= 1e-8
    exact = 1.0 - np.cosh(s.mesh.t) / np.cosh(1.0)
    assert np.max(np.abs(s.grid[:, 0] - exact)) <= 1e-3


def test_local_average_of_special_fields(flat_pair):
    s, _ = flat_pair
    const = dataclasses.replace(s, u=np.full_like(s.u, 2.5))
    np.testing.assert_allclose(const.local_average(np.linspace(-1, 1, 7)), 2.5, rtol=1e-14)
    odd = dataclasses.replace(s, u=s.nodes[:, 1].copy())
    assert abs(local_average(odd, 0.0)) <= 1e-15
    assert abs(local_average(odd, 0.37)) <= 1e-15
    with pytest.raises(OutOfDomain):
        s.local_average(1.2)


def test_interpolate_recovers_nodal_values(channel_solution):
    s = channel_solution
    idx = np.arange(0, s.u.size, 37)
    np.testing.assert_allclose(s.interpolate(s.nodes[idx, 0], s.nodes[idx, 1]), s.u[idx],
                               atol=1e-12)


def test_energy_identity(channel_solution):
    assert channel_solution.energy_identity_gap() <= 1e-8


def test_positive_source_gives_positive_solution(channel_solution):
    s = channel_solution
    assert s.grid[1:-1].min() > 0
    assert np.all(s.grid[0] == 0) and np.all(s.grid[-1] == 0)


def test_poincare_ratio_bounded():
    r = [poincare_ratio(solve_eps_problem(channel(), channel_coeffs(), e, 16, 8)) for e in (0.2, 0.1)]
    assert max(r) < 1.0
    assert r[1] <= 2.0 * r[0]


def test_flux_residual_zero_without_source():
    coeffs = CoefficientSet.from_strings(a11="2 + cos(2*pi*y1)", c="1")
    s = solve_eps_problem(flat(), coeffs, 0.5, 8, 8)
    cells = CellSolver(flat(), coeffs, 8, 8)
    u = solve_effective(flat(), coeffs, 8, solver=cells)
    assert flux_two_scale_residual(s, cells, u, "1 - x1^2") == 0.0
    assert flux_two_scale_residual(s, cells, u, "1 - x1^2", "cos(2*pi*y1)") == 0.0


def test_flux_residual_flat_case(flat_pair):
    s, u = flat_pair
    cells = CellSolver(flat(), UNIT, 8, 8)
    # a = I on a flat strip: the flux pairing reduces to 2 int phi u'
    assert flux_two_scale_residual(s, cells, u, "1 - x1^2") <= 1e-8


def test_resolution_cap():
    with pytest.raises(ResolutionError):
        solve_eps_problem(channel(), channel_coeffs(), 0.01, 32, 16, max_dofs=10_000)


@pytest.mark.parametrize("kwargs", [dict(eps=0.0), dict(eps=0.1, n_per_period=4),
                                    dict(eps=0.1, n_s=2)])
def test_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        solve_eps_problem(channel(), channel_coeffs(), **kwargs)
