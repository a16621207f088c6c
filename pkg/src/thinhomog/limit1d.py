"""The effective one-dimensional problem

    -(a_eff(x1) u')' + c_bar(x1) u = |Box(x1)| f(x1)  on (-L, L),  u(+-L) = 0,

discretised with P1 elements and two-point Gauss quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .cell import CellSolver, CoefficientSet, DEFAULT_CELL_RESOLUTION
from .errors import NonSPD, OutOfDomain
from .geometry import GeometryModel

_XG, _WG = np.polynomial.legendre.leggauss(2)


@dataclass
class EffectiveSolution:
    nodes: np.ndarray
    u: np.ndarray
    xq: np.ndarray              # (n_elements, 2) quadrature points
    wq: np.ndarray
    a_eff: np.ndarray           # tables at xq
    c_bar: np.ndarray
    rhs: np.ndarray             # |Box| f at xq
    box_measure: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    cell_solutions: list = field(default_factory=list, repr=False)

    @property
    def L(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_elements(self) -> int:
        return self.nodes.size - 1

    def _locate(self, x1):
        x1 = np.asarray(x1, dtype=float)
        lo, hi = self.nodes[0], self.nodes[-1]
        tol = 1e-12 * (hi - lo)
        if np.any(x1 < lo - tol) or np.any(x1 > hi + tol):
            raise OutOfDomain(f"x1 outside [{lo}, {hi}]")
        x1 = np.clip(x1, lo, hi)
        e = np.clip(np.searchsorted(self.nodes, x1, side="right") - 1, 0, self.n_elements - 1)
        return x1, e

    def evaluate(self, x1):
        x1, e = self._locate(x1)
        xa, xb = self.nodes[e], self.nodes[e + 1]
        t = (x1 - xa) / (xb - xa)
        out = (1 - t) * self.u[e] + t * self.u[e + 1]
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, x1):
        _, e = self._locate(x1)
        out = (self.u[e + 1] - self.u[e]) / (self.nodes[e + 1] - self.nodes[e])
        return float(out) if np.ndim(out) == 0 else out

    def element_slopes(self) -> np.ndarray:
        return np.diff(self.u) / np.diff(self.nodes)

    def values_at_quadrature(self) -> np.ndarray:
        t = 0.5 * (_XG + 1.0)
        return (1 - t)[None, :] * self.u[:-1, None] + t[None, :] * self.u[1:, None]

    def energy_identity_gap(self) -> float:
        """|int a (u')^2 + c u^2 - int rhs u| relative to the energy."""
        du = self.element_slopes()[:, None]
        uq = self.values_at_quadrature()
        energy = np.sum(self.wq * (self.a_eff * du ** 2 + self.c_bar * uq ** 2))
        work = np.sum(self.wq * self.rhs * uq)
        return float(abs(energy - work) / max(abs(energy), 1e-300))

    def norms(self) -> dict:
        du = self.element_slopes()[:, None]
        uq = self.values_at_quadrature()
        return {"l2": float(np.sqrt(np.sum(self.wq * uq ** 2))),
                "h1_semi": float(np.sqrt(np.sum(self.wq * du ** 2)))}


def quadrature_points(L: float, n_elements: int):
    nodes = np.linspace(-L, L, n_elements + 1)
    half = 0.5 * np.diff(nodes)
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    xq = mid[:, None] + half[:, None] * _XG[None, :]
    wq = half[:, None] * _WG[None, :]
    return nodes, xq, wq


def solve_two_point(L: float, n_elements: int, a_fn, c_fn, rhs_fn,
                    tol: float = 1e-12) -> EffectiveSolution:
    """P1 solve of ``-(a u')' + c u = rhs`` with homogeneous Dirichlet ends.

    The coefficient callables are evaluated at the Gauss points.
    """
    if n_elements < 2:
        raise ValueError("need at least two elements")
    nodes, xq, wq = quadrature_points(L, n_elements)
    a = np.broadcast_to(np.asarray(a_fn(xq), dtype=float), xq.shape)
    c = np.broadcast_to(np.asarray(c_fn(xq), dtype=float), xq.shape)
    r = np.broadcast_to(np.asarray(rhs_fn(xq), dtype=float), xq.shape)
    if np.any(a <= 0):
        raise NonSPD(f"effective diffusion coefficient not positive (min {a.min():.3e})")

    h = np.diff(nodes)
    t = 0.5 * (_XG + 1.0)
    N = np.stack([1 - t, t], axis=1)                             # (q, a)
    dN = np.array([-1.0, 1.0])[None, :] / h[:, None]             # (e, a)
    Ke = (np.einsum("eq,eq,ea,eb->eab", wq, a, dN, dN)
          + np.einsum("eq,eq,qa,qb->eab", wq, c, N, N))
    be = np.einsum("eq,eq,qa->ea", wq, r, N)
    conn = np.stack([np.arange(n_elements), np.arange(1, n_elements + 1)], axis=1)
    n = n_elements + 1
    K = sp.csr_matrix((Ke.ravel(), (np.repeat(conn, 2, axis=1).ravel(),
                                    np.tile(conn, (1, 2)).ravel())), shape=(n, n))
    b = np.bincount(conn.ravel(), be.ravel(), minlength=n)
    system = fem.constrain(K, b, fem.ConstraintSet(dirichlet={0: 0.0, n - 1: 0.0}))
    u, res = system.solve(tol=tol)
    return EffectiveSolution(nodes, u, xq, wq, np.array(a), np.array(c), np.array(r),
                             iterations=res.iterations, residual=res.residual)


def solve_effective(model: GeometryModel, coeffs: CoefficientSet, n_elements: int = 64,
                    cell_resolution: tuple = DEFAULT_CELL_RESOLUTION, *,
                    profile_interp: bool = False, solver: CellSolver | None = None,
                    workers: int = 1) -> EffectiveSolution:
    """Solve the limit problem with coefficients from cell solves.

    By default every Gauss point gets its own (cached) cell solve; with
    ``profile_interp`` the cells are solved at the mesh nodes only and the
    coefficients are interpolated linearly.
    """
    if n_elements < 8:
        raise ValueError("n_elements must be at least 8")
    if solver is None:
        solver = CellSolver(model, coeffs, *cell_resolution)
    nodes, xq, wq = quadrature_points(model.L, n_elements)
    if profile_interp:
        prof = solver.profile(nodes, workers=workers)
        a = np.interp(xq, nodes, prof.a_eff)
        c = np.interp(xq, nodes, prof.c_bar)
        box = np.interp(xq, nodes, prof.box_measure)
    else:
        prof = solver.profile(xq.ravel(), workers=workers)
        a = prof.a_eff.reshape(xq.shape)
        c = prof.c_bar.reshape(xq.shape)
        box = prof.box_measure.reshape(xq.shape)
    f = coeffs.source(xq)
    sol = solve_two_point(model.L, n_elements, lambda _: a, lambda _: c, lambda _: box * f)
    sol.box_measure = box
    sol.cell_solutions = prof.solutions
    return sol


def evaluate(u: EffectiveSolution, x1):
    return u.evaluate(x1)


def derivative(u: EffectiveSolution, x1):
    return u.derivative(x1)
