"""The full problem on the thin domain Omega_eps and its post-processing.

The domain is meshed through the thin reference map
``(x1, s) -> (x1, eps * (g_-(x1, x1/eps) + s * h(x1, x1/eps)))`` with a fixed
number of elements per fast period.  Dirichlet data sit on the bases
x1 = +-L; the lateral no-flux condition is natural.  Integrals against
``mu_eps`` carry the factor ``1/eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import fem
from .cell import CellSolver, CoefficientSet
from .errors import OutOfDomain, ResolutionError
from .geometry import GeometryModel, reference_map_thin
from .limit1d import EffectiveSolution

MAX_DOFS = 2_000_000
EPS_TOL = 1e-9
MEASURE_VARIABLES = ("x1", "x2")


@dataclass
class EpsSolution:
    eps: float
    model: GeometryModel
    coeffs: CoefficientSet
    mesh: fem.Mesh
    quad: fem.ElementQuadrature
    u: np.ndarray
    K: object = field(repr=False, default=None)
    b: np.ndarray | None = field(repr=False, default=None)
    iterations: int = 0
    residual: float = 0.0
    post_order: int = 3
    _post: fem.ElementQuadrature | None = field(default=None, repr=False)

    @property
    def nodes(self) -> np.ndarray:
        return self.quad.nodes

    @property
    def post(self) -> fem.ElementQuadrature:
        """Higher-order quadrature on the same mesh for error functionals."""
        if self._post is None:
            self._post = fem.ElementQuadrature(self.mesh, self.nodes, self.post_order)
        return self._post

    @property
    def grid(self) -> np.ndarray:
        return self.u.reshape(self.mesh.n1 + 1, self.mesh.n2 + 1)

    def coefficient_matrix(self, points) -> np.ndarray:
        X1, X2 = points[..., 0], points[..., 1]
        return self.coeffs.matrix(X1, X1 / self.eps, X2 / self.eps)

    def flux(self, quad: fem.ElementQuadrature | None = None) -> np.ndarray:
        """``a^eps grad u_eps`` at the quadrature points of ``quad``."""
        quad = quad or self.quad
        A = self.coefficient_matrix(quad.points)
        return np.einsum("eqij,eqj->eqi", A, quad.gradients(self.u))

    def norms(self) -> dict:
        return fem.norms(self.u, self.post, weight=1.0 / self.eps)

    def apriori_norm(self) -> float:
        n = self.norms()
        return n["l2_weighted"] + n["h1_semi"]

    def energy_identity_gap(self) -> float:
        """|u.K.u - b.u| / u.K.u on the assembled (unconstrained) system."""
        Ku = self.K @ self.u
        energy = float(self.u @ Ku)
        return abs(energy - float(self.b @ self.u)) / max(abs(energy), 1e-300)

    # -- sampling ------------------------------------------------------------

    def _column(self, x1):
        x1 = np.asarray(x1, dtype=float)
        L = self.model.L
        if np.any(np.abs(x1) > L * (1 + 1e-12)):
            raise OutOfDomain(f"x1 outside [-{L}, {L}]")
        t = (np.clip(x1, -L, L) + L) / (2 * L) * self.mesh.n1
        i = np.clip(np.floor(t).astype(int), 0, self.mesh.n1 - 1)
        return i, t - i

    def local_average(self, x1):
        """Cross-sectional mean of u_eps at x1 (thickness-weighted)."""
        i, xi = self._column(x1)
        U = self.grid
        col = (1 - xi)[..., None] * U[i] + xi[..., None] * U[i + 1]
        out = 0.5 * (col[..., :-1] + col[..., 1:]).mean(axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def interpolate(self, x1, x2):
        """Evaluate the Q1 field at physical points (clamped across the walls)."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        x1, x2 = np.broadcast_arrays(x1, x2)
        i, xi = self._column(x1.ravel())
        X2 = self.nodes[:, 1].reshape(self.mesh.n1 + 1, self.mesh.n2 + 1)
        col = (1 - xi)[:, None] * X2[i] + xi[:, None] * X2[i + 1]
        U = self.grid
        ucol = (1 - xi)[:, None] * U[i] + xi[:, None] * U[i + 1]
        p = x2.ravel()
        j = np.clip((p[:, None] >= col).sum(axis=1) - 1, 0, self.mesh.n2 - 1)
        rows = np.arange(p.size)
        eta = np.clip((p - col[rows, j]) / (col[rows, j + 1] - col[rows, j]), 0.0, 1.0)
        out = (1 - eta) * ucol[rows, j] + eta * ucol[rows, j + 1]
        return out.reshape(x1.shape)


def periods_resolution(L: float, eps: float, n_per_period: int) -> int:
    """Number of x1 elements giving n_per_period elements per fast period."""
    return max(2, math.ceil(2.0 * L / eps * n_per_period - 1e-9))


def solve_eps_problem(model: GeometryModel, coeffs: CoefficientSet, eps: float,
                      n_per_period: int = 16, n_s: int = 8, *,
                      max_dofs: int = MAX_DOFS, tol: float = EPS_TOL) -> EpsSolution:
    """Q1 solve of the full problem in its mu_eps weak form."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_per_period < 8 or n_s < 8:
        raise ValueError("need at least 8 elements per period and 8 across")
    n1 = periods_resolution(model.L, eps, n_per_period)
    dofs = (n1 + 1) * (n_s + 1)
    if dofs > max_dofs:
        raise ResolutionError(f"eps={eps} needs {dofs} dofs, above the cap of {max_dofs}")
    mesh = fem.build_mesh((-model.L, model.L), n1, n_s)
    quad = fem.ElementQuadrature(mesh, reference_map_thin(model, eps))
    P = quad.points
    X1, X2 = P[..., 0], P[..., 1]
    A = coeffs.matrix(X1, X1 / eps, X2 / eps)
    fem.check_spd(A)
    c = coeffs.reaction(X1, X1 / eps, X2 / eps)
    K = quad.stiffness(A / eps, c / eps)
    b = quad.load(f=coeffs.source(X1) / eps)
    bases = np.concatenate([mesh.end_nodes("left"), mesh.end_nodes("right")])
    system = fem.constrain(K, b, fem.ConstraintSet(dirichlet={int(n): 0.0 for n in bases}))
    u, res = system.solve(tol=tol)
    return EpsSolution(float(eps), model, coeffs, mesh, quad, u, K, b,
                       res.iterations, res.residual)


def local_average(s: EpsSolution, x1):
    return s.local_average(x1)


def l2_error_vs_limit(s: EpsSolution, u: EffectiveSolution) -> float:
    """``eps^-1 int_{Omega_eps} |u_eps - u(x1)|^2 dx``."""
    q = s.post
    diff = q.values(s.u) - u.evaluate(q.points[..., 0])
    return q.integrate(diff ** 2) / s.eps


def average_gap(s: EpsSolution, u: EffectiveSolution) -> float:
    """sup over mesh columns of |local average of u_eps - u|."""
    x1 = s.mesh.t
    return float(np.max(np.abs(s.local_average(x1) - u.evaluate(x1))))


def poincare_ratio(s: EpsSolution) -> float:
    """``int (u_eps - avg)^2 / (eps^2 int |grad u_eps|^2)`` (both mu_eps-weighted)."""
    q = s.post
    avg = s.local_average(q.points[..., 0])
    num = q.integrate((q.values(s.u) - avg) ** 2)
    den = s.eps ** 2 * q.integrate(np.sum(q.gradients(s.u) ** 2, axis=-1))
    return num / den if den > 0 else 0.0


def _as_expr(e, variables):
    if e is None or isinstance(e, ex.Expr):
        return e
    return ex.parse(e, variables)


def flux_two_scale_residual(s: EpsSolution, cells: CellSolver, u: EffectiveSolution,
                            phi, psi=None) -> float:
    """Gap between the oscillating flux pairing and its two-scale limit.

    ``phi`` is a function of (x1, x2); ``psi`` of (y1, y2), 1-periodic in y1
    (None means psi = 1).  The limit uses the microscopic flux
    ``a (e1 + grad_y N1) u'`` integrated over the cell.
    """
    phi = _as_expr(phi, MEASURE_VARIABLES)
    psi = _as_expr(psi, ex.DEFAULT_VARIABLES)
    q = s.post
    P = q.points
    X1, X2 = P[..., 0], P[..., 1]
    sigma1 = s.flux(q)[..., 0]
    weight = np.broadcast_to(ex.evaluate(phi, {"x1": X1, "x2": X2}), X1.shape)
    if psi is not None:
        weight = weight * ex.evaluate(psi, {"x1": X1, "y1": X1 / s.eps, "y2": X2 / s.eps})
    lhs = q.integrate(sigma1 * weight) / s.eps

    xq = u.xq.ravel()
    moments = np.array([cells.solve(x).flux_moment(psi) for x in xq]).reshape(u.xq.shape)
    phi0 = np.broadcast_to(ex.evaluate(phi, {"x1": u.xq, "x2": 0.0}), u.xq.shape)
    du = u.element_slopes()[:, None]
    rhs = float(np.sum(u.wq * phi0 * du * moments))
    return abs(lhs - rhs)
