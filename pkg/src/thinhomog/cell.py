"""Cell problems on Box(x1) and the effective coefficients they produce."""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import fem
from .errors import CrossCheckFailure, NonSPD, ValidationFailure
from .geometry import GeometryModel, cell_geometry, reference_map_cell, sections

DEFAULT_CELL_RESOLUTION = (64, 32)
CELL_TOL = 1e-10
CROSS_CHECK_TOL = 1e-6


@dataclass(frozen=True)
class CoefficientSet:
    a11: ex.Expr
    a12: ex.Expr
    a22: ex.Expr
    c: ex.Expr
    f: ex.Expr
    lambda0: float = 1e-3

    @classmethod
    def from_strings(cls, a11="1", a12="0", a22="1", c="0", f="0", lambda0=1e-3):
        return cls(ex.parse(a11), ex.parse(a12), ex.parse(a22), ex.parse(c),
                   ex.parse(f), float(lambda0))

    def matrix(self, x1, y1, y2) -> np.ndarray:
        b = {"x1": x1, "y1": y1, "y2": y2}
        shape = np.broadcast_shapes(np.shape(x1), np.shape(y1), np.shape(y2))
        A = np.empty(shape + (2, 2))
        A[..., 0, 0] = ex.evaluate(self.a11, b)
        A[..., 0, 1] = A[..., 1, 0] = ex.evaluate(self.a12, b)
        A[..., 1, 1] = ex.evaluate(self.a22, b)
        return A

    def reaction(self, x1, y1, y2) -> np.ndarray:
        shape = np.broadcast_shapes(np.shape(x1), np.shape(y1), np.shape(y2))
        return np.broadcast_to(ex.evaluate(self.c, {"x1": x1, "y1": y1, "y2": y2}), shape)

    def source(self, x1) -> np.ndarray:
        return np.broadcast_to(ex.evaluate(self.f, {"x1": x1, "y1": 0.0, "y2": 0.0}),
                               np.shape(x1))

    def shifted(self, delta: float) -> "CoefficientSet":
        """Coefficients with ``a + delta * I``."""
        shift = ex.Const(float(delta))
        return CoefficientSet(ex.BinOp("+", self.a11, shift), self.a12,
                              ex.BinOp("+", self.a22, shift), self.c, self.f, self.lambda0)


def validate_coefficients(model: GeometryModel, coeffs: CoefficientSet,
                          n_samples: int = 12, seed: int = 0) -> list:
    """Return a list of problems; empty when the coefficient probes pass."""
    problems = []
    for name in ("a11", "a12", "a22"):
        if ex.contains_call(getattr(coeffs, name), "abs"):
            problems.append(f"{name} uses abs(); diffusion coefficients must be C^1")
    for name in ("a11", "a12", "a22", "c"):
        e = getattr(coeffs, name)
        if not ex.check_periodicity(e, "y1", 8, seed=seed, sample_range=(-model.L, model.L)):
            problems.append(f"{name} is not 1-periodic in y1")
    extra = ex.free_variables(coeffs.f) - {"x1"}
    if extra:
        problems.append(f"f must depend on x1 only, found {sorted(extra)}")

    x1 = np.linspace(-model.L, model.L, n_samples)
    y1 = np.linspace(0.0, 1.0, n_samples, endpoint=False)
    s = np.linspace(0.0, 1.0, 5)
    X1, Y1 = np.meshgrid(x1, y1, indexing="ij")
    sec = sections(model, X1, Y1)
    Y2 = sec.g_minus[..., None] + s * sec.thickness[..., None]
    A = coeffs.matrix(X1[..., None], Y1[..., None], Y2)
    lam = fem.lambda_min(A)
    if np.any(lam < coeffs.lambda0):
        problems.append(f"ellipticity probe failed: min eigenvalue {lam.min():.3e} "
                        f"< lambda0 = {coeffs.lambda0}")
    cval = coeffs.reaction(X1[..., None], Y1[..., None], Y2)
    if np.any(cval < 0):
        problems.append("reaction coefficient c is negative somewhere")
    return problems


@dataclass
class CellSolution:
    x1: float
    mesh: fem.Mesh
    quad: fem.ElementQuadrature
    A_q: np.ndarray
    N: np.ndarray                       # (2, n_grid) nodal correctors
    iterations: tuple
    A_eff: np.ndarray | None = None
    A_eff_direct: np.ndarray | None = None
    c_bar: float | None = None
    box_measure: float | None = None

    @property
    def a_eff(self) -> float:
        return float(self.A_eff[0, 0])

    def corrector_gradients(self) -> np.ndarray:
        """``G[e, q, k, j] = d N_j / d y_k`` at the quadrature points."""
        return np.stack([self.quad.gradients(self.N[0]),
                         self.quad.gradients(self.N[1])], axis=-1)

    def flux(self, j: int = 0) -> np.ndarray:
        """``a (e_j + grad N_j)`` at the quadrature points."""
        g = self.quad.gradients(self.N[j])
        g[..., j] += 1.0
        return np.einsum("eqik,eqk->eqi", self.A_q, g)

    def flux_moment(self, psi: ex.Expr | None = None, component: int = 0) -> float:
        """``int_Box [a (e1 + grad N1)]_component psi(y) dy``."""
        sigma = self.flux(0)[..., component]
        if psi is None:
            return self.quad.integrate(sigma)
        P = self.quad.points
        w = np.broadcast_to(ex.evaluate(psi, {"x1": self.x1, "y1": P[..., 0], "y2": P[..., 1]}),
                            sigma.shape)
        return self.quad.integrate(sigma * w)

    def zero_mean_defect(self) -> np.ndarray:
        w = self.quad.lumped_mass()
        return np.abs(self.N @ w)


def solve_cell_problem(model: GeometryModel, coeffs: CoefficientSet, x1: float,
                       n1: int = DEFAULT_CELL_RESOLUTION[0],
                       n2: int = DEFAULT_CELL_RESOLUTION[1],
                       tol: float = CELL_TOL, n_quad: int = 64,
                       averages: str = "exact") -> CellSolution:
    """Solve for the two correctors on Box(x1) and fill the effective data.

    Right sides are the weak volume terms ``-int a e_k . grad v``; periodic
    in y1, natural conditions on the curved walls, zero weighted mean.
    ``averages="discrete"`` takes c_bar and |Box| from the cell mesh
    quadrature instead of the exact section quadrature, which makes the
    limit problem the discrete homogenisation of a matching eps-mesh.
    """
    if n1 < 8 or n2 < 8:
        raise ValueError("cell mesh must be at least 8 x 8")
    geo = cell_geometry(model, x1, n_quad)
    mesh = fem.build_mesh((0.0, 1.0), n1, n2, periodic_in_dir1=True)
    quad = fem.ElementQuadrature(mesh, reference_map_cell(geo))
    P = quad.points
    A_q = coeffs.matrix(x1, P[..., 0], P[..., 1])
    fem.check_spd(A_q)
    K = quad.stiffness(A_q)
    weights = quad.lumped_mass()
    cs = fem.ConstraintSet(periodic_pairs=mesh.periodic_pairs(), zero_mean=True,
                           mean_weights=weights)
    N = np.empty((2, mesh.n_grid))
    its = []
    for k in range(2):
        b = quad.load(g=-A_q[..., :, k])
        system = fem.constrain(K, b, cs)
        N[k], res = system.solve(tol=tol)
        its.append(res.iterations)
    sol = CellSolution(float(x1), mesh, quad, A_q, N, tuple(its))
    if averages == "discrete":
        return effective_coefficients(sol, coeffs)
    if averages != "exact":
        raise ValueError(f"averages must be 'exact' or 'discrete', not {averages!r}")
    return effective_coefficients(sol, coeffs, model=model, geometry=geo)


def effective_coefficients(cs: CellSolution, coeffs: CoefficientSet, *,
                           model: GeometryModel | None = None, geometry=None,
                           n_quad: int = 64, n_s: int = 8) -> CellSolution:
    """Fill ``A_eff`` by the direct and the energy formula and cross-check them."""
    quad = cs.quad
    G = cs.corrector_gradients()                                 # (e, q, k, j)
    IG = G + np.eye(2)
    direct = np.einsum("eq,eqik,eqkj->ij", quad.wdet, cs.A_q, IG)
    energy = np.einsum("eq,eqki,eqkl,eqlj->ij", quad.wdet, IG, cs.A_q, IG)
    scale = max(1.0, float(np.abs(energy).max()))
    gap = float(np.abs(direct - energy).max())
    if gap > CROSS_CHECK_TOL * scale:
        raise CrossCheckFailure(f"direct and energy forms of A_eff differ by {gap:.3e}")
    cs.A_eff_direct = direct
    cs.A_eff = 0.5 * (energy + energy.T)

    if geometry is None and model is not None:
        geometry = cell_geometry(model, cs.x1, n_quad)
    if geometry is not None:
        s, ws = np.polynomial.legendre.leggauss(n_s)
        s, ws = 0.5 * (s + 1.0), 0.5 * ws
        h = geometry.thickness
        Y2 = geometry.g_minus[:, None] + s[None, :] * h[:, None]
        cval = coeffs.reaction(cs.x1, geometry.y1[:, None], Y2)
        cs.c_bar = float(np.einsum("i,j,i,ij->", geometry.weights, ws, h, cval))
        cs.box_measure = geometry.box_measure
    else:
        P = quad.points
        cs.c_bar = quad.integrate(coeffs.reaction(cs.x1, P[..., 0], P[..., 1]))
        cs.box_measure = quad.integrate(1.0)
    return cs


def effective_bounds(model: GeometryModel, coeffs: CoefficientSet, x1: float,
                     n_quad: int = 64, n_s: int = 16) -> tuple:
    """Bracket for a_eff: (core-width harmonic bound, int_Box a11).

    The lower bound integrates, over the y2-range common to every
    cross-section, the harmonic mean in y1 of the smallest eigenvalue of a.
    """
    geo = cell_geometry(model, x1, n_quad)
    s, ws = np.polynomial.legendre.leggauss(n_s)
    s, ws = 0.5 * (s + 1.0), 0.5 * ws
    h = geo.thickness
    Y2 = geo.g_minus[:, None] + s[None, :] * h[:, None]
    A = coeffs.matrix(x1, geo.y1[:, None], Y2)
    upper = float(np.einsum("i,j,i,ij->", geo.weights, ws, h, A[..., 0, 0]))

    lo, hi = float(geo.g_minus.max()), float(geo.g_plus.min())
    if hi <= lo:
        return 0.0, upper
    core = lo + s * (hi - lo)
    lam = fem.lambda_min(coeffs.matrix(x1, geo.y1[:, None], core[None, :]))
    harmonic = 1.0 / np.einsum("i,ij->j", geo.weights, 1.0 / lam)
    lower = float((hi - lo) * ws @ harmonic)
    return lower, upper


@dataclass
class EffectiveProfile:
    x1: np.ndarray
    a_eff: np.ndarray
    c_bar: np.ndarray
    box_measure: np.ndarray
    solutions: list = field(default_factory=list, repr=False)

    def max_jump_ratio(self) -> float:
        """Largest adjacent jump relative to the median slope of the profile."""
        if self.x1.size < 3:
            return 0.0
        slopes = np.abs(np.diff(self.a_eff)) / np.diff(self.x1)
        ref = np.median(slopes) + 1e-12 * (1.0 + np.abs(self.a_eff).max())
        return float(slopes.max() / ref)


class CellSolver:
    """Cached cell solves for one (geometry, coefficients, resolution) triple.

    Each x1 is solved at most once; concurrent callers share the result.
    """

    def __init__(self, model: GeometryModel, coeffs: CoefficientSet,
                 n1: int = DEFAULT_CELL_RESOLUTION[0], n2: int = DEFAULT_CELL_RESOLUTION[1],
                 tol: float = CELL_TOL, averages: str = "exact"):
        self.model = model
        self.averages = averages
        self.coeffs = coeffs
        self.n1, self.n2 = int(n1), int(n2)
        self.tol = tol
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _key(self, x1):
        return (round(float(x1), 13), self.n1, self.n2)

    def __len__(self):
        return len(self._cache)

    def solve(self, x1: float) -> CellSolution:
        key = self._key(x1)
        with self._lock:
            entry = self._cache.get(key)
            if entry is None:
                entry = self._cache[key] = _Pending()
        if entry.claim():
            try:
                entry.set(solve_cell_problem(self.model, self.coeffs, float(x1),
                                             self.n1, self.n2, self.tol,
                                             averages=self.averages))
            except BaseException as exc:
                entry.fail(exc)
                with self._lock:
                    self._cache.pop(key, None)
                raise
        return entry.get()

    def profile(self, x1_nodes, workers: int = 1) -> EffectiveProfile:
        x1_nodes = np.asarray(x1_nodes, dtype=float).ravel()
        if np.any(np.abs(x1_nodes) > self.model.L * (1 + 1e-12)):
            raise ValueError("profile nodes must lie in [-L, L]")
        if workers > 1 and x1_nodes.size > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                sols = list(pool.map(self.solve, x1_nodes))
        else:
            sols = [self.solve(x) for x in x1_nodes]
        return EffectiveProfile(
            x1_nodes,
            np.array([s.a_eff for s in sols]),
            np.array([s.c_bar for s in sols]),
            np.array([s.box_measure for s in sols]),
            sols,
        )


class _Pending:
    def __init__(self):
        self._event = threading.Event()
        self._claimed = False
        self._lock = threading.Lock()
        self._value = None
        self._error = None

    def claim(self):
        with self._lock:
            if self._claimed:
                return False
            self._claimed = True
            return True

    def set(self, value):
        self._value = value
        self._event.set()

    def fail(self, exc):
        self._error = exc
        self._event.set()

    def get(self):
        self._event.wait()
        if self._error is not None:
            raise self._error
        return self._value


def effective_profile(model: GeometryModel, coeffs: CoefficientSet, x1_nodes,
                      n1: int = DEFAULT_CELL_RESOLUTION[0],
                      n2: int = DEFAULT_CELL_RESOLUTION[1],
                      solver: CellSolver | None = None, workers: int = 1) -> EffectiveProfile:
    if solver is None:
        solver = CellSolver(model, coeffs, n1, n2)
    return solver.profile(x1_nodes, workers=workers)


def require_valid(model: GeometryModel, coeffs: CoefficientSet):
    problems = validate_coefficients(model, coeffs)
    if problems:
        raise ValidationFailure("; ".join(problems))


__all__ = [
    "CellSolution", "CellSolver", "CoefficientSet", "EffectiveProfile", "NonSPD",
    "effective_bounds", "effective_coefficients", "effective_profile",
    "require_valid", "solve_cell_problem", "validate_coefficients",
]
