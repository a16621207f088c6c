"""Cross-sections, periodicity cells and reference maps of the thin cylinder.

The cylinder is described by a boundary function ``F(x1, y1, y2)``; the
cross-section at slow position ``x1`` and fast position ``y1`` is the
interval ``Q(x1, y1) = {y2 : F > 0}``.  All root finding is vectorised
over arrays of ``(x1, y1)`` pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import expr as ex
from .errors import (
    DegenerateMap,
    DegenerateSection,
    EmptySection,
    GeometryError,
    MultiComponent,
    UnboundedSection,
)

N_BRACKET_SAMPLES = 64
BISECTION_TOL = 1e-12
NEWTON_STEPS = 2
THICKNESS_FLOOR = 1e-6
VALIDATION_FLOOR = 1e-8


@dataclass(frozen=True)
class GeometryModel:
    F: ex.Expr
    L: float
    search_radius: float = 4.0
    root_tol: float = 1e-10
    declares_unit_center: bool = False
    thickness_floor: float = THICKNESS_FLOOR

    def __post_init__(self):
        if self.L <= 0 or self.search_radius <= 0 or self.root_tol <= 0:
            raise ValueError("L, search_radius and root_tol must be positive")
        unknown = ex.free_variables(self.F) - set(ex.DEFAULT_VARIABLES)
        if unknown:
            raise ValueError(f"F depends on undeclared variables {sorted(unknown)}")

    @classmethod
    def from_text(cls, text: str, L: float, **kwargs) -> "GeometryModel":
        return cls(ex.parse(text), float(L), **kwargs)

    @cached_property
    def dF(self) -> dict:
        return {v: ex.differentiate(self.F, v) for v in ex.DEFAULT_VARIABLES}

    def F_at(self, x1, y1, y2):
        return ex.evaluate(self.F, {"x1": x1, "y1": y1, "y2": y2})

    def dF_at(self, var, x1, y1, y2):
        return ex.evaluate(self.dF[var], {"x1": x1, "y1": y1, "y2": y2})


@dataclass(frozen=True)
class CrossSection:
    g_minus: float
    g_plus: float

    @property
    def thickness(self) -> float:
        return self.g_plus - self.g_minus


@dataclass(frozen=True)
class SectionArrays:
    """Vectorised cross-section data at a batch of (x1, y1) points."""

    x1: np.ndarray
    y1: np.ndarray
    g_minus: np.ndarray
    g_plus: np.ndarray

    @property
    def thickness(self) -> np.ndarray:
        return self.g_plus - self.g_minus


def _full(a, shape):
    return np.broadcast_to(np.asarray(a, dtype=float), shape)


def sections(m: GeometryModel, x1, y1) -> SectionArrays:
    """Locate ``g_-(x1, y1) < g_+(x1, y1)`` for broadcast arrays of points.

    Sign changes are bracketed on a fixed sample grid, refined by bisection
    and polished by Newton steps on the symbolic derivative.
    """
    x1 = np.asarray(x1, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    shape = np.broadcast_shapes(x1.shape, y1.shape)
    X1 = _full(x1, shape).ravel()
    Y1 = _full(y1, shape).ravel()
    R = m.search_radius

    grid = np.linspace(-R, R, N_BRACKET_SAMPLES)
    vals = _full(m.F_at(X1[:, None], Y1[:, None], grid[None, :]),
                 (X1.size, grid.size))
    pos = vals > 0
    rises = (~pos[:, :-1]) & pos[:, 1:]
    falls = pos[:, :-1] & (~pos[:, 1:])
    n_rise = rises.sum(axis=1)
    n_fall = falls.sum(axis=1)

    def where(mask):
        k = int(np.flatnonzero(mask)[0])
        return f"x1={X1[k]:.6g}, y1={Y1[k]:.6g}"

    edge = pos[:, 0] | pos[:, -1]
    if edge.any():
        raise UnboundedSection(f"F > 0 at the search-radius edge (R={R}) at {where(edge)}")
    empty = n_rise == 0
    if empty.any():
        raise EmptySection(f"F <= 0 on the whole bracket at {where(empty)}")
    multi = (n_rise > 1) | (n_fall > 1)
    if multi.any():
        raise MultiComponent(f"cross-section has several components at {where(multi)}")

    k_lo = np.argmax(rises, axis=1)
    k_hi = np.argmax(falls, axis=1)
    g_minus = _refine_root(m, X1, Y1, grid[k_lo], grid[k_lo + 1], rising=True)
    g_plus = _refine_root(m, X1, Y1, grid[k_hi], grid[k_hi + 1], rising=False)

    h = g_plus - g_minus
    thin = h < m.thickness_floor
    if thin.any():
        raise DegenerateSection(f"thickness below {m.thickness_floor} at {where(thin)}")
    return SectionArrays(X1.reshape(shape), Y1.reshape(shape),
                         g_minus.reshape(shape), g_plus.reshape(shape))


def _refine_root(m, X1, Y1, lo, hi, rising):
    lo = lo.copy()
    hi = hi.copy()
    # F(lo) <= 0 < F(hi) for a rising edge, the opposite for a falling one
    n_iter = max(1, math.ceil(math.log2((hi[0] - lo[0]) / BISECTION_TOL)))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        fm = _full(m.F_at(X1, Y1, mid), mid.shape)
        go_right = (fm <= 0) if rising else (fm > 0)
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    y = 0.5 * (lo + hi)
    f = _full(m.F_at(X1, Y1, y), y.shape)
    for _ in range(NEWTON_STEPS):
        d = _full(m.dF_at("y2", X1, Y1, y), y.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(d != 0, f / np.where(d != 0, d, 1.0), 0.0)
        y_new = y - step
        inside = (y_new >= lo - BISECTION_TOL) & (y_new <= hi + BISECTION_TOL)
        f_new = _full(m.F_at(X1, Y1, y_new), y.shape)
        better = inside & (np.abs(f_new) < np.abs(f))
        y = np.where(better, y_new, y)
        f = np.where(better, f_new, f)
    bad = np.abs(f) > m.root_tol
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise GeometryError(
            f"root not resolved to |F| <= {m.root_tol} at x1={X1[k]:.6g}, "
            f"y1={Y1[k]:.6g} (|F| = {abs(f[k]):.3e})")
    return y


def cross_section(m: GeometryModel, x1: float, y1: float) -> CrossSection:
    s = sections(m, float(x1), float(y1))
    return CrossSection(float(s.g_minus), float(s.g_plus))


def section_slopes(m: GeometryModel, s: SectionArrays) -> dict:
    """Implicit derivatives of g_- and g_+ with respect to x1 and y1."""
    out = {}
    for name, g in (("minus", s.g_minus), ("plus", s.g_plus)):
        Fy2 = m.dF_at("y2", s.x1, s.y1, g)
        out[f"dx1_{name}"] = _full(-m.dF_at("x1", s.x1, s.y1, g) / Fy2, g.shape)
        out[f"dy1_{name}"] = _full(-m.dF_at("y1", s.x1, s.y1, g) / Fy2, g.shape)
    return out


# -- cell tabulation ----------------------------------------------------------


def composite_gauss(a: float, b: float, n_panels: int, order: int = 4):
    """Composite Gauss-Legendre nodes and weights on [a, b]."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    weights = (half[:, None] * wg[None, :]).ravel()
    return nodes, weights


@dataclass(frozen=True)
class CellGeometry:
    model: GeometryModel
    x1: float
    y1: np.ndarray
    weights: np.ndarray
    g_minus: np.ndarray
    g_plus: np.ndarray
    box_measure: float
    h_periodic_gap: float = field(default=0.0)

    @property
    def thickness(self) -> np.ndarray:
        return self.g_plus - self.g_minus


def cell_geometry(m: GeometryModel, x1: float, n_quad: int = 64) -> CellGeometry:
    """Tabulate the cell ``Box(x1)`` on ``n_quad`` four-point Gauss panels."""
    if n_quad < 4:
        raise ValueError("n_quad must be at least 4")
    y1, w = composite_gauss(0.0, 1.0, n_quad)
    s = sections(m, float(x1), y1)
    ends = sections(m, float(x1), np.array([0.0, 1.0]))
    gap = float(abs(ends.thickness[0] - ends.thickness[1]))
    return CellGeometry(m, float(x1), y1, w, s.g_minus, s.g_plus,
                        float(np.dot(w, s.thickness)), gap)


def box_measures(m: GeometryModel, x1, n_quad: int = 64) -> np.ndarray:
    """|Box(x1)| for an array of slow positions."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    y1, w = composite_gauss(0.0, 1.0, n_quad)
    s = sections(m, x1[:, None], y1[None, :])
    return s.thickness @ w


# -- validation ---------------------------------------------------------------

@dataclass
class ConditionResult:
    name: str
    passed: bool
    detail: str = ""
    skipped: bool = False


@dataclass
class ValidationReport:
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name) -> ConditionResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {r.name: {"passed": r.passed, "skipped": r.skipped, "detail": r.detail}
                for r in self.results}


def validate(m: GeometryModel, n_samples: int = 16, seed: int = 0) -> ValidationReport:
    """Check the structural conditions on F; failures are reported, not raised."""
    results = []

    periodic = ex.check_periodicity(m.F, "y1", max(n_samples, 8), seed=seed,
                                    sample_range=(-m.L, m.L))
    results.append(ConditionResult("F1", periodic,
                                   "" if periodic else "F is not 1-periodic in y1"))

    x1 = np.linspace(-m.L, m.L, n_samples)
    y1 = np.linspace(0.0, 1.0, n_samples, endpoint=False)
    X1, Y1 = np.meshgrid(x1, y1, indexing="ij")
    try:
        sections(m, X1, Y1)
        results_f4 = ConditionResult("F4", True)
    except (MultiComponent, EmptySection, UnboundedSection, DegenerateSection,
            GeometryError) as exc:
        results_f4 = ConditionResult("F4", False, str(exc))

    worst = _boundary_nondegeneracy(m, X1.ravel(), Y1.ravel())
    if worst is None:
        results.append(ConditionResult("F2", False, "zero set of F not found", skipped=True))
    else:
        results.append(ConditionResult(
            "F2", worst >= VALIDATION_FLOOR,
            f"min |F| + |grad_y F| on the zero set = {worst:.3e}"))

    if m.declares_unit_center:
        centre = _full(m.F_at(X1, Y1, 0.0), X1.shape)
        err = float(np.max(np.abs(centre - 1.0)))
        results.append(ConditionResult("F3", err <= 1e-10, f"max |F(x1, y1, 0) - 1| = {err:.3e}"))
    else:
        results.append(ConditionResult("F3", True, "not declared by the model", skipped=True))

    results.append(results_f4)
    return ValidationReport(results)


def _boundary_nondegeneracy(m, X1, Y1, n_grid=512, n_golden=64):
    """Smallest |F| + |grad_y F| over the numerically located zero set of F.

    Zeros are found as local minima of |F| along y2 (so touching zeros are
    caught as well as sign changes), refined by vectorised golden section.
    """
    R = m.search_radius
    grid = np.linspace(-R, R, n_grid)
    absF = np.abs(_full(m.F_at(X1[:, None], Y1[:, None], grid[None, :]),
                        (X1.size, n_grid)))
    interior = (absF[:, 1:-1] <= absF[:, :-2]) & (absF[:, 1:-1] <= absF[:, 2:])
    rows, cols = np.nonzero(interior)
    if rows.size == 0:
        return None
    x1, y1 = X1[rows], Y1[rows]
    a, b = grid[cols], grid[cols + 2]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(n_golden):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = np.abs(_full(m.F_at(x1, y1, c), c.shape))
        fd = np.abs(_full(m.F_at(x1, y1, d), d.shape))
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    y2 = 0.5 * (a + b)
    Fv = np.abs(_full(m.F_at(x1, y1, y2), y2.shape))
    on_zero_set = Fv <= 1e-6
    if not on_zero_set.any():
        return None
    x1, y1, y2, Fv = x1[on_zero_set], y1[on_zero_set], y2[on_zero_set], Fv[on_zero_set]
    grad = np.hypot(_full(m.dF_at("y1", x1, y1, y2), y2.shape),
                    _full(_safe_dF(m, "y2", x1, y1, y2), y2.shape))
    return float(np.min(Fv + grad))


def _safe_dF(m, var, x1, y1, y2):
    try:
        return m.dF_at(var, x1, y1, y2)
    except ex.DomainError:
        # sign(0) from abs: the one-sided slopes are nonzero, report 1
        return np.ones_like(np.asarray(y2, dtype=float))


# -- reference maps -----------------------------------------------------------

@dataclass(frozen=True)
class ReferenceMap:
    """Map from a reference rectangle in (t, s) to physical coordinates.

    ``forward`` returns (X1, X2); ``jacobian`` returns an array ``(..., 2, 2)``
    with rows d(X1, X2) and columns d(t, s).
    """

    kind: str
    forward: Callable
    jacobian: Callable
    t_range: tuple

    def det(self, t, s):
        J = self.jacobian(t, s)
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]

    def inv_jacobian_t(self, t, s):
        J = self.jacobian(t, s)
        return np.swapaxes(np.linalg.inv(J), -1, -2)

    def check(self, n: int = 33):
        t = np.linspace(*self.t_range, n)
        s = np.linspace(0.0, 1.0, 9)
        T, S = np.meshgrid(t, s, indexing="ij")
        d = self.det(T, S)
        if np.any(d <= 0):
            raise DegenerateMap("non-positive Jacobian determinant")
        return self


def reference_map_cell(g: CellGeometry) -> ReferenceMap:
    m, x1 = g.model, g.x1

    def forward(t, s):
        sec = sections(m, x1, t)
        return np.broadcast_to(sec.y1, np.broadcast_shapes(sec.y1.shape, np.shape(s))), \
            sec.g_minus + np.asarray(s) * sec.thickness

    def jacobian(t, s):
        sec = sections(m, x1, t)
        sl = section_slopes(m, sec)
        s = np.asarray(s, dtype=float)
        shape = np.broadcast_shapes(sec.y1.shape, s.shape)
        J = np.zeros(shape + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 0] = sl["dy1_minus"] + s * (sl["dy1_plus"] - sl["dy1_minus"])
        J[..., 1, 1] = sec.thickness
        return J

    return ReferenceMap("cell", forward, jacobian, (0.0, 1.0)).check()


def reference_map_thin(m: GeometryModel, eps: float) -> ReferenceMap:
    if eps <= 0:
        raise ValueError("eps must be positive")

    def forward(x1, s):
        x1 = np.asarray(x1, dtype=float)
        sec = sections(m, x1, x1 / eps)
        s = np.asarray(s, dtype=float)
        X1 = np.broadcast_to(x1, np.broadcast_shapes(x1.shape, s.shape))
        return X1, eps * (sec.g_minus + s * sec.thickness)

    def jacobian(x1, s):
        x1 = np.asarray(x1, dtype=float)
        sec = sections(m, x1, x1 / eps)
        sl = section_slopes(m, sec)
        s = np.asarray(s, dtype=float)
        # d/dx1 of g(x1, x1/eps) is dx1 g + dy1 g / eps; times eps below
        dm = eps * sl["dx1_minus"] + sl["dy1_minus"]
        dp = eps * sl["dx1_plus"] + sl["dy1_plus"]
        shape = np.broadcast_shapes(x1.shape, s.shape)
        J = np.zeros(shape + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 0] = dm + s * (dp - dm)
        J[..., 1, 1] = eps * sec.thickness
        return J

    return ReferenceMap("thin", forward, jacobian, (-m.L, m.L)).check()
