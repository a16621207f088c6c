"""Quadrature against the thin-domain measures mu_eps and their limit mu_*.

``d mu_eps = eps^-1 chi_{Omega_eps} dx`` in two dimensions.  Through the
substitution ``x2 = eps (g_- + s h)`` the prefactor cancels against the
Jacobian ``eps h``, so every weight is ``w_x1 * w_s * h`` and the rule stays
O(1) as eps shrinks.  The x1 rule is Gauss-Legendre on each fast period,
with the two partial end periods handled by their own panels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .geometry import GeometryModel, box_measures, composite_gauss, sections

MEASURE_VARIABLES = ("x1", "x2")
DEFAULT_TEST_FUNCTIONS = (
    "1 - x1^2",
    "cos(pi*x1/2) * (1 + x2^2)",
    "exp(x1) * cos(x2)",
)


def _as_expr(e, variables):
    if e is None or isinstance(e, ex.Expr):
        return e
    return ex.parse(str(e), variables)


def period_breaks(L: float, eps: float) -> np.ndarray:
    """Panel ends: multiples of eps inside (-L, L) plus the two endpoints."""
    k0 = math.floor(-L / eps) + 1
    k1 = math.ceil(L / eps) - 1
    inner = eps * np.arange(k0, k1 + 1)
    # drop breaks that would leave a sliver below round-off
    inner = inner[(inner > -L + 1e-12 * L) & (inner < L - 1e-12 * L)]
    return np.concatenate([[-L], inner, [L]])


@dataclass
class MeasureQuadrature:
    """Mapped tensor rule for ``int phi d mu_eps`` on Omega_eps."""
    model: GeometryModel
    eps: float
    n_x1: int = 32
    n_s: int = 8
    x1: np.ndarray = field(init=False, repr=False)
    x2: np.ndarray = field(init=False, repr=False)
    s: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.n_x1 < 4:
            raise ValueError("need at least 4 x1 nodes per fast period")
        if self.n_s < 1:
            raise ValueError("need at least one node across the thickness")
        breaks = period_breaks(self.model.L, self.eps)
        t, wt = np.polynomial.legendre.leggauss(self.n_x1)
        a, b = breaks[:-1, None], breaks[1:, None]
        x1 = (0.5 * (a + b) + 0.5 * (b - a) * t).ravel()
        w1 = (0.5 * (b - a) * wt).ravel()
        s, ws = np.polynomial.legendre.leggauss(self.n_s)
        s, ws = 0.5 * (s + 1.0), 0.5 * ws
        sec = sections(self.model, x1, x1 / self.eps)
        self.x1 = np.repeat(x1[:, None], self.n_s, axis=1)
        self.s = np.broadcast_to(s, self.x1.shape).copy()
        self.x2 = self.eps * (sec.g_minus[:, None] + s[None, :] * sec.thickness[:, None])
        self.weights = w1[:, None] * ws[None, :] * sec.thickness[:, None]

    @property
    def size(self) -> int:
        return self.weights.size

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> float:
        values = np.broadcast_to(np.asarray(values, dtype=float), self.weights.shape)
        return float(np.sum(self.weights * values))


def integrate_mu_eps(phi, q: MeasureQuadrature) -> float:
    """``int phi d mu_eps`` with ``phi`` a function of (x1, x2)."""
    phi = _as_expr(phi, MEASURE_VARIABLES)
    return q.integrate(ex.evaluate(phi, {"x1": q.x1, "x2": q.x2}))


def integrate_mu_star(phi, model: GeometryModel, n_quad: int = 64) -> float:
    """``int_I |Box(x1)| phi(x1, 0) dx1`` by composite Gauss-Legendre."""
    phi = _as_expr(phi, MEASURE_VARIABLES)
    x1, w = composite_gauss(-model.L, model.L, n_quad)
    box = box_measures(model, x1, n_quad)
    vals = np.broadcast_to(ex.evaluate(phi, {"x1": x1, "x2": 0.0}), x1.shape)
    return float(np.sum(w * box * vals))


@dataclass
class MeasureStudy:
    eps: np.ndarray
    values: np.ndarray
    limit: float
    gaps: np.ndarray

    def decays(self, factor: float = 0.75, eps_max: float = 0.1) -> bool:
        """Each gap is at most ``factor`` times the previous once eps <= eps_max."""
        ok = True
        for k in range(1, self.gaps.size):
            if self.eps[k] <= eps_max * (1 + 1e-12):
                ok &= bool(self.gaps[k] <= factor * self.gaps[k - 1])
        return ok

    def halving_factors(self) -> np.ndarray:
        """Observed gap ratios per halving of eps."""
        steps = np.log2(self.eps[:-1] / self.eps[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.gaps[:-1] / self.gaps[1:]) ** (1.0 / steps)


def measure_convergence_study(phi, model: GeometryModel, eps_list, n_x1: int = 32,
                              n_s: int = 8, n_quad: int = 64) -> MeasureStudy:
    """Gaps ``|int phi d mu_eps - int phi d mu_*|`` along a decreasing eps list."""
    eps = np.asarray(eps_list, dtype=float)
    if eps.size > 1 and np.any(np.diff(eps) >= 0):
        raise ValueError("eps_list must be strictly decreasing")
    phi = _as_expr(phi, MEASURE_VARIABLES)
    limit = integrate_mu_star(phi, model, n_quad)
    vals = np.array([integrate_mu_eps(phi, MeasureQuadrature(model, e, n_x1, n_s)) for e in eps])
    return MeasureStudy(eps, vals, limit, np.abs(vals - limit))


def _field_values(g, q: MeasureQuadrature):
    if np.isscalar(g):
        return float(g)
    if hasattr(g, "interpolate"):
        return g.interpolate(q.x1, q.x2)
    if isinstance(g, (ex.Expr, str)):
        return ex.evaluate(_as_expr(g, MEASURE_VARIABLES), {"x1": q.x1, "x2": q.x2})
    return np.asarray(g(q.x1, q.x2), dtype=float)


def two_scale_pairing(g, phi, psi, q: MeasureQuadrature) -> float:
    """``int g(x) phi(x) psi(x/eps) d mu_eps``.

    ``g`` may be a number, an expression or callable in (x1, x2), or an
    eps-solution (anything with ``interpolate``).  ``psi`` is an expression
    in (x1, y1, y2); None means psi = 1.
    """
    phi = _as_expr(phi, MEASURE_VARIABLES)
    psi = _as_expr(psi, ex.DEFAULT_VARIABLES)
    vals = _field_values(g, q) * ex.evaluate(phi, {"x1": q.x1, "x2": q.x2})
    if psi is not None:
        vals = vals * ex.evaluate(psi, {"x1": q.x1, "y1": q.x1 / q.eps, "y2": q.x2 / q.eps})
    return q.integrate(vals)


def box_integral(psi, model: GeometryModel, x1, n_quad: int = 64, n_s: int = 8) -> np.ndarray:
    """``int_{Box(x1)} psi(x1, y) dy`` for an array of slow positions."""
    psi = _as_expr(psi, ex.DEFAULT_VARIABLES)
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    y1, w = composite_gauss(0.0, 1.0, n_quad)
    s, ws = np.polynomial.legendre.leggauss(n_s)
    s, ws = 0.5 * (s + 1.0), 0.5 * ws
    sec = sections(model, x1[:, None], y1[None, :])
    h = sec.thickness
    if psi is None:
        return h @ w
    Y2 = sec.g_minus[..., None] + s * h[..., None]
    vals = ex.evaluate(psi, {"x1": x1[:, None, None], "y1": y1[None, :, None], "y2": Y2})
    vals = np.broadcast_to(vals, Y2.shape)
    return np.einsum("j,k,ij,ijk->i", w, ws, h, vals)


def mean_value_limit(phi, psi, model: GeometryModel, n_quad: int = 64) -> float:
    """``int_I phi(x1, 0) (int_Box psi dy) dx1``."""
    phi = _as_expr(phi, MEASURE_VARIABLES)
    x1, w = composite_gauss(-model.L, model.L, n_quad)
    inner = box_integral(psi, model, x1, n_quad)
    vals = np.broadcast_to(ex.evaluate(phi, {"x1": x1, "x2": 0.0}), x1.shape)
    return float(np.sum(w * vals * inner))


def mean_value_gap(phi, psi, model: GeometryModel, eps: float, n_x1: int = 32,
                   n_s: int = 8, n_quad: int = 64) -> float:
    """Distance between the oscillating pairing and its mean-value limit."""
    q = MeasureQuadrature(model, eps, n_x1, n_s)
    return abs(two_scale_pairing(1.0, phi, psi, q) - mean_value_limit(phi, psi, model, n_quad))
