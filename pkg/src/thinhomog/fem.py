"""Bilinear (Q1) finite elements on a mapped structured rectangle.

The reference rectangle ``[a1, b1] x [0, 1]`` carries an ``n1 x n2`` grid.
Geometry is isoparametric: a :class:`~thinhomog.geometry.ReferenceMap` (or
an explicit array) places the grid nodes, and each element is the bilinear
image of its four corners.  Affine functions of the physical coordinates
are therefore exactly representable, which the patch test relies on.

Grid node ``(i, j)`` (``i`` along direction 1) has index ``i * (n2 + 1) + j``.
Periodicity in direction 1 is expressed as master/slave pairs
``(0, j) <- (n1, j)`` and folded in by :func:`constrain`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConflictingConstraints, DegenerateMap, NonSPD, NoConvergence, SolverError


@dataclass(frozen=True)
class Mesh:
    n1: int
    n2: int
    a1: float = 0.0
    b1: float = 1.0
    periodic_in_dir1: bool = False

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError("n1 and n2 must be at least 2")
        if not self.b1 > self.a1:
            raise ValueError("empty extent in direction 1")

    @property
    def t(self) -> np.ndarray:
        return np.linspace(self.a1, self.b1, self.n1 + 1)

    @property
    def s(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n2 + 1)

    @property
    def n_grid(self) -> int:
        return (self.n1 + 1) * (self.n2 + 1)

    @property
    def n_nodes(self) -> int:
        """Independent nodes once periodic ends are merged."""
        return (self.n1 + 1 - int(self.periodic_in_dir1)) * (self.n2 + 1)

    def index(self, i, j):
        return np.asarray(i) * (self.n2 + 1) + np.asarray(j)

    @property
    def reference_nodes(self) -> np.ndarray:
        T, S = np.meshgrid(self.t, self.s, indexing="ij")
        return np.stack([T.ravel(), S.ravel()], axis=1)

    @property
    def elements(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.n1), np.arange(self.n2), indexing="ij")
        i, j = i.ravel(), j.ravel()
        return np.stack([self.index(i, j), self.index(i + 1, j),
                         self.index(i + 1, j + 1), self.index(i, j + 1)], axis=1)

    def periodic_pairs(self) -> list:
        if not self.periodic_in_dir1:
            return []
        j = np.arange(self.n2 + 1)
        return list(zip(self.index(0, j).tolist(), self.index(self.n1, j).tolist()))

    def end_nodes(self, side: str) -> np.ndarray:
        i = 0 if side == "left" else self.n1
        return self.index(i, np.arange(self.n2 + 1))

    def physical_nodes(self, geometry) -> np.ndarray:
        """Node coordinates from a ReferenceMap, a callable, or an array."""
        if geometry is None:
            return self.reference_nodes
        if isinstance(geometry, np.ndarray):
            if geometry.shape != (self.n_grid, 2):
                raise ValueError("node array has the wrong shape")
            return geometry
        forward = getattr(geometry, "forward", geometry)
        T, S = np.meshgrid(self.t, self.s, indexing="ij")
        X1, X2 = forward(T, S)
        return np.stack([np.asarray(X1).ravel(), np.asarray(X2).ravel()], axis=1)


def build_mesh(extents, n1: int, n2: int, periodic_in_dir1: bool = False) -> Mesh:
    a1, b1 = extents
    return Mesh(int(n1), int(n2), float(a1), float(b1), bool(periodic_in_dir1))


# -- element quadrature -------------------------------------------------------

_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _reference_rule(order):
    xg, wg = np.polynomial.legendre.leggauss(order)
    xg = 0.5 * (xg + 1.0)
    wg = 0.5 * wg
    XI, ETA = np.meshgrid(xg, xg, indexing="ij")
    W = np.outer(wg, wg)
    return np.stack([XI.ravel(), ETA.ravel()], axis=1), W.ravel()


def _shape(ref):
    xi, eta = ref[:, 0], ref[:, 1]
    N = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1)
    dN = np.empty((ref.shape[0], 4, 2))
    dN[:, :, 0] = np.stack([-(1 - eta), (1 - eta), eta, -eta], axis=1)
    dN[:, :, 1] = np.stack([-(1 - xi), -xi, xi, (1 - xi)], axis=1)
    return N, dN


class ElementQuadrature:
    """Gauss data for every element of a mapped mesh.

    Attributes are arrays over (element, quadrature point): ``points``
    (physical coordinates), ``wdet`` (weight times det J), ``grads``
    (physical gradients of the four element shape functions).
    """

    def __init__(self, mesh: Mesh, geometry=None, order: int = 2):
        self.mesh = mesh
        self.order = order
        self.nodes = mesh.physical_nodes(geometry)
        self.conn = mesh.elements
        ref, w = _reference_rule(order)
        self.ref = ref
        self.N, dN = _shape(ref)
        X = self.nodes[self.conn]                                  # (ne, 4, 2)
        J = np.einsum("eai,qaj->eqij", X, dN)                      # dx_i/dxi_j
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(det <= 0):
            raise DegenerateMap("element with non-positive Jacobian determinant")
        inv = np.empty_like(J)
        inv[..., 0, 0] = J[..., 1, 1] / det
        inv[..., 1, 1] = J[..., 0, 0] / det
        inv[..., 0, 1] = -J[..., 0, 1] / det
        inv[..., 1, 0] = -J[..., 1, 0] / det
        self.det = det
        self.wdet = det * w[None, :]
        # grad_x N_a = J^{-T} grad_xi N_a
        self.grads = np.einsum("eqji,qaj->eqai", inv, dN)
        self.points = np.einsum("qa,eai->eqi", self.N, X)

    @property
    def n_elements(self):
        return self.conn.shape[0]

    def _scatter_matrix(self, Ke):
        rows = np.repeat(self.conn, 4, axis=1).ravel()
        cols = np.tile(self.conn, (1, 4)).ravel()
        n = self.mesh.n_grid
        return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))

    def stiffness(self, A, c=None) -> sp.csr_matrix:
        """``int grad v . A grad u + c u v`` with A of shape (ne, nq, 2, 2)."""
        AG = np.einsum("eqij,eqbj->eqbi", A, self.grads)
        Ke = np.einsum("eq,eqai,eqbi->eab", self.wdet, self.grads, AG)
        if c is not None:
            c = np.broadcast_to(c, self.wdet.shape)
            Ke = Ke + np.einsum("eq,qa,qb->eab", self.wdet * c, self.N, self.N)
        return self._scatter_matrix(Ke)

    def mass(self, c=1.0) -> sp.csr_matrix:
        c = np.broadcast_to(c, self.wdet.shape)
        return self._scatter_matrix(np.einsum("eq,qa,qb->eab", self.wdet * c, self.N, self.N))

    def load(self, f=None, g=None) -> np.ndarray:
        """``int f v + g . grad v`` for scalar f (ne, nq) and vector g (ne, nq, 2)."""
        be = np.zeros((self.n_elements, 4))
        if f is not None:
            f = np.broadcast_to(f, self.wdet.shape)
            be += np.einsum("eq,qa->ea", self.wdet * f, self.N)
        if g is not None:
            be += np.einsum("eq,eqi,eqai->ea", self.wdet, g, self.grads)
        return np.bincount(self.conn.ravel(), be.ravel(), minlength=self.mesh.n_grid)

    def lumped_mass(self) -> np.ndarray:
        return self.load(f=1.0)

    def values(self, u) -> np.ndarray:
        return np.einsum("qa,ea->eq", self.N, np.asarray(u)[self.conn])

    def gradients(self, u) -> np.ndarray:
        return np.einsum("eqai,ea->eqi", self.grads, np.asarray(u)[self.conn])

    def integrate(self, values) -> float:
        return float(np.sum(self.wdet * values))


def lambda_min(A) -> np.ndarray:
    """Smallest eigenvalue of a batch of symmetric 2x2 matrices."""
    a, b, d = A[..., 0, 0], 0.5 * (A[..., 0, 1] + A[..., 1, 0]), A[..., 1, 1]
    return 0.5 * (a + d) - np.sqrt((0.5 * (a - d)) ** 2 + b ** 2)


def check_spd(A, floor: float = 0.0):
    if not np.allclose(A[..., 0, 1], A[..., 1, 0], rtol=1e-12, atol=1e-14):
        raise NonSPD("coefficient matrix is not symmetric")
    lam = lambda_min(A)
    if np.any(lam <= floor):
        raise NonSPD(f"coefficient matrix has eigenvalue {float(lam.min()):.3e} <= {floor}")


def assemble(mesh: Mesh, coefficients, source=None, geometry=None, order: int = 2):
    """Assemble ``int A grad u . grad v + c u v`` and ``int f v``.

    ``coefficients(X1, X2)`` returns ``(A, c)`` at physical quadrature points
    with ``A`` of shape ``X1.shape + (2, 2)``; ``source(X1, X2)`` returns f.
    """
    q = ElementQuadrature(mesh, geometry, order)
    X1, X2 = q.points[..., 0], q.points[..., 1]
    A, c = coefficients(X1, X2)
    A = np.broadcast_to(np.asarray(A, dtype=float), X1.shape + (2, 2))
    check_spd(A)
    c = np.broadcast_to(np.asarray(c, dtype=float), X1.shape)
    K = q.stiffness(A, c)
    f = np.zeros(X1.shape) if source is None else np.broadcast_to(source(X1, X2), X1.shape)
    return K, q.load(f=f)


# -- constraints --------------------------------------------------------------

@dataclass
class ConstraintSet:
    periodic_pairs: list = field(default_factory=list)     # (master, slave)
    dirichlet: dict = field(default_factory=dict)           # node -> value
    zero_mean: bool = False
    mean_weights: np.ndarray | None = None


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


@dataclass
class ReducedSystem:
    A: sp.csr_matrix
    b: np.ndarray
    P: sp.csr_matrix
    lift: np.ndarray
    weights: np.ndarray | None = None
    multiplier: float = 0.0

    @property
    def n(self):
        return self.A.shape[0]

    def expand(self, x) -> np.ndarray:
        return self.P @ x + self.lift

    def bordered(self) -> sp.csr_matrix:
        """The symmetric saddle-point form ``[[A, w], [w^T, 0]]``."""
        if self.weights is None:
            return self.A
        w = sp.csr_matrix(self.weights.reshape(-1, 1))
        return sp.bmat([[self.A, w], [w.T, None]], format="csr")

    def solve(self, tol: float = 1e-10, max_iter: int | None = None):
        """Solve and return ``(full nodal vector, CGResult)``.

        With a zero-mean constraint the multiplier is eliminated first:
        CG runs on the singular but consistent system with right side
        ``b - lam * w``, then the weighted mean is removed.
        """
        b = self.b
        if self.weights is not None:
            w = self.weights
            self.multiplier = float(b.sum() / w.sum())
            b = b - self.multiplier * w
        res = solve_cg(self.A, b, tol=tol, max_iter=max_iter)
        x = res.x
        if self.weights is not None:
            x = x - (w @ x) / w.sum()
            res = CGResult(x, res.iterations, res.residual)
        return self.expand(x), res


def constrain(K: sp.spmatrix, b: np.ndarray, cs: ConstraintSet) -> ReducedSystem:
    n = K.shape[0]
    slaves = {}
    masters = set()
    for master, slave in cs.periodic_pairs:
        if slave in slaves or slave in masters or master in slaves:
            raise ConflictingConstraints(f"node {slave} appears in several periodic pairs")
        slaves[slave] = master
        masters.add(master)
    for node in cs.dirichlet:
        if node in slaves or node in masters:
            raise ConflictingConstraints(f"node {node} is both Dirichlet and periodic")
    if cs.zero_mean and cs.dirichlet:
        raise ConflictingConstraints("zero-mean constraint combined with Dirichlet data")

    keep = np.array([i for i in range(n) if i not in slaves and i not in cs.dirichlet], dtype=int)
    col_of = -np.ones(n, dtype=int)
    col_of[keep] = np.arange(keep.size)
    rows, cols = list(keep), list(col_of[keep])
    for slave, master in slaves.items():
        rows.append(slave)
        cols.append(col_of[master])
    P = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, keep.size))

    lift = np.zeros(n)
    for node, value in cs.dirichlet.items():
        lift[node] = value
    K = sp.csr_matrix(K)
    A = (P.T @ K @ P).tocsr()
    rhs = P.T @ (b - K @ lift)
    weights = None
    if cs.zero_mean:
        if cs.mean_weights is None:
            raise ValueError("zero-mean constraint needs mean weights")
        weights = P.T @ np.asarray(cs.mean_weights, dtype=float)
    return ReducedSystem(A, rhs, P, lift, weights)


# -- solver -------------------------------------------------------------------

MAX_STALLS = 5


def solve_cg(A, b, tol: float = 1e-10, max_iter: int | None = None, x0=None) -> CGResult:
    """Jacobi-preconditioned conjugate gradients; stops at ||r|| <= tol ||b||."""
    b = np.asarray(b, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = 20 * max(n, 1)
    diag = A.diagonal() if sp.issparse(A) else np.diag(A)
    if np.any(diag <= 0):
        raise SolverError("Jacobi preconditioner needs a positive diagonal")
    inv_d = 1.0 / diag
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return CGResult(np.zeros(n), 0, 0.0)
    r = b - A @ x
    rnorm = np.linalg.norm(r)
    if rnorm <= tol * bnorm:
        return CGResult(x, 0, rnorm / bnorm)
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    best_true, stalls = np.inf, 0
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0:
            raise NoConvergence(k, rnorm / bnorm,
                                f"CG breakdown at iteration {k}: p.Ap = {pAp:.3e} "
                                "(matrix not positive definite)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol * bnorm:
            # guard against drift of the recursive residual
            true_r = np.linalg.norm(b - A @ x)
            if true_r <= tol * bnorm:
                return CGResult(x, k, true_r / bnorm)
            # repeated restarts without progress: the tolerance is below
            # what round-off allows for this matrix
            stalls = stalls + 1 if true_r > 0.5 * best_true else 0
            best_true = min(best_true, true_r)
            if stalls >= MAX_STALLS:
                raise NoConvergence(k, true_r / bnorm,
                                    f"CG stagnated at relative residual {true_r / bnorm:.3e}")
            r = b - A @ x
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(max_iter, rnorm / bnorm)


def symmetry_defect(A, n_probes: int = 4, seed: int = 0) -> float:
    """max |x.Ay - y.Ax| / (||A|| ||x|| ||y||) over random probes."""
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    norm = abs(A).sum(axis=1).max() if sp.issparse(A) else np.abs(A).sum(axis=1).max()
    worst = 0.0
    for _ in range(n_probes):
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        d = abs(x @ (A @ y) - y @ (A @ x)) / (float(norm) * np.linalg.norm(x) * np.linalg.norm(y))
        worst = max(worst, float(d))
    return worst


def norms(u, quad: ElementQuadrature, weight: float = 1.0) -> dict:
    """Weighted L2 norm and H1 seminorm; ``weight`` is 1/eps on thin domains."""
    vals = quad.values(u)
    grads = quad.gradients(u)
    l2 = np.sqrt(weight * quad.integrate(vals ** 2))
    h1 = np.sqrt(weight * quad.integrate(np.sum(grads ** 2, axis=-1)))
    return {"l2_weighted": float(l2), "h1_semi": float(h1)}
