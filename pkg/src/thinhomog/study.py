"""End-to-end convergence studies: config ingestion, orchestration, reports.

Config files are INI text read with :mod:`configparser`.  Expression values
may be wrapped in double quotes; list values are comma separated.  Keys::

    [geometry]      F, L, R (search radius), unit_center
    [coefficients]  a11, a12, a22, c, f, lambda0
    [study]         eps, seed, workers
    [mesh]          cell_n1, cell_n2, per_period, n_s, elements,
                    matched_cells, profile_interp
    [tests]         measure_phi, flux_phi, flux_psi, noise_floor
    [output]        directory, formats, timing

Only ``[geometry] F`` and ``L`` are required.  ``THINHOMOG_WORKERS`` in the
environment overrides ``[study] workers``.
"""
from __future__ import annotations

import configparser
import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import epssolve, measure
from .cell import CellSolver, CoefficientSet, validate_coefficients
from .errors import ConfigError, ThinHomogError, ValidationFailure
from .geometry import GeometryModel, validate
from .limit1d import solve_effective

CSV_COLUMNS = ("eps", "measure_gap", "l2_error", "flux_residual", "avg_gap", "apriori_norm")
METRICS = CSV_COLUMNS[1:]
DECAY_LAST_RATIO = 0.6
DECAY_STEP_TOL = 1.05
MEASURE_HALVING_FACTOR = 1.8
MEASURE_FLOOR = 1e-10
L2_TOTAL_FACTOR = 4.0
FLUX_TOTAL_FACTOR = 3.0
APRIORI_SPREAD = 0.2
WORKERS_ENV = "THINHOMOG_WORKERS"


# -- configuration -------------------------------------------------------------

def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1].strip()
    return value


def _split(value: str) -> list:
    parts = [p for chunk in value.splitlines() for p in chunk.split(",")]
    return [_unquote(p) for p in parts if p.strip()]


@dataclass
class StudyConfig:
    F: str
    L: float
    R: float = 4.0
    unit_center: bool = False
    a11: str = "1"
    a12: str = "0"
    a22: str = "1"
    c: str = "0"
    f: str = "1"
    lambda0: float = 1e-3
    eps: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    seed: int = 0
    workers: int = 1
    cell_n1: int = 64
    cell_n2: int = 32
    per_period: int = 32
    n_s: int = 16
    elements: int = 64
    matched_cells: bool = True
    profile_interp: bool = False
    measure_phi: list = field(default_factory=lambda: list(measure.DEFAULT_TEST_FUNCTIONS))
    flux_phi: str = "1 - x1^2"
    flux_psi: list = field(default_factory=lambda: ["1", "cos(2*pi*y1)"])
    noise_floor: float = 1e-3
    output_dir: str = "study_output"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    timing: bool = True

    @classmethod
    def from_string(cls, text: str) -> "StudyConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        return cls._from_parser(parser)

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_string(text)

    @classmethod
    def _from_parser(cls, p: configparser.ConfigParser) -> "StudyConfig":
        if not p.has_option("geometry", "F") or not p.has_option("geometry", "L"):
            raise ConfigError("[geometry] needs both F and L")
        kw = {}

        def take(section, key, conv, name=None):
            if p.has_option(section, key):
                raw = p.get(section, key)
                try:
                    kw[name or key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc

        def boolean(raw):
            v = _unquote(raw).lower()
            if v in ("1", "yes", "true", "on"):
                return True
            if v in ("0", "no", "false", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")

        num = lambda raw: float(_unquote(raw))  # noqa: E731
        integer = lambda raw: int(_unquote(raw))  # noqa: E731

        take("geometry", "F", _unquote)
        take("geometry", "L", num)
        take("geometry", "R", num)
        take("geometry", "unit_center", boolean)
        for key in ("a11", "a12", "a22", "c", "f"):
            take("coefficients", key, _unquote)
        take("coefficients", "lambda0", num)
        take("study", "eps", lambda raw: [float(v) for v in _split(raw)])
        take("study", "seed", integer)
        take("study", "workers", integer)
        for key in ("cell_n1", "cell_n2", "per_period", "n_s", "elements"):
            take("mesh", key, integer)
        take("mesh", "matched_cells", boolean)
        take("mesh", "profile_interp", boolean)
        take("tests", "measure_phi", _split)
        take("tests", "flux_phi", _unquote)
        take("tests", "flux_psi", _split)
        take("tests", "noise_floor", num)
        take("output", "directory", _unquote, "output_dir")
        take("output", "formats", lambda raw: [v.lower() for v in _split(raw)])
        take("output", "timing", boolean)
        cfg = cls(**kw)
        cfg.check()
        return cfg

    def check(self):
        if self.L <= 0:
            raise ConfigError("L must be positive")
        if any(e <= 0 for e in self.eps):
            raise ConfigError("eps values must be positive")
        if len(self.eps) > 1 and any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ConfigError("eps list must be strictly decreasing")
        bad = set(self.formats) - {"csv", "json"}
        if bad:
            raise ConfigError(f"unknown output formats {sorted(bad)}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def effective_workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
        return self.workers

    def model(self) -> GeometryModel:
        return GeometryModel.from_text(self.F, self.L, search_radius=self.R,
                                       declares_unit_center=self.unit_center)

    def coefficients(self) -> CoefficientSet:
        return CoefficientSet.from_strings(self.a11, self.a12, self.a22, self.c, self.f,
                                           self.lambda0)

    def cell_resolution(self) -> tuple:
        if self.matched_cells:
            return self.per_period, self.n_s
        return self.cell_n1, self.cell_n2

    def cell_solver(self, model=None, coeffs=None) -> CellSolver:
        n1, n2 = self.cell_resolution()
        return CellSolver(model or self.model(), coeffs or self.coefficients(), n1, n2,
                          averages="discrete" if self.matched_cells else "exact")


def check_config(cfg: StudyConfig):
    """Parse and validate every expression; returns (model, coeffs, report).

    Raises ValidationFailure when a geometry condition or a coefficient
    probe fails.  Expression syntax errors propagate unchanged.
    """
    model = cfg.model()
    coeffs = cfg.coefficients()
    for text in list(cfg.measure_phi) + [cfg.flux_phi]:
        measure._as_expr(text, measure.MEASURE_VARIABLES)
    for text in cfg.flux_psi:
        measure._as_expr(text, measure.ex.DEFAULT_VARIABLES)
    report = validate(model, seed=cfg.seed)
    problems = [f"{r.name}: {r.detail}" for r in report.results if not r.passed]
    problems += validate_coefficients(model, coeffs, seed=cfg.seed)
    if problems:
        raise ValidationFailure("; ".join(problems))
    return model, coeffs, report


# -- decay rules -----------------------------------------------------------------

def decays(values, total_factor: float = 1.0 / DECAY_LAST_RATIO,
           step_tol: float = DECAY_STEP_TOL) -> bool:
    """last <= first / total_factor and each step <= step_tol * previous."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 or not np.all(np.isfinite(v)):
        return False
    if v[-1] > v[0] / total_factor:
        return False
    return bool(np.all(v[1:] <= step_tol * v[:-1]))


def _at_noise(values, floor: float) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(v.size and np.all(np.isfinite(v)) and np.max(v) <= floor)


def evaluate_criteria(rows: list, references: dict, noise_floor: float) -> dict:
    """Pass/fail flags computed from report rows alone.

    A metric whose values all sit below ``noise_floor`` times its reference
    size counts as converged (the homogenised problem is exact up to
    discretisation there).  None marks a criterion that cannot be judged,
    e.g. with fewer than two eps values.
    """
    if len(rows) < 2:
        return {k: None for k in ("measure_convergence", "l2_decay", "flux_decay",
                                  "avg_gap_decay", "apriori_bounded")}
    eps = np.array([r["eps"] for r in rows])
    out = {}

    gaps = {name: np.array([r["measure_gaps"][name] for r in rows])
            for name in rows[0]["measure_gaps"]}
    halvings = np.log2(eps[:-1] / eps[1:])
    ok = True
    for g in gaps.values():
        if np.max(g) <= MEASURE_FLOOR:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = (g[:-1] / g[1:]) ** (1.0 / halvings)
        ok &= bool(np.all(rate >= MEASURE_HALVING_FACTOR))
    out["measure_convergence"] = ok

    l2 = [r["l2_error"] for r in rows]
    out["l2_decay"] = (decays(l2, L2_TOTAL_FACTOR)
                       or _at_noise(l2, noise_floor ** 2 * references.get("l2", 0.0)))

    ok = True
    for name in rows[0]["flux_residuals"]:
        vals = [r["flux_residuals"][name] for r in rows]
        floor = noise_floor * references.get("flux", {}).get(name, 0.0)
        ok &= decays(vals, FLUX_TOTAL_FACTOR) or _at_noise(vals, floor)
    out["flux_decay"] = ok

    avg = [r["avg_gap"] for r in rows]
    out["avg_gap_decay"] = decays(avg) or _at_noise(avg, noise_floor * references.get("avg", 0.0))

    norms = np.array([r["apriori_norm"] for r in rows], dtype=float)
    out["apriori_bounded"] = bool(np.all(np.isfinite(norms)) and norms.min() > 0
                                  and (norms.max() - norms.min()) / norms.min() <= APRIORI_SPREAD)
    return out


# -- report ------------------------------------------------------------------------

@dataclass
class StudyReport:
    config: dict
    rows: list
    effective: dict
    references: dict
    criteria: dict
    errors: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.errors and all(v is not False for v in self.criteria.values())

    def recompute_criteria(self) -> dict:
        return evaluate_criteria(self.rows, self.references, self.config["noise_floor"])

    def table(self, metric: str) -> np.ndarray:
        return np.array([[r["eps"], r[metric]] for r in self.rows], dtype=float).reshape(-1, 2)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyReport":
        return cls(**{k: d[k] for k in ("config", "rows", "effective", "references",
                                        "criteria", "errors", "metadata")},
                   timing=d.get("timing", {}))


def _nan_row(eps: float, cfg: StudyConfig, message: str) -> dict:
    return {"eps": eps, "measure_gap": math.nan, "l2_error": math.nan,
            "flux_residual": math.nan, "avg_gap": math.nan, "apriori_norm": math.nan,
            "measure_gaps": {}, "flux_residuals": {p: math.nan for p in cfg.flux_psi},
            "n_x1": None, "n_s": cfg.n_s, "per_period": cfg.per_period,
            "iterations": None, "error": message}


def _eps_row(eps, cfg, model, coeffs, cells, u, gaps) -> dict:
    row = {"eps": float(eps), "measure_gaps": gaps,
           "measure_gap": float(max(gaps.values())) if gaps else math.nan,
           "n_s": cfg.n_s, "per_period": cfg.per_period, "error": None}
    s = epssolve.solve_eps_problem(model, coeffs, eps, cfg.per_period, cfg.n_s)
    row["n_x1"] = s.mesh.n1
    row["iterations"] = s.iterations
    row["apriori_norm"] = float(s.apriori_norm())
    if u is None:
        row.update(l2_error=math.nan, avg_gap=math.nan, flux_residual=math.nan,
                   flux_residuals={p: math.nan for p in cfg.flux_psi})
        return row
    row["l2_error"] = float(epssolve.l2_error_vs_limit(s, u))
    # sampled at the nodes of the limit mesh, where its P1 values are sharpest
    row["avg_gap"] = float(np.max(np.abs(s.local_average(u.nodes) - u.u)))
    fluxes = {p: float(epssolve.flux_two_scale_residual(s, cells, u, cfg.flux_phi,
                                                        None if p.strip() == "1" else p))
              for p in cfg.flux_psi}
    row["flux_residuals"] = fluxes
    row["flux_residual"] = max(fluxes.values()) if fluxes else math.nan
    return row


def _references(cfg, cells, u) -> dict:
    """Sizes of the limit quantities, used to define the noise floor."""
    if u is None:
        return {}
    uq = u.values_at_quadrature()
    ref = {"l2": float(np.sum(u.wq * u.box_measure * uq ** 2)),
           "avg": float(np.max(np.abs(u.u)))}
    phi = measure._as_expr(cfg.flux_phi, measure.MEASURE_VARIABLES)
    phi0 = np.broadcast_to(measure.ex.evaluate(phi, {"x1": u.xq, "x2": 0.0}), u.xq.shape)
    du = u.element_slopes()[:, None]
    ref["flux"] = {p: float(np.sum(u.wq * np.abs(phi0 * du * u.a_eff))) for p in cfg.flux_psi}
    return ref


def run_study(cfg: StudyConfig) -> StudyReport:
    """Solve the limit once, then every eps problem; fill rows and criteria."""
    t0 = time.perf_counter()
    timing = {}
    errors = []
    model, coeffs, _ = check_config(cfg)
    workers = cfg.effective_workers()

    t = time.perf_counter()
    gaps_by_phi = {}
    for phi in cfg.measure_phi:
        st = measure.measure_convergence_study(phi, model, cfg.eps) if cfg.eps else None
        gaps_by_phi[phi] = [] if st is None else st.gaps.tolist()
    timing["measure"] = time.perf_counter() - t

    t = time.perf_counter()
    cells = cfg.cell_solver(model, coeffs)
    u = None
    try:
        u = solve_effective(model, coeffs, cfg.elements, (cells.n1, cells.n2),
                            profile_interp=cfg.profile_interp, solver=cells, workers=workers)
    except ThinHomogError as exc:
        errors.append(f"limit problem: {type(exc).__name__}: {exc}")
    timing["limit"] = time.perf_counter() - t

    def job(k):
        eps = cfg.eps[k]
        gaps = {phi: float(g[k]) for phi, g in gaps_by_phi.items()}
        try:
            return _eps_row(eps, cfg, model, coeffs, cells, u, gaps)
        except ThinHomogError as exc:
            row = _nan_row(float(eps), cfg, f"{type(exc).__name__}: {exc}")
            row["measure_gaps"] = gaps
            row["measure_gap"] = float(max(gaps.values())) if gaps else math.nan
            return row

    t = time.perf_counter()
    if workers > 1 and len(cfg.eps) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, range(len(cfg.eps))))
    else:
        rows = [job(k) for k in range(len(cfg.eps))]
    timing["eps_sweep"] = time.perf_counter() - t
    errors += [f"eps={r['eps']}: {r['error']}" for r in rows if r["error"]]

    effective = {}
    if u is not None:
        effective = {"x1": u.xq.ravel().tolist(), "a_eff": u.a_eff.ravel().tolist(),
                     "c_bar": u.c_bar.ravel().tolist(),
                     "box_measure": u.box_measure.ravel().tolist()}
    references = _references(cfg, cells, u)
    timing["total"] = time.perf_counter() - t0
    n1, n2 = cfg.cell_resolution()
    metadata = {
        "cell_resolution": [n1, n2],
        "cell_averages": "discrete" if cfg.matched_cells else "exact",
        "elements": cfg.elements,
        "per_period": cfg.per_period,
        "n_s": cfg.n_s,
        "eps_tolerance": epssolve.EPS_TOL,
        "cell_tolerance": cells.tol,
        "cell_solves": len(cells),
        "seed": cfg.seed,
    }
    return StudyReport(asdict(cfg), rows, effective, references,
                       evaluate_criteria(rows, references, cfg.noise_floor),
                       errors, metadata, timing)


# -- emission ----------------------------------------------------------------------

def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def emit(report: StudyReport, directory=None, formats=None, include_timing=None) -> list:
    """Write the report; returns the paths written.

    csv: ``report.csv`` with the fixed column schema plus one two-column
    ``<metric>.dat`` file per metric.  json: ``report.json`` with rows,
    effective table, criteria and metadata.
    """
    cfg = report.config
    directory = Path(directory or cfg["output_dir"])
    formats = formats or cfg["formats"]
    include_timing = cfg["timing"] if include_timing is None else include_timing
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = directory / "report.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([repr(float(r[c])) for c in CSV_COLUMNS])
        written.append(path)
        for metric in METRICS:
            path = directory / f"{metric}.dat"
            with path.open("w", newline="") as fh:
                fh.write(f"# eps {metric}\n")
                for e, v in report.table(metric):
                    fh.write(f"{float(e)!r} {float(v)!r}\n")
            written.append(path)
    if "json" in formats:
        path = directory / "report.json"
        path.write_text(json.dumps(_json_safe(report.to_dict(include_timing)), indent=2))
        written.append(path)
    return written


def load_report(path) -> StudyReport:
    d = json.loads(Path(path).read_text())

    def restore(obj):
        if obj is None:
            return math.nan
        if isinstance(obj, dict):
            return {k: restore(v) for k, v in obj.items()}
        return obj

    for r in d["rows"]:
        for key in METRICS:
            r[key] = restore(r[key])
        r["flux_residuals"] = restore(r["flux_residuals"])
    return StudyReport.from_dict(d)
