"""Command line entry point ``thinhomog``.

Exit codes: 0 success, 1 validation failure, 2 solver failure, 64 usage
error (including unreadable or incomplete config files).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import epssolve, measure, study
from .cell import validate_coefficients
from .errors import (ConfigError, ExprError, GeometryError, OutOfDomain, ThinHomogError,
                     ValidationFailure)
from .geometry import validate
from .limit1d import solve_effective

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(args) -> study.StudyConfig:
    return study.StudyConfig.from_file(args.config)


def _print_json(obj, stream=None):
    json.dump(study._json_safe(obj), stream or sys.stdout, indent=2)
    (stream or sys.stdout).write("\n")


def cmd_validate(args) -> int:
    cfg = _load(args)
    model, coeffs = cfg.model(), cfg.coefficients()
    report = validate(model, seed=cfg.seed)
    # the coefficient probes sample the sections, so they need a valid geometry
    problems = (validate_coefficients(model, coeffs, seed=cfg.seed) if report.passed
                else ["not probed: geometry conditions failed"])
    _print_json({"geometry": report.as_dict(), "coefficients": problems,
                 "passed": report.passed and not problems})
    return EXIT_OK if report.passed and not problems else EXIT_VALIDATION


def cmd_cell(args) -> int:
    cfg = _load(args)
    model, coeffs, _ = study.check_config(cfg)
    if abs(args.x1) > model.L:
        raise OutOfDomain(f"--x1 must lie in [-{model.L}, {model.L}]")
    if args.n1 or args.n2:
        cfg.matched_cells = False
        cfg.cell_n1 = args.n1 or cfg.cell_n1
        cfg.cell_n2 = args.n2 or cfg.cell_n2
    sol = cfg.cell_solver(model, coeffs).solve(args.x1)
    _print_json({"x1": sol.x1, "A_eff": sol.A_eff.tolist(), "a_eff": sol.a_eff,
                 "c_bar": sol.c_bar, "box_measure": sol.box_measure,
                 "resolution": [sol.mesh.n1, sol.mesh.n2],
                 "iterations": list(sol.iterations)})
    return EXIT_OK


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def cmd_effective(args) -> int:
    cfg = _load(args)
    model, coeffs, _ = study.check_config(cfg)
    cells = cfg.cell_solver(model, coeffs)
    u = solve_effective(model, coeffs, args.elements, solver=cells,
                        profile_interp=args.profile_interp or cfg.profile_interp,
                        workers=cfg.effective_workers())
    out = _open_out(args.output)
    try:
        w = csv.writer(out)
        w.writerow(["x1", "u"])
        for x, v in zip(u.nodes, u.u):
            w.writerow([repr(float(x)), repr(float(v))])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_solve_eps(args) -> int:
    cfg = _load(args)
    model, coeffs, _ = study.check_config(cfg)
    npp = args.per_period or cfg.per_period
    n_s = args.n_s or cfg.n_s
    s = epssolve.solve_eps_problem(model, coeffs, args.eps, npp, n_s)
    norms = s.norms()
    summary = {"eps": s.eps, "n_x1": s.mesh.n1, "n_s": s.mesh.n2, "per_period": npp,
               "dofs": int(s.u.size), "iterations": s.iterations, "residual": s.residual,
               "l2_weighted": norms["l2_weighted"], "h1_semi": norms["h1_semi"],
               "apriori_norm": norms["l2_weighted"] + norms["h1_semi"],
               "energy_identity_gap": s.energy_identity_gap()}
    nodes = s.nodes
    sgrid = np.tile(s.mesh.s, s.mesh.n1 + 1)
    if args.output:
        csv_out = open(f"{args.output}.csv", "w", newline="")
        json_out = open(f"{args.output}.json", "w")
    else:
        csv_out, json_out = sys.stdout, sys.stderr
    try:
        w = csv.writer(csv_out)
        w.writerow(["x1", "s", "x2", "u"])
        for (x1, x2), sv, uv in zip(nodes, sgrid, s.u):
            w.writerow([repr(float(x1)), repr(float(sv)), repr(float(x2)), repr(float(uv))])
        _print_json(summary, json_out)
    finally:
        for fh in (csv_out, json_out):
            if fh not in (sys.stdout, sys.stderr):
                fh.close()
    return EXIT_OK


def cmd_verify_measure(args) -> int:
    cfg = _load(args)
    model, _, _ = study.check_config(cfg)
    eps = args.eps or cfg.eps
    rows = []
    ok = True
    for phi in cfg.measure_phi:
        st = measure.measure_convergence_study(phi, model, eps)
        factors = st.halving_factors()
        good = bool(st.gaps.max() <= study.MEASURE_FLOOR
                    or np.all(factors >= study.MEASURE_HALVING_FACTOR))
        ok &= good
        rows.append({"phi": phi, "limit": st.limit, "eps": st.eps.tolist(),
                     "gaps": st.gaps.tolist(), "halving_factors": factors.tolist(),
                     "passed": good})
    _print_json({"measure_convergence": rows, "passed": ok})
    return EXIT_OK if ok or not args.strict else EXIT_VALIDATION


def cmd_study(args) -> int:
    cfg = _load(args)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = study.run_study(cfg)
    paths = study.emit(report)
    _print_json({"criteria": report.criteria, "errors": report.errors,
                 "written": [str(p) for p in paths]})
    if report.errors:
        return EXIT_SOLVER
    if args.strict and not report.passed:
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thinhomog",
                description="Homogenisation of elliptic problems in thin oscillating domains.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", required=True, help="study config file (INI)")
        sp.set_defaults(func=func)
        return sp

    add("validate", cmd_validate, "check the geometry conditions and coefficient probes")
    sp = add("cell", cmd_cell, "solve the cell problems at one slow position")
    sp.add_argument("--x1", type=float, required=True)
    sp.add_argument("--n1", type=int, help="cell elements along y1")
    sp.add_argument("--n2", type=int, help="cell elements across the section")
    sp = add("effective", cmd_effective, "solve the limit problem; CSV of nodal (x1, u)")
    sp.add_argument("--elements", type=int, default=64)
    sp.add_argument("--profile-interp", action="store_true",
                    help="interpolate coefficients from cell solves at the nodes")
    sp.add_argument("--output", help="CSV path (default stdout)")
    sp = add("solve-eps", cmd_solve_eps, "solve the full thin-domain problem at one eps")
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--per-period", type=int)
    sp.add_argument("--n-s", type=int)
    sp.add_argument("--output", help="path prefix for .csv and .json "
                    "(default: CSV to stdout, summary to stderr)")
    sp = add("verify-measure", cmd_verify_measure, "convergence of mu_eps to mu_*")
    sp.add_argument("--eps", type=float, nargs="+")
    sp.add_argument("--strict", action="store_true", help="exit 1 when the decay check fails")
    sp = add("study", cmd_study, "full eps sweep with report files")
    sp.add_argument("--output-dir")
    sp.add_argument("--strict", action="store_true", help="exit 1 when a criterion fails")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, OutOfDomain) as exc:
        parser.print_usage(sys.stderr)
        print(f"thinhomog: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, ExprError, GeometryError) as exc:
        print(f"thinhomog: validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ThinHomogError as exc:
        print(f"thinhomog: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
