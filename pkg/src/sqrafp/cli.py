"""Command line front-end: ``mesh``, ``run`` and ``convergence``.

Configuration is read from an optional ``key = value`` file and from
command line flags of the same names (``--snapshot-stride`` for
``snapshot_stride``); flags win. Exit codes: 0 success, 1 invalid input,
2 solver failure, 3 mesh validation failure.
"""
from __future__ import annotations

import argparse
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cases, diagnostics
from . import mesh as meshmod
from . import scheme
from .errors import InputError, MeshError, NumericalError

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_VALIDATION = 0, 1, 2, 3

#: Ratio tau / size(T) of the reference ladder's first row.
TAU_OVER_SIZE = 2.5e-2 / 3.06e-1


def _opt_float(text):
    return None if text.lower() in ("", "none", "auto") else float(text)


def _choice(*names):
    def conv(text):
        if text not in names:
            raise ValueError(f"expected one of {', '.join(names)}")
        return text
    return conv


#: key -> (converter, default, help)
CONFIG_KEYS = {
    "case": (_choice("gravity", "spiral"), "gravity", "test problem"),
    "g": (float, 1.0, "gravity strength"),
    "delta": (float, 0.001, "time shift of the exact gravity solution"),
    "sigma": (float, 1e-2, "width of the spiral problem"),
    "mesh": (str, meshmod.EMBEDDED_BASE, "base mesh file, or 'embedded'"),
    "refine": (_choice("subdivision", "repetition"), "subdivision", "refinement kind"),
    "level": (int, 2, "refinement level (factor 2**level); first level of a ladder"),
    "levels": (int, 4, "number of ladder levels"),
    "tau": (_opt_float, None, "time step (default: anchored to the mesh size)"),
    "T": (_opt_float, None, "final time (default: the case horizon)"),
    "newton_tol": (float, 1e-11, "Newton tolerance relative to the mass"),
    "newton_max_iters": (int, 50, "Newton iteration cap"),
    "linear_solver": (_choice("direct", "krylov"), "direct", "linear solver"),
    "init": (_choice("auto", "midpoint", "center", "gibbs"), "auto",
             "initial datum: auto (center for ladders, midpoint otherwise), "
             "midpoint, center, or gibbs (start from exp(-V))"),
    "output": (str, ".", "output directory"),
    "snapshot_stride": (int, 0, "VTK snapshot every N steps (0: first and last only)"),
}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def _convert(key, value, where):
    if key not in CONFIG_KEYS:
        raise InputError(f"{where}: unknown key {key!r}")
    try:
        return CONFIG_KEYS[key][0](value)
    except ValueError as exc:
        raise InputError(f"{where}: bad value {value!r} for {key}: {exc}") from None


@dataclass
class RunConfig:
    case: str
    g: float
    delta: float
    sigma: float
    mesh: str
    refine: str
    level: int
    levels: int
    tau: float | None
    T: float | None
    newton_tol: float
    newton_max_iters: int
    linear_solver: str
    init: str
    output: str
    snapshot_stride: int

    def __post_init__(self):
        if self.level < 0:
            raise InputError("level must be >= 0")
        if self.levels < 1:
            raise InputError("levels must be >= 1")
        if self.snapshot_stride < 0:
            raise InputError("snapshot_stride must be >= 0")
        for name in ("tau", "T"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise InputError(f"{name} must be positive")

    def make_case(self):
        if self.case == "gravity":
            return cases.gravity_case(self.g, self.delta, T=self.horizon_default("gravity"))
        return cases.spiral_case(self.sigma)

    def horizon_default(self, name):
        if self.T is not None:
            return self.T
        return cases.GRAVITY_T if name == "gravity" else cases.SPIRAL_T


def build_config(args):
    values = {k: spec[1] for k, spec in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config file: {exc}") from None
        values.update(parse_config_text(text, args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _convert(key, flag, f"--{key.replace('_', '-')}")
    return RunConfig(**values)


def steps_for(T, tau):
    """Number of steps ``N = T / tau``; must be integral within 1e-12."""
    n = round(T / tau)
    if n < 1 or abs(n * tau - T) > 1e-12 * max(1.0, T):
        raise InputError(f"T = {T!r} is not an integer multiple of tau = {tau!r}")
    return int(n)


# ---------------------------------------------------------------- writers

def fmt(x):
    return f"{x:.17e}"


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer))
                                                            else fmt(v)) for v in row) + "\n")


def write_vtk(path, mesh, fields, title="sqrafp"):
    """Legacy ASCII unstructured grid with one CELL_DATA scalar per field."""
    if mesh.triangles is None:
        raise InputError("VTK output needs triangle geometry")
    nv, nc = len(mesh.vertices), mesh.n_cells
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nc} {4 * nc}")
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles]
    lines.append(f"CELL_TYPES {nc}")
    lines += ["5"] * nc
    lines.append(f"CELL_DATA {nc}")
    for name, values in fields.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [fmt(v) for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


# -------------------------------------------------------------- commands

def _parse_refine_spec(text):
    kind, sep, count = text.partition(":")
    if not sep or kind not in ("subdivision", "repetition"):
        raise InputError(f"--refine expects subdivision:N or repetition:N, got {text!r}")
    try:
        n = int(count)
    except ValueError:
        raise InputError(f"bad refinement factor {count!r}") from None
    if n < 1:
        raise InputError("refinement factor must be >= 1")
    return kind, n


def cmd_mesh(args):
    source = args.file if args.file else args.base
    mesh = meshmod.load_mesh(source, validate=False)
    for spec in args.refine or []:
        kind, n = _parse_refine_spec(spec)
        if n > 1:
            mesh = (meshmod.refine_subdivision(mesh, n) if kind == "subdivision"
                    else meshmod.refine_repetition(mesh, n))
    report = meshmod.validate_admissible(mesh)
    if args.validate or not report.passed:
        print(report)
    if not report.passed:
        print("mesh is not admissible", file=sys.stderr)
        return EXIT_VALIDATION
    q = meshmod.quality_metrics(mesh, iso_threshold=args.iso_threshold)
    print(q.to_text(), end="")
    # cell fractions per defect bin, comparable across refinement levels
    frac = q.histogram() / q.n_cells
    print("eps_iso_histogram = " + " ".join(f"{f:.6f}" for f in frac))
    if args.output:
        meshmod.write_mesh(mesh, args.output)
        print(f"wrote {args.output}")
    return EXIT_OK


def _mesh_for(cfg, level):
    base = meshmod.load_mesh(cfg.mesh)
    return meshmod.refine(base, cfg.refine, level)


def _init_rule(cfg, ladder):
    if cfg.init != "auto":
        return cfg.init
    return "center" if ladder else "midpoint"


def _params(cfg, tau, n_steps):
    return scheme.SchemeParams(tau=tau, n_steps=n_steps, newton_tol=cfg.newton_tol,
                               newton_max_iters=cfg.newton_max_iters, linear_solver=cfg.linear_solver)


def run_case(cfg, mesh, case, tau, n_steps, init, series=None, snapshots=None, exact_errors=True):
    """Run one configuration and collect series rows, bookkeeping and error norms."""
    pot = scheme.discretize_potential(mesh, case.V)
    if init == "gibbs":
        rho0 = pot.pi.copy()
    else:
        rho0 = scheme.discretize_initial(mesh, case.rho0, rule=init)
    params = _params(cfg, tau, n_steps)
    acc = cases.ErrorAccumulator(mesh, case.exact, tau) if (exact_errors and case.exact) else None
    mass0 = scheme.mass(mesh, rho0)
    stats = {"edi_violations": 0, "max_edi_excess": -math.inf, "max_abs_delta_equality": 0.0,
             "dissipated": 0.0, "max_entropy": diagnostics.discrete_entropy(mesh, rho0),
             "rho_min": float(rho0.min()), "theta_min": math.inf, "max_newton_iters": 0,
             "max_mass_drift": 0.0}
    tol = diagnostics.edi_tolerance(mass0, cfg.newton_tol)
    E = [diagnostics.discrete_energy(mesh, pot, rho0)]
    if snapshots is not None:
        snapshots(0, rho0, None)

    def observer(n, rho_prev, res):
        d = diagnostics.per_step_diagnostics(mesh, pot, rho_prev, res, tau, t=(n + 1) * tau, E_prev=E[0])
        E[0] = d.energy
        m_prev = scheme.mass(mesh, rho_prev)
        stats["max_mass_drift"] = max(stats["max_mass_drift"], abs(d.mass - m_prev) / m_prev)
        stats["max_edi_excess"] = max(stats["max_edi_excess"], d.edi_gap)
        if d.edi_gap > tol:
            stats["edi_violations"] += 1
        if d.min_theta_ratio >= 1.0 / math.e:
            stats["max_abs_delta_equality"] = max(stats["max_abs_delta_equality"], abs(d.delta) * tau)
        stats["dissipated"] += tau * (d.d_psi + d.r_psi)
        stats["max_entropy"] = max(stats["max_entropy"], d.entropy)
        stats["rho_min"] = min(stats["rho_min"], d.rho_min)
        stats["theta_min"] = min(stats["theta_min"], float(res.theta.min()))
        stats["max_newton_iters"] = max(stats["max_newton_iters"], res.newton_iters)
        if series is not None:
            series.append([d.t, d.energy, d.entropy, d.d_psi, d.r_psi, d.delta, d.mass, d.rho_min,
                           int(d.newton_iters)])
        if acc is not None:
            acc.update(n, res.rho_next)
        if snapshots is not None:
            snapshots(n + 1, res.rho_next, res.theta)

    scheme.run_trajectory(mesh, pot, rho0, params, observer=observer, keep=False)
    stats["uniform_bound"] = diagnostics.uniform_bound(mesh, pot, rho0)
    stats["mass"] = mass0
    errors = acc.norms() if acc is not None else None
    return stats, errors


SERIES_HEADER = ["t", "E", "H", "D_psi", "R_psi", "Delta", "mass", "rho_min", "newton_iters"]


def cmd_run(cfg):
    case = cfg.make_case()
    mesh = _mesh_for(cfg, cfg.level)
    T = cfg.horizon_default(case.name)
    tau = cfg.tau if cfg.tau is not None else T / round(T / (TAU_OVER_SIZE * mesh.size()))
    n_steps = steps_for(T, tau)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stride = cfg.snapshot_stride

    def snap(n, rho, theta):
        if n == 0 or n == n_steps or (stride and n % stride == 0):
            fields = {"rho": rho}
            if theta is not None:
                fields["theta"] = theta
            write_vtk(out / f"snapshot_{n}.vtk", mesh, fields, title=f"{case.name} t={n * tau:.17e}")

    print(f"{case.name}: {mesh.n_cells} cells, tau = {tau:.6e}, {n_steps} steps, "
          f"tau/d_min = {meshmod.cfl_ratio(tau, mesh):.3e}")
    series = []
    try:
        stats, errors = run_case(cfg, mesh, case, tau, n_steps, _init_rule(cfg, False),
                                 series=series, snapshots=snap)
    finally:
        write_csv(out / "series.csv", SERIES_HEADER, series)
    summary = {"case": case.name, "cells": mesh.n_cells, "tau": tau, "steps": n_steps,
               "tau_over_d_min": meshmod.cfl_ratio(tau, mesh), **stats}
    summary["uniform_bound_holds"] = int(stats["dissipated"] <= stats["uniform_bound"] * (1 + 1e-12)
                                         and stats["max_entropy"] <= stats["uniform_bound"] * (1 + 1e-12))
    if errors:
        summary.update(errors)
    text = "".join(f"{k} = {v if isinstance(v, (str, int)) else fmt(v)}\n" for k, v in summary.items())
    (out / "summary.txt").write_text(text)
    print(text, end="")
    if stats["edi_violations"]:
        print(f"warning: discrete EDI violated on {stats['edi_violations']} steps", file=sys.stderr)
    return EXIT_OK


TABLE_HEADER = ["tau", "size", "L1", "rate", "L2", "rate", "Linf", "rate", "rho_min"]


def convergence_table(cfg, echo=None):
    """Run the ladder and return its rows ``[tau, size, L1, r, L2, r, Linf, r, rho_min]``."""
    case = cfg.make_case()
    if case.exact is None:
        raise InputError(f"case {case.name!r} has no exact solution")
    T = cfg.horizon_default(case.name)
    base = meshmod.load_mesh(cfg.mesh)
    meshes = [meshmod.refine(base, cfg.refine, cfg.level + i) for i in range(cfg.levels)]
    tau0 = cfg.tau if cfg.tau is not None else TAU_OVER_SIZE * meshes[0].size()
    n0 = max(1, round(T / tau0))
    if cfg.tau is not None:
        n0 = steps_for(T, cfg.tau)
    results = []
    cfl = []
    for i, mesh in enumerate(meshes):
        n = n0 * 2 ** i
        tau = T / n
        cfl.append(meshmod.cfl_ratio(tau, mesh))
        stats, err = run_case(cfg, mesh, case, tau, n, _init_rule(cfg, True))
        results.append((tau, mesh.size(), err, stats["rho_min"]))
        if echo:
            echo(f"level {cfg.level + i}: {mesh.n_cells} cells, tau = {tau:.3e}, "
                 f"L1 = {err['L1']:.3e}, L2 = {err['L2']:.3e}, Linf = {err['Linf']:.3e}")
    if len(cfl) > 1 and not cfl[-1] < cfl[0]:
        warnings.warn("tau / d_min does not decrease along the ladder", RuntimeWarning, stacklevel=2)
    r = {k: cases.rates([e[k] for _, _, e, _ in results]) for k in ("L1", "L2", "Linf")}
    return [[tau, size, e["L1"], r["L1"][i], e["L2"], r["L2"][i], e["Linf"], r["Linf"][i], rmin]
            for i, (tau, size, e, rmin) in enumerate(results)]


def cmd_convergence(cfg):
    rows = convergence_table(cfg, echo=print)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "table.csv", TABLE_HEADER, rows)
    print(" ".join(f"{h:>9}" for h in TABLE_HEADER))
    for row in rows:
        print(" ".join("        -" if isinstance(v, float) and math.isnan(v) else
                       (f"{v:9.2f}" if j in (3, 5, 7) else f"{v:9.2e}") for j, v in enumerate(row)))
    return EXIT_OK


def read_table(path):
    """Parse ``table.csv`` back into a float array (``nan`` for missing rates)."""
    lines = Path(path).read_text().splitlines()
    return np.array([[float(v) for v in line.split(",")] for line in lines[1:]])


# ------------------------------------------------------------------ parser

def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE", help="key = value configuration file")
    for key, (_, default, help_) in CONFIG_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE",
                       help=help_ if default is None else f"{help_} (default: {default})")


def build_parser():
    parser = argparse.ArgumentParser(prog="sqrafp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    pm = sub.add_parser("mesh", help="build, refine and validate a mesh")
    src = pm.add_mutually_exclusive_group()
    src.add_argument("--base", default=meshmod.EMBEDDED_BASE, help="'embedded' acute base mesh")
    src.add_argument("--file", help="mesh file to load")
    pm.add_argument("--refine", action="append", metavar="KIND:N",
                    help="subdivision:N (N**2 children per triangle) or repetition:N (N x N copies)")
    pm.add_argument("--validate", action="store_true", help="print the admissibility report")
    pm.add_argument("--iso-threshold", type=float, default=0.05)
    pm.add_argument("-o", "--output", help="write the resulting mesh here")

    pr = sub.add_parser("run", help="single run with per-step diagnostics")
    _add_config_flags(pr)
    pc = sub.add_parser("convergence", help="error ladder under joint refinement")
    _add_config_flags(pc)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "mesh":
            return cmd_mesh(args)
        cfg = build_config(args)
        return cmd_run(cfg) if args.command == "run" else cmd_convergence(cfg)
    except MeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if exc.diagnostics else EXIT_INPUT
    except NumericalError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"solver failure{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
