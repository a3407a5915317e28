"""Command-line front end: ``generate``, ``solve`` and ``sweep``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 solver did not
converge, 4 input/output failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .fmm import FmmParams
from .geometry import (
    RNG_NAME,
    GeometryError,
    LatticeSpec,
    RandomMediumSpec,
    clip_and_rescale,
    generate_lattice,
    generate_random,
    load_config,
    save_config,
)
from .harmonics import lebedev
from .homogenize import (
    CSV_COLUMNS,
    CorrectorProblem,
    SweepSpec,
    clipped_source,
    compute_all,
    energy_curve,
    lattice_source,
    results_to_json,
    self_reference,
    sweep,
)
from .operator import BudgetError, Discretization
from .solver import ConvergenceError, SolverSettings

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- manifest and output helpers ------------------------------------------------


def build_manifest(args: argparse.Namespace) -> dict:
    opts = {k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "options": opts,
        "seed": opts.get("seed"),
        "rng": RNG_NAME,
        "versions": {"spherehom": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _open_out(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def write_table(path: Path, columns: list[str], rows, manifest: dict) -> None:
    """CSV with the manifest on a leading ``#`` comment line."""
    with _open_out(path) as fh:
        fh.write("# manifest: " + json.dumps(manifest, default=str) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def write_json(path: Path, text: str) -> None:
    with _open_out(path) as fh:
        fh.write(text)


def read_table(path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_table`: returns the manifest and the rows."""
    with open(path, newline="") as fh:
        first = fh.readline()
        manifest = json.loads(first.split(":", 1)[1]) if first.startswith("# manifest:") else {}
        return manifest, list(csv.DictReader(fh))


# -- argument groups ------------------------------------------------------------


def _positive(kind):
    def parse(text):
        val = kind(text)
        if not val > 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return val

    return parse


def _add_solver_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("discretization and solver")
    g.add_argument("--N", type=int, default=1, help="spherical-harmonic cutoff degree")
    g.add_argument("--rule-degree", type=int, default=None,
                   help="minimum exactness of the Lebedev rule (default 2N+2)")
    g.add_argument("--eta-ls", type=_positive(float), default=1e-7,
                   help="GMRES relative residual tolerance")
    g.add_argument("--eta-opt", type=_positive(float), default=1e-5,
                   help="stopping tolerance on the exterior coefficient")
    g.add_argument("--directions", choices=["e1", "iso"], default=None,
                   help="e1: one direction; iso: average over three axes (default: iso "
                        "for lattices and single configurations, e1 for random media)")
    g.add_argument("--backend", choices=["auto", "dense", "fmm"], default="auto")
    g.add_argument("--fmm-order", type=int, default=None, help="expansion degree P")
    g.add_argument("--leaf-size", type=_positive(float), default=None,
                   help="mean number of inclusions per FMM leaf")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes for sweeps")


def _add_geometry_args(p: argparse.ArgumentParser, *, need_R: bool) -> None:
    p.add_argument("--a0", type=_positive(float), default=1.0, help="matrix coefficient")
    if need_R:
        p.add_argument("--R", type=_positive(float), required=True, help="outer radius")
    p.add_argument("--no-scaling", action="store_true",
                   help="clip to the ball without the volume-preserving rescaling")
    p.add_argument("--overlap", choices=["raise", "shrink", "clamp"], default="clamp",
                   help="policy when rescaled balls would overlap or cross the sphere")


def _add_lattice_args(p):
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--coeff", type=_positive(float), required=True)


def _add_random_args(p):
    p.add_argument("--rmin", type=float, required=True)
    p.add_argument("--rmax", type=float, required=True)
    p.add_argument("--cmin", type=float, required=True)
    p.add_argument("--cmax", type=float, required=True)
    p.add_argument("--gap", type=float, default=0.0, help="minimum surface separation")
    p.add_argument("--density", type=float, required=True, help="centres per unit volume")
    p.add_argument("--seed", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spherehom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a configuration file")
    gsub = gen.add_subparsers(dest="kind", required=True)
    for kind in ("lattice", "random"):
        g = gsub.add_parser(kind)
        (_add_lattice_args if kind == "lattice" else _add_random_args)(g)
        _add_geometry_args(g, need_R=True)
        g.add_argument("--raw", action="store_true",
                       help="write the generated medium without clipping to B_R")
        g.add_argument("-o", "--output", type=Path, required=True)
        g.set_defaults(func=cmd_generate)

    solve = sub.add_parser("solve", help="compute a1, a2, a3 for one configuration")
    solve.add_argument("config", type=Path)
    _add_solver_args(solve)
    solve.add_argument("--dump-lambda", action="store_true",
                       help="also write the boundary densities at a1")
    solve.add_argument("-o", "--output", type=Path, required=True, help="output directory")
    solve.set_defaults(func=cmd_solve)

    sw = sub.add_parser("sweep", help="run compute_all over a range of outer radii")
    ssub = sw.add_subparsers(dest="kind", required=True)
    for kind in ("lattice", "random", "file"):
        s = ssub.add_parser(kind)
        if kind == "lattice":
            _add_lattice_args(s)
        elif kind == "random":
            _add_random_args(s)
        else:
            s.add_argument("config", type=Path, help="raw (unclipped) configuration")
        _add_geometry_args(s, need_R=False)
        s.add_argument("--R-values", type=float, nargs="+", default=None)
        s.add_argument("--R-min", type=float, default=2.0)
        s.add_argument("--R-max", type=float, default=12.0)
        s.add_argument("--R-step", type=_positive(float), default=0.5)
        s.add_argument("--window", type=int, default=1, help="moving-average window")
        s.add_argument("--reference-count", type=int, default=4,
                       help="largest-R points averaged into the self reference")
        s.add_argument("--curve-points", type=int, default=9,
                       help="samples of a_inf -> J at the largest R (0 to skip)")
        _add_solver_args(s)
        s.add_argument("-o", "--output", type=Path, required=True, help="output directory")
        s.set_defaults(func=cmd_sweep)
    return parser


# -- commands -------------------------------------------------------------------


def _settings(args) -> SolverSettings:
    try:
        return SolverSettings(eta_ls=args.eta_ls, eta_opt=args.eta_opt)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _rule(args):
    return None if args.rule_degree is None else lebedev(args.rule_degree)


def _backend(args, M: int) -> tuple[str, dict]:
    backend = args.backend
    if backend == "auto":
        backend = "dense" if (M + 1) * (args.N + 1) ** 2 <= 4000 else "fmm"
    kw = {}
    if backend == "fmm" and (args.fmm_order is not None or args.leaf_size is not None):
        base = FmmParams.default(args.N)
        kw["fmm_params"] = FmmParams(order=args.fmm_order or base.order,
                                     leaf_size=args.leaf_size or base.leaf_size)
    return backend, kw


def _load(path: Path):
    try:
        return load_config(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid configuration file {path}: {exc}", EXIT_CONFIG) from exc


def _raw_medium(args, reach: float):
    if args.kind == "lattice":
        return generate_lattice(LatticeSpec(args.radius, args.coeff, args.a0), reach)
    spec = RandomMediumSpec((args.rmin, args.rmax), (args.cmin, args.cmax), args.gap,
                            args.density, args.seed, matrix_coefficient=args.a0)
    return generate_random(spec, reach)


def cmd_generate(args) -> int:
    manifest = build_manifest(args)
    margin = args.radius if args.kind == "lattice" else args.rmax
    raw = _raw_medium(args, args.R + margin)
    if args.raw:
        cfg = raw
    else:
        cfg, _ = clip_and_rescale(raw, args.R, scale=not args.no_scaling, on_overlap=args.overlap)
    cfg.provenance["manifest"] = manifest
    try:
        save_config(cfg, args.output)
    except OSError as exc:
        raise CliError(f"cannot write {args.output}: {exc}", EXIT_IO) from exc
    frac = cfg.volume_fraction() if cfg.outer_radius is not None else float("nan")
    print(f"M = {cfg.M}  volume fraction = {frac:.6f}  gamma = "
          f"{cfg.provenance.get('gamma', 1.0):.6f}  -> {args.output}")
    return EXIT_OK


def _result_rows(results):
    for r in results:
        if r is not None:
            row = r.row()
            yield [row[c] for c in CSV_COLUMNS]


def cmd_solve(args) -> int:
    args.directions = args.directions or "iso"
    manifest = build_manifest(args)
    cfg = _load(args.config)
    if cfg.outer_radius is None:
        raise CliError("configuration has no outer radius; generate it without --raw",
                       EXIT_CONFIG)
    backend, kw = _backend(args, cfg.M)
    settings = _settings(args)
    disc = Discretization(cfg, args.N, _rule(args), backend=backend, **kw)
    res = compute_all(cfg, args.N, settings=settings, mode=args.directions, disc=disc)
    out = args.output
    write_table(out / "result.csv", CSV_COLUMNS, _result_rows([res]), manifest)
    write_json(out / "result.json", results_to_json([res], manifest))
    if args.dump_lambda:
        problem = CorrectorProblem(disc, args.directions, settings)
        traces = problem.trace(res.a1)
        try:
            out.mkdir(parents=True, exist_ok=True)
            np.savez(out / "lambda.npz", a_inf=res.a1,
                     manifest=json.dumps(manifest, default=str),
                     **{f"direction_{k}": t.blocks for k, t in enumerate(traces)})
        except OSError as exc:
            raise CliError(f"cannot write lambda dump: {exc}", EXIT_IO) from exc
    d = res.diagnostics
    print(f"a1 = {res.a1:.10f}  a2 = {res.a2:.10f}  a3 = {res.a3:.10f}  "
          f"({d['linear_systems_total']} linear systems, {d['wall_ms'] / 1e3:.2f} s)")
    if not (d["fixed_point_converged"] and d["optimizer_converged"]):
        print("warning: outer iteration stopped at the iteration limit", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _R_values(args):
    if args.R_values:
        return tuple(args.R_values)
    n = int(np.floor((args.R_max - args.R_min) / args.R_step + 1e-9)) + 1
    if n < 1:
        raise CliError("empty R range", EXIT_CONFIG)
    return tuple(np.round(args.R_min + args.R_step * np.arange(n), 12))


def cmd_sweep(args) -> int:
    if args.directions is None:
        args.directions = "iso" if args.kind == "lattice" else "e1"
    manifest = build_manifest(args)
    R_values = _R_values(args)
    try:
        spec = SweepSpec(R_values, window=args.window, mode=args.directions)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    scale = not args.no_scaling
    if args.kind == "lattice":
        source = lattice_source(LatticeSpec(args.radius, args.coeff, args.a0), scale,
                                args.overlap)
    else:
        raw = _load(args.config) if args.kind == "file" else _raw_medium(
            args, max(R_values) + args.rmax)
        source = clipped_source(raw, scale, args.overlap)
    settings = _settings(args)
    # one backend for the whole series, chosen from the largest configuration
    backend, kw = _backend(args, source(max(R_values))[0].M)

    def progress(k, res, err):
        R = R_values[k]
        if res is not None:
            print(f"R = {R:g}: a1 = {res.a1:.8f} a2 = {res.a2:.8f} a3 = {res.a3:.8f}",
                  flush=True)
        else:
            print(f"R = {R:g}: failed ({err})", flush=True)

    result = sweep(spec, source, args.N, settings, rule=_rule(args), backend=backend,
                   workers=max(1, args.threads), progress=progress, **kw)
    out = args.output
    # raw series, with failed points flagged
    rows = []
    for R, r in zip(R_values, result.results):
        if r is None:
            rows.append([R, args.N] + [""] * (len(CSV_COLUMNS) - 2) + ["failed"])
        else:
            row = r.row()
            rows.append([row[c] for c in CSV_COLUMNS] + ["ok"])
    write_table(out / "series.csv", CSV_COLUMNS + ["status"], rows, manifest)
    # windowed series
    ok = [r for r in result.results if r is not None]
    Rw = result.averaged["a1"][0]
    wrows = zip(Rw, result.averaged["a1"][1], result.averaged["a2"][1], result.averaged["a3"][1])
    write_table(out / "windowed.csv", ["R_mean", "a1", "a2", "a3"], wrows, manifest)
    # error series against the self reference
    if len(ok) >= args.reference_count:
        ref = {k: self_reference(ok, k, args.reference_count) for k in ("a1", "a2", "a3")}
        erows = [[r.R] + [abs(getattr(r, k) - ref[k]) for k in ("a1", "a2", "a3")]
                 for r in ok]
        manifest_ref = {**manifest, "reference": ref}
        write_table(out / "errors.csv", ["R", "err_a1", "err_a2", "err_a3"], erows,
                    manifest_ref)
    # energy curve at the largest successful R
    if args.curve_points > 0 and ok:
        top = max(ok, key=lambda r: r.R)
        cfg, _ = source(top.R)
        disc = Discretization(cfg, args.N, _rule(args), backend=backend, **kw)
        lo, hi = cfg.coefficient_bounds()
        a_vals = np.linspace(lo, hi, args.curve_points) if hi > lo else np.array([lo])
        J = energy_curve(CorrectorProblem(disc, args.directions, settings), a_vals)
        write_table(out / "energy_curve.csv", ["a_inf", "J"], zip(a_vals, J),
                    {**manifest, "R": top.R})
    write_json(out / "results.json", results_to_json(result.results, {
        **manifest, "failures": {str(k): v for k, v in result.errors.items()}}))
    print(f"{len(ok)}/{len(R_values)} points succeeded -> {out}")
    return EXIT_OK if not result.errors else EXIT_SOLVER


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (GeometryError, BudgetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
