"""End-to-end pipeline: energy functional, the three effective coefficients, R-sweeps."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import ClipInfo, Configuration, LatticeSpec, clip_and_rescale, generate_lattice
from .harmonics import LebedevRule
from .operator import (
    Discretization,
    SurfaceCoeffs,
    SystemContext,
    apply_K,
    apply_K_transpose,
    denergy_da,
    energy,
    psi,
    rhs_g,
)
from .solver import SolverSettings, fixed_point_a3, gmres, maximize_a1

__all__ = [
    "DIRECTIONS",
    "CorrectorProblem",
    "HomogenizationResult",
    "SweepSpec",
    "SweepResult",
    "functional_J",
    "compute_all",
    "sweep",
    "window_average",
    "lattice_source",
    "clipped_source",
    "self_reference",
    "energy_curve",
    "write_csv",
    "CSV_COLUMNS",
]

DIRECTIONS = {"e1": (np.array([1.0, 0.0, 0.0]),),
              "iso": (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                      np.array([0.0, 0.0, 1.0]))}

CSV_COLUMNS = ["R", "N", "a1", "a2", "a3", "gamma", "M_kept", "M_deleted",
               "gmres_iters_total", "wall_ms"]


class CorrectorProblem:
    """``a_inf -> J(a_inf)`` and its derivative for one discretized geometry.

    Geometry-dependent work lives in the shared :class:`Discretization`; for
    a new ``a_inf`` only the outer-sphere terms change.  Solutions are kept
    per direction as warm starts.
    """

    def __init__(self, disc: Discretization, mode: str = "iso",
                 settings: SolverSettings = SolverSettings(),
                 exact_transpose: bool | None = None):
        if mode not in DIRECTIONS:
            raise ValueError(f"mode must be one of {sorted(DIRECTIONS)}")
        self.disc = disc
        self.mode = mode
        self.settings = settings
        self.exact_transpose = exact_transpose
        self.directions = DIRECTIONS[mode]
        self.bounds = disc.config.coefficient_bounds()
        self._warm = [None] * len(self.directions)
        self._warm_adj = [None] * len(self.directions)
        self._f_inc = [None] * len(self.directions)
        self._cache: dict[float, tuple[float, list, list]] = {}
        self.linear_solves = 0
        self.gmres_iters = 0
        self.residual_histories: list = []

    def _rhs(self, k: int, ctx: SystemContext) -> np.ndarray:
        d = self.disc
        g = rhs_g(ctx).blocks
        if self._f_inc[k] is None:
            g_inc = g.copy()
            g_inc[-1] = 0.0
            self._f_inc[k] = d.apply_B(g_inc)
        return self._f_inc[k] + d.apply_outer_column(g[-1])

    def _solve(self, apply, b, x0):
        res = gmres(apply, b.ravel(), self.settings, x0=x0)
        self.linear_solves += 1
        self.gmres_iters += res.iterations
        self.residual_histories.append(res.residuals)
        return res.x

    def solve_state(self, a: float) -> tuple[float, list, list]:
        a = float(a)
        if a in self._cache:
            return self._cache[a]
        values, lams, ctxs = [], [], []
        for k, p in enumerate(self.directions):
            ctx = SystemContext(self.disc, p, a)
            f = self._rhs(k, ctx)
            lam = self._solve(lambda v: apply_K(ctx, v).flat, f, self._warm[k])
            self._warm[k] = lam
            values.append(energy(ctx, lam))
            lams.append(lam)
            ctxs.append(ctx)
        state = (float(np.mean(values)), lams, ctxs)
        self._cache = {a: state}
        return state

    def directional_values(self, a: float) -> list[float]:
        _, lams, ctxs = self.solve_state(a)
        return [energy(ctx, lam) for ctx, lam in zip(ctxs, lams)]

    def value(self, a: float) -> float:
        return self.solve_state(a)[0]

    def value_and_grad(self, a: float) -> tuple[float, float]:
        J, lams, ctxs = self.solve_state(a)
        grads = []
        for k, (ctx, lam) in enumerate(zip(ctxs, lams)):
            s = self._solve(lambda v: apply_K_transpose(ctx, v, self.exact_transpose).flat,
                            psi(ctx).flat, self._warm_adj[k])
            self._warm_adj[k] = s
            grads.append(denergy_da(ctx, lam, s))
        return J, float(np.mean(grads))

    def trace(self, a: float) -> list[SurfaceCoeffs]:
        _, lams, _ = self.solve_state(a)
        return [SurfaceCoeffs.from_flat(l, self.disc.N) for l in lams]


def functional_J(config: Configuration, N: int, rule: LebedevRule | None, a_inf: float,
                 mode: str = "iso", backend: str = "dense",
                 settings: SolverSettings = SolverSettings(), **disc_kw) -> float:
    disc = Discretization(config, N, rule, backend=backend, **disc_kw)
    return CorrectorProblem(disc, mode, settings).value(a_inf)


@dataclass
class HomogenizationResult:
    R: float
    N: int
    a1: float
    a2: float
    a3: float
    gamma: float = 1.0
    M_kept: int = 0
    M_deleted: int = 0
    diagnostics: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"R": self.R, "N": self.N, "a1": self.a1, "a2": self.a2, "a3": self.a3,
                "gamma": self.gamma, "M_kept": self.M_kept, "M_deleted": self.M_deleted,
                "gmres_iters_total": self.diagnostics.get("gmres_iters_total", 0),
                "wall_ms": self.diagnostics.get("wall_ms", 0.0)}

    def to_dict(self) -> dict:
        return asdict(self)


def compute_all(config: Configuration, N: int = 1, rule: LebedevRule | None = None,
                settings: SolverSettings = SolverSettings(), *, mode: str = "iso",
                backend: str = "dense", clip: ClipInfo | None = None, a_init=None,
                exact_transpose: bool | None = None, disc: Discretization | None = None,
                **disc_kw) -> HomogenizationResult:
    """Fixed point ``a3``, then the maximizer ``a1`` started from it, and ``a2 = J(a1)``."""
    t0 = time.perf_counter()
    if disc is None:
        disc = Discretization(config, N, rule, backend=backend, **disc_kw)
    t_setup = time.perf_counter() - t0
    problem = CorrectorProblem(disc, mode, settings, exact_transpose)
    lo, hi = problem.bounds
    if a_init is None:
        a_init = min(max(config.arithmetic_mean(), lo), hi)
    fp = fixed_point_a3(problem, a_init, settings)
    n_fp = problem.linear_solves
    opt = maximize_a1(problem, fp.a, settings)
    wall = time.perf_counter() - t0
    diag = {
        "mode": mode,
        "backend": disc.backend,
        "rule_degree": disc.rule.exact_degree,
        "rule_points": disc.rule.size,
        "fixed_point_iterations": fp.iterations,
        "fixed_point_damped": fp.damped,
        "fixed_point_converged": fp.converged,
        "fixed_point_history": fp.history,
        "optimizer_iterations": opt.iterations,
        "optimizer_evaluations": opt.evaluations,
        "optimizer_boundary": opt.boundary,
        "optimizer_converged": opt.converged,
        "gradient_at_a1": opt.gradient,
        "linear_systems_fixed_point": n_fp,
        "linear_systems_total": problem.linear_solves,
        "gmres_iters_total": problem.gmres_iters,
        "setup_ms": 1e3 * t_setup,
        "wall_ms": 1e3 * wall,
        "bounds": [lo, hi],
        "eta_ls": settings.eta_ls,
        "eta_opt": settings.eta_opt,
    }
    if hasattr(disc.interaction, "diagnostics"):
        diag["fmm"] = disc.interaction.diagnostics()
    gamma = clip.gamma if clip else float(config.provenance.get("gamma", 1.0))
    kept = clip.M_kept if clip else config.M
    deleted = clip.M_deleted if clip else 0
    if clip is not None:
        diag["gamma_requested"] = clip.gamma_requested
        diag["clamped"] = clip.clamped
        diag["shrunk"] = clip.shrunk
    return HomogenizationResult(float(config.R), N, opt.a, opt.value, fp.a, gamma, kept,
                                deleted, diag)


@dataclass(frozen=True)
class SweepSpec:
    R_values: tuple
    window: int = 1
    mode: str = "iso"

    def __post_init__(self):
        R = np.asarray(self.R_values, dtype=float)
        if R.size == 0 or np.any(np.diff(R) <= 0):
            raise ValueError("R values must be strictly increasing")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.mode not in DIRECTIONS:
            raise ValueError(f"mode must be one of {sorted(DIRECTIONS)}")
        object.__setattr__(self, "R_values", tuple(float(r) for r in R))


@dataclass
class SweepResult:
    results: list
    errors: dict
    averaged: dict

    def series(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        ok = [r for r in self.results if r is not None]
        return (np.array([r.R for r in ok]), np.array([getattr(r, key) for r in ok]))


def window_average(R: Sequence[float], values: Sequence[float], window: int):
    """Moving averages over ``window`` consecutive entries; each is placed at the mean R."""
    R = np.asarray(R, dtype=float)
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(v) < window:
        return np.empty(0), np.empty(0)
    kernel = np.ones(window) / window
    return np.convolve(R, kernel, "valid"), np.convolve(v, kernel, "valid")


MediumSource = Callable[[float], "tuple[Configuration, ClipInfo]"]


def lattice_source(spec: LatticeSpec, scale: bool = True, on_overlap: str = "clamp") -> MediumSource:
    def make(R: float):
        return clip_and_rescale(generate_lattice(spec, R), R, scale=scale, on_overlap=on_overlap)

    return make


def clipped_source(raw: Configuration, scale: bool = True, on_overlap: str = "clamp") -> MediumSource:
    def make(R: float):
        return clip_and_rescale(raw, R, scale=scale, on_overlap=on_overlap)

    return make


def _run_one(args):
    source, R, N, rule, settings, mode, backend, disc_kw = args
    cfg, info = source(R)
    return compute_all(cfg, N, rule, settings, mode=mode, backend=backend, clip=info, **disc_kw)


def sweep(spec: SweepSpec, source: MediumSource, N: int = 1,
          settings: SolverSettings = SolverSettings(), *, rule: LebedevRule | None = None,
          backend: str = "fmm", workers: int = 1, progress=None, **disc_kw) -> SweepResult:
    """Run ``compute_all`` for every R; failures are recorded and the sweep continues."""
    jobs = [(source, R, N, rule, settings, spec.mode, backend, disc_kw) for R in spec.R_values]
    results: list = [None] * len(jobs)
    errors: dict = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_one, job) for job in jobs]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded per point
                    errors[spec.R_values[k]] = f"{type(exc).__name__}: {exc}"
    else:
        for k, job in enumerate(jobs):
            try:
                results[k] = _run_one(job)
            except Exception as exc:  # noqa: BLE001
                errors[spec.R_values[k]] = f"{type(exc).__name__}: {exc}"
            if progress is not None:
                progress(k, results[k], errors.get(spec.R_values[k]))
    averaged = {}
    ok = [r for r in results if r is not None]
    for key in ("a1", "a2", "a3"):
        averaged[key] = window_average([r.R for r in ok], [getattr(r, key) for r in ok],
                                       spec.window)
    return SweepResult(results, errors, averaged)


def self_reference(results: Sequence[HomogenizationResult], key: str = "a2", count: int = 4) -> float:
    """Mean of ``key`` over the ``count`` largest-R results."""
    ok = sorted((r for r in results if r is not None), key=lambda r: r.R)
    if len(ok) < count:
        raise ValueError(f"need at least {count} results for a reference value")
    return float(np.mean([getattr(r, key) for r in ok[-count:]]))


def energy_curve(problem: CorrectorProblem, a_values: Sequence[float]) -> np.ndarray:
    return np.array([problem.value(a) for a in a_values])


def write_csv(results: Sequence[HomogenizationResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in results:
            if r is not None:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                            for k, v in r.row().items()})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def results_to_json(results, manifest: dict | None = None) -> str:
    return json.dumps({"manifest": _jsonable(manifest or {}),
                       "results": [_jsonable(r.to_dict()) if r is not None else None
                                   for r in results]}, indent=1)
