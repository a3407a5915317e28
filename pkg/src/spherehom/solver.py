"""Linear and scalar solvers: restarted GMRES, fixed-point iteration, Armijo ascent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

__all__ = [
    "SolverSettings",
    "GmresResult",
    "ConvergenceError",
    "gmres",
    "ScalarProblem",
    "FixedPointResult",
    "MaximizeResult",
    "fixed_point_a3",
    "maximize_a1",
]


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverSettings:
    eta_ls: float = 1e-7
    eta_opt: float = 1e-5
    restart: int = 50
    max_iter: int = 1000
    max_outer: int = 200
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    secant_steps: bool = True
    damping: float = 0.5
    stall_window: int = 3

    def __post_init__(self):
        if not 0 < self.eta_ls < 1:
            raise ValueError("eta_ls must lie in (0, 1)")
        if not self.eta_opt > 0:
            raise ValueError("eta_opt must be positive")
        if self.restart < 1 or self.max_iter < 1 or self.max_outer < 1:
            raise ValueError("iteration limits must be positive")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo_c < 1:
            raise ValueError("Armijo parameters out of range")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")

    def tightened(self, eta_ls=None, eta_opt=None) -> "SolverSettings":
        from dataclasses import replace

        return replace(self, eta_ls=eta_ls or self.eta_ls, eta_opt=eta_opt or self.eta_opt)


@dataclass
class GmresResult:
    x: np.ndarray
    residuals: list
    iterations: int
    converged: bool


def gmres(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
          settings: SolverSettings = SolverSettings(), x0: np.ndarray | None = None,
          raise_on_failure: bool = True) -> GmresResult:
    """Restarted GMRES with Givens rotations.

    Stops when ``||b - A x|| <= eta_ls ||b||``.  ``residuals`` holds the
    relative residual after every inner iteration (the first entry is the
    initial residual).
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return GmresResult(np.zeros_like(b), [0.0], 0, True)
    tol = settings.eta_ls * bnorm
    m = settings.restart
    r = b - apply(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    history = [beta / bnorm]
    it = 0
    while beta > tol and it < settings.max_iter:
        V = np.empty((m + 1, b.size))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        e = np.zeros(m + 1)
        e[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(m):
            w = np.array(apply(V[k]), dtype=float)  # own copy: apply may return its input
            # modified Gram-Schmidt, repeated once for stability
            for _ in range(2):
                for j in range(k + 1):
                    h = np.dot(V[j], w)
                    H[j, k] += h
                    w -= h * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0:
                V[k + 1] = w / H[k + 1, k]
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            denom = math.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / denom if denom else 1.0
            sn[k] = H[k + 1, k] / denom if denom else 0.0
            H[k, k] = denom
            H[k + 1, k] = 0.0
            e[k + 1] = -sn[k] * e[k]
            e[k] = cs[k] * e[k]
            it += 1
            k_used = k + 1
            history.append(abs(e[k + 1]) / bnorm)
            if abs(e[k + 1]) <= tol or it >= settings.max_iter or denom == 0:
                break
        y = np.linalg.solve(np.triu(H[:k_used, :k_used]), e[:k_used])
        x += V[:k_used].T @ y
        r = b - apply(x)
        beta = np.linalg.norm(r)
        history[-1] = beta / bnorm
    converged = beta <= tol
    if not converged and raise_on_failure:
        raise ConvergenceError(f"GMRES stopped after {it} iterations at relative residual "
                               f"{beta / bnorm:.3e}", beta / bnorm)
    return GmresResult(x, history, it, converged)


class ScalarProblem(Protocol):
    """A concave functional of the exterior coefficient."""

    bounds: tuple[float, float]

    def value(self, a: float) -> float: ...

    def value_and_grad(self, a: float) -> tuple[float, float]: ...


@dataclass
class FixedPointResult:
    a: float
    history: list
    values: list
    iterations: int
    damped: bool
    converged: bool


@dataclass
class MaximizeResult:
    a: float
    value: float
    gradient: float
    history: list = field(default_factory=list)
    iterations: int = 0
    evaluations: int = 0
    boundary: bool = False
    converged: bool = True


def _clamp(a, bounds):
    return min(max(a, bounds[0]), bounds[1])


def fixed_point_a3(problem: ScalarProblem, a_init: float,
                   settings: SolverSettings = SolverSettings()) -> FixedPointResult:
    """Iterate ``a <- J(a)`` (clamped to the bounds) until consecutive iterates agree to ``eta_opt``.

    If the step lengths stop decreasing over ``stall_window`` iterations the
    iteration switches to the damped map ``a <- (1 - theta) a + theta J(a)``.
    """
    lo, hi = problem.bounds
    if not lo <= a_init <= hi:
        raise ValueError(f"initial value {a_init} outside [{lo}, {hi}]")
    a = float(a_init)
    history = [a]
    values = []
    steps = []
    theta = 1.0
    damped = False
    for it in range(1, settings.max_outer + 1):
        J = problem.value(a)
        values.append(J)
        new = _clamp((1 - theta) * a + theta * J, (lo, hi))
        step = abs(new - a)
        a = new
        history.append(a)
        steps.append(step)
        if step <= settings.eta_opt:
            return FixedPointResult(a, history, values, it, damped, True)
        w = settings.stall_window
        if (not damped and len(steps) > w
                and all(steps[-k] >= steps[-k - 1] for k in range(1, w + 1))):
            damped = True
            theta = settings.damping
    return FixedPointResult(a, history, values, settings.max_outer, damped, False)


def maximize_a1(problem: ScalarProblem, a_init: float,
                settings: SolverSettings = SolverSettings()) -> MaximizeResult:
    """Projected gradient ascent with Armijo backtracking.

    The first trial step is ``initial_step``; later ones use the secant
    estimate of the curvature (``-da/dg``) when it is positive.  Stops when
    the accepted step is below ``eta_opt``.
    """
    lo, hi = problem.bounds
    if not lo <= a_init <= hi:
        raise ValueError(f"initial value {a_init} outside [{lo}, {hi}]")
    a = float(a_init)
    J, g = problem.value_and_grad(a)
    evals = 1
    history = [(a, J, g)]
    prev = None
    for it in range(1, settings.max_outer + 1):
        t = settings.initial_step
        if settings.secant_steps and prev is not None:
            da, dg = a - prev[0], g - prev[1]
            if dg != 0 and -da / dg > 0:
                t = -da / dg
        trial = _clamp(a + t * g, (lo, hi))
        if trial == a:
            # clamped at a bound with the gradient pointing outward
            return MaximizeResult(a, J, g, history, it - 1, evals, boundary=g != 0)
        while True:
            Jt = problem.value(trial)
            evals += 1
            if Jt >= J + settings.armijo_c * g * (trial - a):
                break
            t *= settings.backtrack
            trial = _clamp(a + t * g, (lo, hi))
            if abs(trial - a) <= 1e-3 * settings.eta_opt:
                # no ascent possible at this resolution; a is stationary to tolerance
                return MaximizeResult(a, J, g, history, it, evals, boundary=False)
        step = abs(trial - a)
        prev = (a, g)
        a = trial
        J, g = problem.value_and_grad(a)
        evals += 1
        history.append((a, J, g))
        if step <= settings.eta_opt:
            at_bound = a in (lo, hi) and (g > 0) == (a == hi)
            return MaximizeResult(a, J, g, history, it, evals, boundary=at_bound)
    return MaximizeResult(a, J, g, history, settings.max_outer, evals, converged=False)
