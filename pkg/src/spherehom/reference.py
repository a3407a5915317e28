"""Independent oracles: concentric-spheres closed form, dilute limit, dense solve.

Concentric solution
-------------------
For one inclusion of radius ``r1`` centred in ``B_R`` the corrector is
``w = phi(r) (p . x/|x|)`` with ``phi = c r + d / r**2`` in each region
(core, shell, exterior; ``d = 0`` in the core, ``c = 0`` outside).  Matching
``phi`` and the flux ``a (1 + phi')`` across ``r = r1`` and ``r = R`` gives,
with ``beta = (a1 - a0)/(a1 + 2 a0)`` and ``q = (r1/R)**3``,

    X      = 3 a_inf / (a0 (1 + 2 beta q) + 2 a_inf (1 - beta q))
    c_core = X - 1 - beta X
    d_out  = R**3 (X - 1 - beta q X)

and the energy evaluates to

    J = q a1 + (1 - q) a0 + (a1 - a0) q c_core + (a0 - a_inf) d_out / R**3.

With ``q = 0`` this reduces to ``a0 - (a0 - a_inf)**2 / (a0 + 2 a_inf)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .operator import SurfaceCoeffs, SystemContext, assemble_dense, assemble_f

__all__ = ["ConcentricSpec", "concentric_energy", "dilute_estimate", "dense_solve",
           "SingularSystemError"]


class SingularSystemError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConcentricSpec:
    r1: float
    a1: float
    a0: float
    R: float
    a_inf: float

    def __post_init__(self):
        if not 0 < self.r1 < self.R:
            raise ValueError("need 0 < r1 < R")
        if min(self.a1, self.a0, self.a_inf) <= 0:
            raise ValueError("coefficients must be positive")


def concentric_energy(spec: ConcentricSpec) -> float:
    """Closed-form energy for a single centred inclusion (any unit direction)."""
    a0, a1, ainf = spec.a0, spec.a1, spec.a_inf
    beta = (a1 - a0) / (a1 + 2 * a0)
    q = (spec.r1 / spec.R) ** 3
    X = 3 * ainf / (a0 * (1 + 2 * beta * q) + 2 * ainf * (1 - beta * q))
    c_core = X - 1 - beta * X
    d_scaled = X - 1 - beta * q * X
    return float(q * a1 + (1 - q) * a0 + (a1 - a0) * q * c_core + (a0 - ainf) * d_scaled)


def dilute_estimate(phi: float, a_inclusion: float, a_matrix: float) -> float:
    """First-order (Maxwell) effective coefficient for volume fraction ``phi``."""
    return a_matrix * (1 + 3 * phi * (a_inclusion - a_matrix) / (a_inclusion + 2 * a_matrix))


def dense_solve(ctx: SystemContext) -> SurfaceCoeffs:
    """Solve ``K lambda = f`` by LU factorization of the dense matrix."""
    K = assemble_dense(ctx)
    f = assemble_f(ctx).flat
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - assembly bug guard
        raise SingularSystemError(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-14 * np.abs(K).max()):
        raise SingularSystemError("dense system is numerically singular")
    return SurfaceCoeffs.from_flat(scipy.linalg.lu_solve(lu, f), ctx.N)
