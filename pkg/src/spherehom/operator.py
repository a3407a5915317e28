"""Galerkin system of the embedded corrector problem on a union of spheres.

Unknowns are real-harmonic coefficients of the trace on every sphere, stored
sphere-major: inclusions ``0..M-1`` then the outer sphere as the last block,
each block indexed by ``l*l + l + m`` up to the cutoff ``N``.  Arrays of
shape ``(M + 1, (N + 1)**2)`` are used internally; flat vectors are their
C-order ravel.

The system matrix factors as ``K = I - B Sigma`` where ``B`` is the scaled
single-layer operator projected on the harmonics (``Lambda S`` in the
block notation) and ``Sigma`` is diagonal.  ``B`` splits into

* analytic diagonal blocks ``4 pi r_i / (2l + 1)``,
* the inclusion-inclusion block (dense matrix or fast multipole plan),
* the outer column and outer row, always treated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Configuration
from .harmonics import (
    LebedevRule,
    default_rule,
    degrees,
    irregular_harmonics,
    nharm,
    solid_harmonics,
    sph_harmonics,
)

__all__ = [
    "SurfaceCoeffs",
    "Discretization",
    "SystemContext",
    "DenseInteraction",
    "BudgetError",
    "direction_coefficients",
    "rhs_g",
    "assemble_f",
    "apply_K",
    "apply_K_transpose",
    "energy",
    "denergy_da",
    "assemble_dense",
    "DENSE_BUDGET",
    "psi",
    "dpsi_da",
    "df_da",
    "dK_lambda",
]

# largest dense system dimension we agree to build
DENSE_BUDGET = 20000

_SQ = math.sqrt(4.0 * math.pi / 3.0)


class BudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class SurfaceCoeffs:
    """Per-sphere harmonic coefficients, inclusions first, outer sphere last."""

    blocks: np.ndarray
    N: int

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim != 2 or blocks.shape[1] != nharm(self.N):
            raise ValueError(f"blocks must have shape (M+1, {nharm(self.N)})")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_flat(cls, vec, N: int) -> "SurfaceCoeffs":
        return cls(np.asarray(vec, dtype=float).reshape(-1, nharm(N)), N)

    @property
    def flat(self) -> np.ndarray:
        return self.blocks.ravel()

    @property
    def outer(self) -> np.ndarray:
        return self.blocks[-1]

    @property
    def inclusions(self) -> np.ndarray:
        return self.blocks[:-1]


def direction_coefficients(p) -> np.ndarray:
    """Degree-one harmonic coefficients of the unit vector ``p``, ordered m = -1, 0, 1."""
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or abs(np.linalg.norm(p) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit 3-vector")
    return np.array([p[1], p[2], p[0]])


class DenseInteraction:
    """Inclusion-inclusion part of ``B`` as an explicit matrix (self blocks excluded)."""

    exact_transpose = True

    def __init__(self, matrix: np.ndarray, nh: int):
        self.matrix = matrix
        self.nh = nh

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix @ x.ravel()).reshape(-1, self.nh)

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ x.ravel()).reshape(-1, self.nh)


def _source_scale(radii: np.ndarray, N: int) -> np.ndarray:
    """``4 pi r^(l+2) / (2l+1)``: momentum per unit coefficient of an inclusion source."""
    deg = degrees(N)
    return 4.0 * np.pi * radii[:, None] ** (deg + 2) / (2 * deg + 1)


def _inclusion_block_rows(centers, radii, N, rule, targets_idx, self_mode="zero"):
    """Rows of ``B`` for the given target inclusions against all inclusion sources.

    Returns an array of shape ``(len(targets_idx), nh, M, nh)``.  ``self_mode``
    chooses the self block: ``"zero"`` or ``"quadrature"`` (the single layer
    evaluated on the sphere's own nodes).
    """
    nh = nharm(N)
    M = len(radii)
    proj = (rule.weights[:, None] * sph_harmonics(rule.points, N)).T  # (nh, Ng)
    scale = _source_scale(radii, N)  # (M, nh)
    out = np.empty((len(targets_idx), nh, M, nh))
    for row, i in enumerate(targets_idx):
        nodes = centers[i] + radii[i] * rule.points  # (Ng, 3)
        diff = nodes[:, None, :] - centers[None, :, :]  # (Ng, M, 3)
        diff[:, i, :] = rule.points  # placeholder to avoid the singular origin
        irr = irregular_harmonics(diff, N) * scale[None, :, :]
        if self_mode == "quadrature":
            irr[:, i, :] = irregular_harmonics(radii[i] * rule.points, N) * scale[i]
        else:
            irr[:, i, :] = 0.0
        out[row] = np.einsum("kn,njq->kjq", proj, irr)
    return out


@dataclass(eq=False)
class Discretization:
    """Geometry-level data shared by every ``a_inf`` and direction.

    ``backend`` is ``"dense"`` (explicit inclusion-inclusion matrix) or
    ``"fmm"`` (fast multipole plan).  ``outer_rule`` optionally uses a finer
    quadrature on the outer sphere.
    """

    config: Configuration
    N: int
    rule: LebedevRule | None = None
    backend: str = "dense"
    fmm_params: object = None
    outer_rule: LebedevRule | None = None
    diagonal: str = "analytic"
    interaction: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("cutoff N must be nonnegative")
        if self.rule is None:
            self.rule = default_rule(self.N)
        if self.outer_rule is None:
            self.outer_rule = self.rule
        if self.backend not in ("dense", "fmm"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.diagonal not in ("analytic", "quadrature"):
            raise ValueError("diagonal must be 'analytic' or 'quadrature'")
        cfg = self.config
        N = self.N
        self.nh = nharm(N)
        self.M = cfg.M
        self.R = R = cfg.R
        self.a0 = float(cfg.matrix_coefficient)
        self.centers = np.asarray(cfg.centers)
        self.radii = np.asarray(cfg.radii)
        self.coeffs = np.asarray(cfg.coefficients)
        self.all_radii = np.concatenate([self.radii, [R]])
        self.signs = cfg.signs
        deg = degrees(N)
        self.deg = deg
        self.diag = 4.0 * np.pi * self.all_radii[:, None] / (2 * deg + 1)  # (M+1, nh)
        # Sigma for the inclusions does not depend on a_inf
        self.sigma_inc = ((self.a0 - self.coeffs)[:, None] / (2 * self.a0)
                          * (2 * deg + 1 - 1.0)[None, :] / (4 * np.pi * self.radii[:, None]))
        self.ball_volume = 4.0 / 3.0 * math.pi * R ** 3
        vol = 4.0 / 3.0 * math.pi * self.radii ** 3
        self.volume_term = float((self.a0 * (self.ball_volume - vol.sum())
                                  + np.dot(self.coeffs, vol)) / self.ball_volume)
        self._build_outer()
        if self.interaction is None:
            self.interaction = self._build_interaction()
        self.quadrature_diag = None
        if self.diagonal == "quadrature":
            self.quadrature_diag = self.quadrature_diagonal_blocks()

    # -- construction ---------------------------------------------------------

    def _build_outer(self):
        N, nh, R = self.N, self.nh, self.R
        deg = self.deg
        proj = (self.rule.weights[:, None] * sph_harmonics(self.rule.points, N)).T
        outer_scale = 4.0 * np.pi * R ** (1.0 - deg) / (2 * deg + 1)  # (nh,)
        # column: outer-sphere source seen from each inclusion's nodes, (M, nh, nh)
        if self.M:
            nodes = self.centers[:, None, :] + self.radii[:, None, None] * self.rule.points
            reg = solid_harmonics(nodes, N) * outer_scale  # (M, Ng, nh)
            self.outer_col = np.einsum("kn,inq->ikq", proj, reg)
            # row: inclusion sources seen from the outer sphere's nodes, (nh, M, nh)
            orule = self.outer_rule
            oproj = (orule.weights[:, None] * sph_harmonics(orule.points, N)).T
            onodes = R * orule.points
            scale = _source_scale(self.radii, N)
            row = np.empty((nh, self.M, nh))
            chunk = max(1, 2_000_000 // (len(onodes) * nh))
            for s in range(0, self.M, chunk):
                diff = onodes[:, None, :] - self.centers[None, s:s + chunk, :]
                irr = irregular_harmonics(diff, N) * scale[None, s:s + chunk]
                row[:, s:s + chunk] = np.einsum("kn,njq->kjq", oproj, irr)
            self.outer_row = row.reshape(nh, self.M * nh)
        else:
            self.outer_col = np.zeros((0, nh, nh))
            self.outer_row = np.zeros((nh, 0))

    def _build_interaction(self):
        if self.M == 0:
            return DenseInteraction(np.zeros((0, 0)), self.nh)
        if self.backend == "dense":
            if (self.M + 1) * self.nh > DENSE_BUDGET:
                raise BudgetError(f"dense system of size {(self.M + 1) * self.nh} exceeds "
                                  f"the budget {DENSE_BUDGET}")
            rows = _inclusion_block_rows(self.centers, self.radii, self.N, self.rule,
                                         range(self.M))
            return DenseInteraction(rows.reshape(self.M * self.nh, self.M * self.nh), self.nh)
        from .fmm import SphereFMM, FmmParams

        params = self.fmm_params if self.fmm_params is not None else FmmParams.default(self.N)
        return SphereFMM(self.centers, self.radii, self.N, self.rule, params)

    def quadrature_diagonal_blocks(self) -> np.ndarray:
        """Self blocks of ``B`` computed with the quadrature rule, shape ``(M+1, nh, nh)``."""
        N = self.N
        blocks = np.empty((self.M + 1, self.nh, self.nh))
        proj = (self.rule.weights[:, None] * sph_harmonics(self.rule.points, N)).T
        scale_inc = _source_scale(self.radii, N)
        for i in range(self.M):
            irr = irregular_harmonics(self.radii[i] * self.rule.points, N) * scale_inc[i]
            blocks[i] = proj @ irr
        oproj = (self.outer_rule.weights[:, None] * sph_harmonics(self.outer_rule.points, N)).T
        reg = solid_harmonics(self.R * self.outer_rule.points, N)
        blocks[-1] = oproj @ (reg * 4.0 * np.pi * self.R ** (1.0 - self.deg) / (2 * self.deg + 1))
        return blocks

    # -- B and its transpose --------------------------------------------------

    def _diag_apply(self, x: np.ndarray, transpose: bool) -> np.ndarray:
        if self.quadrature_diag is None:
            return self.diag * x
        sub = "iqk,iq->ik" if transpose else "ikq,iq->ik"
        return np.einsum(sub, self.quadrature_diag, x)

    def apply_B(self, x: np.ndarray) -> np.ndarray:
        """``B x`` for ``x`` of shape ``(M+1, nh)``."""
        y = self._diag_apply(x, False)
        if self.M:
            xi, xo = x[:-1], x[-1]
            y[:-1] += self.interaction.matvec(xi)
            y[:-1] += self.outer_col @ xo
            y[-1] += self.outer_row @ xi.ravel()
        return y

    def apply_B_transpose(self, x: np.ndarray, exact: bool | None = None) -> np.ndarray:
        """``B^T x``; the inclusion block uses its exact transpose when available.

        Otherwise the near-symmetry of ``r_i^2 B_ij`` is used:
        ``(B^T w)_i ~ r_i^2 (B (w / r^2))_i``.
        """
        y = self._diag_apply(x, True)
        if self.M:
            xi, xo = x[:-1], x[-1]
            use_exact = self.interaction.exact_transpose if exact is None else exact
            if use_exact:
                y[:-1] += self.interaction.rmatvec(xi)
            else:
                r2 = (self.radii ** 2)[:, None]
                y[:-1] += r2 * self.interaction.matvec(xi / r2)
            y[:-1] += (self.outer_row.T @ xo).reshape(self.M, self.nh)
            y[-1] += np.einsum("ikq,ik->q", self.outer_col, xi)
        return y

    def apply_outer_column(self, u: np.ndarray) -> np.ndarray:
        """``B`` applied to a vector supported on the outer block only."""
        y = np.zeros((self.M + 1, self.nh))
        if self.M:
            y[:-1] = self.outer_col @ u
        y[-1] = self._diag_apply(np.vstack([np.zeros((self.M, self.nh)), u]), False)[-1]
        return y


@dataclass(eq=False)
class SystemContext:
    """Discretization plus direction ``p`` and exterior coefficient ``a_inf``."""

    disc: Discretization
    p: np.ndarray
    a_inf: float

    def __post_init__(self):
        if not self.a_inf > 0:
            raise ValueError("a_inf must be positive")
        d = self.disc
        self.pvec = direction_coefficients(self.p)
        sig_out = (d.a0 - self.a_inf) / (2 * d.a0) * (2 * d.deg + 2.0) / (4 * np.pi * d.R)
        self.sigma = np.vstack([d.sigma_inc, sig_out[None, :]])
        self.Lambda = 1.0 / d.all_radii ** 2

    @property
    def N(self) -> int:
        return self.disc.N

    @property
    def shape(self) -> tuple[int, int]:
        return (self.disc.M + 1, self.disc.nh)

    def with_a_inf(self, a_inf: float) -> "SystemContext":
        return SystemContext(self.disc, self.p, a_inf)


def _blocks(ctx: SystemContext, v) -> np.ndarray:
    arr = v.blocks if isinstance(v, SurfaceCoeffs) else np.asarray(v, dtype=float)
    arr = arr.reshape(-1, ctx.disc.nh) if arr.ndim == 1 else arr
    if arr.shape != ctx.shape:
        raise ValueError(f"expected coefficients of shape {ctx.shape}, got {arr.shape}")
    return arr


def rhs_g(ctx: SystemContext) -> SurfaceCoeffs:
    """Degree-one coefficients of the jump data, per sphere."""
    d = ctx.disc
    a = np.concatenate([d.coeffs, [ctx.a_inf]])
    g = np.zeros(ctx.shape)
    if d.N >= 1:
        amp = -d.signs * (d.a0 - a) / (4 * np.pi * d.a0) * _SQ
        g[:, 1:4] = amp[:, None] * ctx.pvec[None, :]
    return SurfaceCoeffs(g, d.N)


def assemble_f(ctx: SystemContext) -> SurfaceCoeffs:
    """Right-hand side ``f = B g``."""
    return SurfaceCoeffs(ctx.disc.apply_B(rhs_g(ctx).blocks), ctx.N)


def apply_K(ctx: SystemContext, v) -> SurfaceCoeffs:
    x = _blocks(ctx, v)
    return SurfaceCoeffs(x - ctx.disc.apply_B(ctx.sigma * x), ctx.N)


def apply_K_transpose(ctx: SystemContext, v, exact: bool | None = None) -> SurfaceCoeffs:
    """``K^T v = v - Sigma B^T v``.

    With ``exact=None`` the backend's default is used: exact for the dense
    backend, the symmetric approximation of the inclusion block for the
    multipole backend.
    """
    x = _blocks(ctx, v)
    return SurfaceCoeffs(x - ctx.sigma * ctx.disc.apply_B_transpose(x, exact), ctx.N)


def psi(ctx: SystemContext) -> SurfaceCoeffs:
    d = ctx.disc
    factor = 4 * np.pi * d.a0 * d.all_radii ** 2 / d.ball_volume
    return SurfaceCoeffs(factor[:, None] * rhs_g(ctx).blocks, d.N)


def energy(ctx: SystemContext, lam) -> float:
    """Discrete energy: volume average of the coefficient minus ``<Psi, lambda>``."""
    lam = _blocks(ctx, lam)
    return float(ctx.disc.volume_term - np.vdot(psi(ctx).blocks, lam))


def dpsi_da(ctx: SystemContext) -> SurfaceCoeffs:
    d = ctx.disc
    out = np.zeros(ctx.shape)
    if d.N >= 1:
        out[-1, 1:4] = d.R ** 2 / d.ball_volume * _SQ * ctx.pvec
    return SurfaceCoeffs(out, d.N)


def dK_lambda(ctx: SystemContext, lam) -> np.ndarray:
    """``(dK/da_inf) lambda``; only the outer source column depends on ``a_inf``."""
    d = ctx.disc
    lam = _blocks(ctx, lam)
    dsig = -(d.deg + 1.0) / (4 * np.pi * d.R * d.a0)
    return -d.apply_outer_column(dsig * lam[-1])


def df_da(ctx: SystemContext) -> np.ndarray:
    d = ctx.disc
    u = np.zeros(d.nh)
    if d.N >= 1:
        u[1:4] = _SQ / (4 * np.pi * d.a0) * ctx.pvec
    return d.apply_outer_column(u)


def denergy_da(ctx: SystemContext, lam, s) -> float:
    """Adjoint derivative ``-<dPsi, lambda> - <s, h>`` with ``h = df - dK lambda``."""
    lam = _blocks(ctx, lam)
    s = _blocks(ctx, s)
    h = df_da(ctx) - dK_lambda(ctx, lam)
    return float(-np.vdot(dpsi_da(ctx).blocks, lam) - np.vdot(s, h))


def assemble_dense(ctx: SystemContext, diagonal: str | None = None) -> np.ndarray:
    """Explicit ``K`` for small systems.

    ``diagonal`` overrides the discretization's choice of analytic or
    quadrature self blocks.
    """
    d = ctx.disc
    n = (d.M + 1) * d.nh
    if n > DENSE_BUDGET:
        raise BudgetError(f"dense system of size {n} exceeds the budget {DENSE_BUDGET}")
    nh, M = d.nh, d.M
    B = np.zeros((n, n))
    if M:
        if isinstance(d.interaction, DenseInteraction):
            B[:M * nh, :M * nh] = d.interaction.matrix
        else:
            rows = _inclusion_block_rows(d.centers, d.radii, d.N, d.rule, range(M))
            B[:M * nh, :M * nh] = rows.reshape(M * nh, M * nh)
        for i in range(M):
            B[i * nh:(i + 1) * nh, M * nh:] = d.outer_col[i]
        B[M * nh:, :M * nh] = d.outer_row
    mode = diagonal or d.diagonal
    if mode == "quadrature":
        qd = d.quadrature_diag if d.quadrature_diag is not None else d.quadrature_diagonal_blocks()
        for i in range(M + 1):
            B[i * nh:(i + 1) * nh, i * nh:(i + 1) * nh] += qd[i]
    else:
        idx = np.arange(n)
        B[idx, idx] += d.diag.ravel()
    return np.eye(n) - B * ctx.sigma.ravel()[None, :]
