"""Real spherical harmonics and Lebedev quadrature on the unit sphere.

Harmonics are orthonormal on the unit sphere, real-valued and carry no
Condon-Shortley phase.  Degree-one harmonics are proportional to the
Cartesian coordinates::

    Y(1,-1) ~ y,   Y(1,0) ~ z,   Y(1,1) ~ x

Coefficient vectors use the flat index ``l*l + l + m`` (degree-major, order
ascending), so a cutoff ``L`` gives ``(L+1)**2`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from math import lgamma, log, pi, sqrt

import numpy as np

__all__ = [
    "SphIndex",
    "LebedevRule",
    "nharm",
    "harm_index",
    "degrees",
    "solid_harmonics",
    "irregular_harmonics",
    "sph_harmonics",
    "eval_harmonic",
    "lebedev",
    "available_degrees",
    "default_rule",
    "discrete_inner",
]


@dataclass(frozen=True)
class SphIndex:
    degree: int
    order: int

    def __post_init__(self):
        if self.degree < 0 or abs(self.order) > self.degree:
            raise ValueError(f"invalid harmonic index ({self.degree}, {self.order})")

    @property
    def flat(self) -> int:
        return harm_index(self.degree, self.order)


def nharm(L: int) -> int:
    return (L + 1) * (L + 1)


def harm_index(l: int, m: int) -> int:
    return l * l + l + m


@lru_cache(maxsize=None)
def degrees(L: int) -> np.ndarray:
    """Degree of every flat index up to cutoff ``L``."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(L + 1)])


@lru_cache(maxsize=None)
def _recurrence_tables(L: int):
    sectoral = np.empty(L + 1)
    for m in range(L + 1):
        # log of (2m-1)!! * sqrt((2m+1) / (4 pi (2m)!))
        logc = lgamma(2 * m + 1) - m * log(2.0) - lgamma(m + 1)
        logc += 0.5 * (log(2 * m + 1) - log(4 * pi) - lgamma(2 * m + 1))
        sectoral[m] = np.exp(logc) * (sqrt(2.0) if m > 0 else 1.0)
    a = np.zeros((L + 1, L + 1))
    b = np.zeros((L + 1, L + 1))
    for m in range(L + 1):
        for l in range(m + 2, L + 1):
            a[l, m] = sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b[l, m] = sqrt((2.0 * l + 1.0) * ((l - 1.0) ** 2 - m * m)
                           / ((2.0 * l - 3.0) * (l * l - m * m)))
    return sectoral, a, b


def solid_harmonics(x: np.ndarray, L: int) -> np.ndarray:
    """Regular solid harmonics ``|x|**l * Y_lm(x/|x|)`` for all ``l <= L``.

    Evaluated as polynomials in the Cartesian coordinates, so points at the
    origin are fine.  ``x`` has shape ``(..., 3)``; the result has shape
    ``(..., (L+1)**2)``.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    pts = x.reshape(-1, 3)
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    r2 = X * X + Y * Y + Z * Z
    sectoral, a, b = _recurrence_tables(L)
    out = np.empty((pts.shape[0], nharm(L)))
    cm = np.ones_like(X)
    sm = np.zeros_like(X)
    for m in range(L + 1):
        p_prev2 = None
        p_prev = np.full_like(X, sectoral[m])
        for l in range(m, L + 1):
            if l == m:
                p = p_prev
            elif l == m + 1:
                p = sqrt(2 * m + 3.0) * Z * p_prev
            else:
                p = a[l, m] * Z * p_prev - b[l, m] * r2 * p_prev2
            if l > m:
                p_prev2, p_prev = p_prev, p
            out[:, l * l + l + m] = p * cm
            if m > 0:
                out[:, l * l + l - m] = p * sm
        cm, sm = X * cm - Y * sm, X * sm + Y * cm
    return out.reshape(shape + (nharm(L),))


def irregular_harmonics(x: np.ndarray, L: int) -> np.ndarray:
    """Irregular solid harmonics ``Y_lm(x/|x|) / |x|**(l+1)``."""
    x = np.asarray(x, dtype=float)
    r2 = np.einsum("...i,...i->...", x, x)
    if np.any(r2 == 0.0):
        raise ValueError("irregular harmonics are singular at the origin")
    R = solid_harmonics(x, L)
    r = np.sqrt(r2)[..., None]
    powers = r ** (2 * degrees(L) + 1)
    return R / powers


def sph_harmonics(s: np.ndarray, L: int) -> np.ndarray:
    """``Y_lm`` at unit vectors ``s`` (shape ``(..., 3)``)."""
    return solid_harmonics(s, L)


def eval_harmonic(idx: SphIndex, s, tol: float = 1e-10) -> float:
    s = np.asarray(s, dtype=float)
    norm = np.linalg.norm(s)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"expected a unit vector, got |s| = {norm}")
    return float(solid_harmonics(s, idx.degree)[idx.flat])


@dataclass(frozen=True)
class LebedevRule:
    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@lru_cache(maxsize=1)
def _table():
    with resources.files("spherehom.data").joinpath("lebedev.npz").open("rb") as fh:
        data = np.load(fh)
        rules = {int(k.split("_")[1]): (data[k], data["weights_" + k.split("_")[1]])
                 for k in data.files if k.startswith("points_")}
    # rules 13, 25 and 27 carry negative weights; skip them
    return {d: r for d, r in rules.items() if np.all(r[1] > 0)}


def available_degrees() -> list[int]:
    return sorted(_table())


@lru_cache(maxsize=None)
def lebedev(min_exact_degree: int) -> LebedevRule:
    """Smallest tabulated Lebedev rule exact for polynomials of the given degree."""
    table = _table()
    for deg in sorted(table):
        if deg >= min_exact_degree:
            pts, w = table[deg]
            pts.setflags(write=False)
            w.setflags(write=False)
            return LebedevRule(pts, w, deg)
    raise ValueError(f"no tabulated Lebedev rule reaches degree {min_exact_degree}"
                     f" (max {max(table)})")


def default_rule(N: int) -> LebedevRule:
    # +2 margin over the exact Galerkin mass products, for the ratio terms
    return lebedev(2 * N + 2)


def discrete_inner(rule: LebedevRule, u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (rule.size,) or v.shape != (rule.size,):
        raise ValueError("value arrays must match the rule size")
    return float(np.sum(rule.weights * u * v))
