"""Inclusion configurations: generation, validation and the clip-and-rescale step.

A configuration holds ``M`` non-overlapping spherical inclusions inside the
ball ``B_R`` centred at the origin.  Geometry arrays are stored columnar
(``centers``, ``radii``, ``coefficients``) because every consumer downstream
works on whole arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Inclusion",
    "Configuration",
    "LatticeSpec",
    "RandomMediumSpec",
    "ClipInfo",
    "GeometryError",
    "OverlapError",
    "SaturationError",
    "lens_volume",
    "generate_lattice",
    "generate_random",
    "clip_and_rescale",
    "validate",
    "save_config",
    "load_config",
    "RNG_NAME",
]

RNG_NAME = "numpy.PCG64"


class GeometryError(ValueError):
    pass


class OverlapError(GeometryError):
    """Rescaled inclusions overlap each other or leave the outer ball."""


class SaturationError(GeometryError):
    """Random insertion exhausted its attempt budget."""


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float, float]
    radius: float
    coefficient: float

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError("inclusion radius must be positive")
        if not self.coefficient > 0:
            raise GeometryError("inclusion coefficient must be positive")


@dataclass(frozen=True, eq=False)
class Configuration:
    """Spherical inclusions in a matrix of coefficient ``a0`` inside ``B_R``.

    ``outer_radius`` may be ``None`` for raw generated media that have not
    been clipped to a ball yet.
    """

    centers: np.ndarray
    radii: np.ndarray
    coefficients: np.ndarray
    matrix_coefficient: float
    outer_radius: float | None = None
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        radii = np.asarray(self.radii, dtype=float).reshape(-1)
        coeffs = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if not (len(centers) == len(radii) == len(coeffs)):
            raise GeometryError("centers, radii and coefficients differ in length")
        if np.any(radii <= 0) or np.any(coeffs <= 0):
            raise GeometryError("radii and coefficients must be positive")
        if not self.matrix_coefficient > 0:
            raise GeometryError("matrix coefficient must be positive")
        if self.outer_radius is not None and not self.outer_radius > 0:
            raise GeometryError("outer radius must be positive")
        for arr in (centers, radii, coeffs):
            arr.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def M(self) -> int:
        return len(self.radii)

    @property
    def R(self) -> float:
        if self.outer_radius is None:
            raise GeometryError("configuration has no outer radius; clip it first")
        return float(self.outer_radius)

    @property
    def signs(self) -> np.ndarray:
        """Orientation per sphere: -1 for inclusions, +1 for the outer sphere."""
        return np.concatenate([-np.ones(self.M), [1.0]])

    @property
    def inclusions(self) -> list[Inclusion]:
        return [Inclusion(tuple(c), float(r), float(a))
                for c, r, a in zip(self.centers, self.radii, self.coefficients)]

    def coefficient_bounds(self) -> tuple[float, float]:
        vals = np.concatenate([[self.matrix_coefficient], self.coefficients])
        return float(vals.min()), float(vals.max())

    def ball_volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.R ** 3

    def inclusion_volumes(self) -> np.ndarray:
        return 4.0 / 3.0 * math.pi * self.radii ** 3

    def volume_fraction(self) -> float:
        return float(self.inclusion_volumes().sum() / self.ball_volume())

    def arithmetic_mean(self) -> float:
        vol = self.inclusion_volumes()
        total = self.ball_volume()
        return float((self.matrix_coefficient * (total - vol.sum())
                      + np.dot(self.coefficients, vol)) / total)

    def harmonic_mean(self) -> float:
        vol = self.inclusion_volumes()
        total = self.ball_volume()
        inv = (total - vol.sum()) / self.matrix_coefficient + np.sum(vol / self.coefficients)
        return float(total / inv)

    def with_coefficients(self, coefficients, matrix_coefficient=None) -> "Configuration":
        return replace(self, coefficients=np.asarray(coefficients, dtype=float),
                       matrix_coefficient=(self.matrix_coefficient if matrix_coefficient is None
                                           else matrix_coefficient))


@dataclass(frozen=True)
class LatticeSpec:
    inclusion_radius: float
    inclusion_coefficient: float
    matrix_coefficient: float = 1.0
    lattice: str = "cubic"

    def __post_init__(self):
        if self.lattice != "cubic":
            raise GeometryError(f"unsupported lattice {self.lattice!r}")
        if not 0 < self.inclusion_radius < 0.5:
            raise GeometryError("lattice inclusions need 0 < radius < 0.5 to stay disjoint")
        if not self.inclusion_coefficient > 0 or not self.matrix_coefficient > 0:
            raise GeometryError("coefficients must be positive")


@dataclass(frozen=True)
class RandomMediumSpec:
    radius_range: tuple[float, float]
    coefficient_range: tuple[float, float]
    min_gap: float
    density: float
    seed: int
    matrix_coefficient: float = 1.0
    max_attempts: int | None = None

    def __post_init__(self):
        rlo, rhi = self.radius_range
        clo, chi = self.coefficient_range
        if not 0 < rlo <= rhi:
            raise GeometryError("radius range must lie in (0, inf)")
        if not 0 < clo <= chi:
            raise GeometryError("coefficient range must lie in (0, inf)")
        if self.min_gap < 0 or self.density < 0:
            raise GeometryError("gap and density must be nonnegative")


def generate_lattice(spec: LatticeSpec, generation_radius: float) -> Configuration:
    """All balls centred on Z^3 that meet the open ball of the given radius."""
    if not generation_radius > spec.inclusion_radius:
        raise GeometryError("generation radius must exceed the inclusion radius")
    reach = generation_radius + spec.inclusion_radius
    n = int(math.floor(reach))
    axis = np.arange(-n, n + 1, dtype=float)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.linalg.norm(grid, axis=1)
    centers = grid[dist < reach]
    m = len(centers)
    return Configuration(centers, np.full(m, spec.inclusion_radius),
                         np.full(m, spec.inclusion_coefficient), spec.matrix_coefficient,
                         provenance={"generator": "lattice", "lattice": spec.lattice,
                                     "radius": spec.inclusion_radius,
                                     "coefficient": spec.inclusion_coefficient,
                                     "generation_radius": generation_radius})


def generate_random(spec: RandomMediumSpec, generation_radius: float) -> Configuration:
    """Random sequential insertion of non-overlapping balls.

    Centres are uniform in the generation ball, radii and coefficients uniform
    in their ranges.  A candidate is rejected when its surface-to-surface
    distance to an accepted inclusion is below ``min_gap``.
    """
    volume = 4.0 / 3.0 * math.pi * generation_radius ** 3
    target = int(round(spec.density * volume))
    budget = spec.max_attempts if spec.max_attempts is not None else max(1000, 200 * target)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    rlo, rhi = spec.radius_range
    clo, chi = spec.coefficient_range
    reach = 2 * rhi + spec.min_gap
    cell = reach
    grid: dict[tuple[int, int, int], list[int]] = {}
    centers = np.empty((target, 3))
    radii = np.empty(target)
    coeffs = np.empty(target)
    count = 0
    attempts = 0
    batch = 4096
    while count < target:
        # draw in batches; the stream order is fixed, so results depend only on the seed
        dirs = rng.normal(size=(batch, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        rad = generation_radius * rng.random(batch) ** (1.0 / 3.0)
        cand = dirs * rad[:, None]
        cand_r = rng.uniform(rlo, rhi, batch)
        cand_a = rng.uniform(clo, chi, batch)
        for k in range(batch):
            if count >= target:
                break
            attempts += 1
            if attempts > budget:
                raise SaturationError(f"placed {count} of {target} inclusions after "
                                      f"{budget} attempts")
            c = cand[k]
            key = tuple(np.floor(c / cell).astype(int))
            ok = True
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        for j in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                            d = c - centers[j]
                            lim = cand_r[k] + radii[j] + spec.min_gap
                            if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < lim * lim:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                centers[count] = c
                radii[count] = cand_r[k]
                coeffs[count] = cand_a[k]
                grid.setdefault(key, []).append(count)
                count += 1
    return Configuration(centers, radii, coeffs, spec.matrix_coefficient, seed=spec.seed,
                         provenance={"generator": "random", "rng": RNG_NAME, "seed": spec.seed,
                                     "radius_range": list(spec.radius_range),
                                     "coefficient_range": list(spec.coefficient_range),
                                     "min_gap": spec.min_gap, "density": spec.density,
                                     "generation_radius": generation_radius,
                                     "attempts": attempts})


def lens_volume(R: float, r, d) -> np.ndarray:
    """Volume of ``B_R(0) ∩ B_r(x)`` with ``|x| = d`` (closed form)."""
    r = np.asarray(r, dtype=float)
    d = np.asarray(d, dtype=float)
    r, d = np.broadcast_arrays(r, d)
    out = np.zeros(r.shape)
    inside = d + r <= R
    contains = d + R <= r
    disjoint = d >= R + r
    out[inside] = 4.0 / 3.0 * np.pi * r[inside] ** 3
    out[contains & ~inside] = 4.0 / 3.0 * np.pi * R ** 3
    lens = ~(inside | contains | disjoint)
    rl, dl = r[lens], d[lens]
    out[lens] = (np.pi * (R + rl - dl) ** 2
                 * (dl * dl + 2 * dl * rl - 3 * rl * rl + 2 * dl * R + 6 * rl * R - 3 * R * R)
                 / (12.0 * dl))
    return out


@dataclass(frozen=True)
class ClipInfo:
    gamma: float
    gamma_requested: float
    M_kept: int
    M_deleted: int
    shrunk: bool = False
    clamped: int = 0


def _rescale_violations(centers, radii, R) -> bool:
    if len(radii) == 0:
        return False
    if np.any(np.linalg.norm(centers, axis=1) + radii >= R):
        return True
    return _has_overlap(centers, radii, 0.0)


def _has_overlap(centers, radii, eta) -> bool:
    return len(_pair_violations(centers, radii, eta)) > 0


def _pair_violations(centers, radii, eta):
    if len(radii) < 2:
        return []
    tree = cKDTree(centers)
    pairs = tree.query_pairs(2 * radii.max() + eta, output_type="ndarray")
    if len(pairs) == 0:
        return []
    i, j = pairs[:, 0], pairs[:, 1]
    gap = np.linalg.norm(centers[i] - centers[j], axis=1) - radii[i] - radii[j]
    bad = gap < eta
    return [(int(a), int(b), float(g)) for a, b, g in zip(i[bad], j[bad], gap[bad])]


def clip_and_rescale(config: Configuration, R: float, *, scale: bool = True,
                     on_overlap: str = "raise") -> tuple[Configuration, ClipInfo]:
    """Restrict a medium to ``B_R`` and inflate the kept inclusions.

    Inclusions crossing the sphere of radius ``R`` are deleted; those strictly
    inside are kept and their radii multiplied by ``gamma``, chosen so that
    the kept volume after rescaling equals the kept volume plus the parts of
    the deleted inclusions lying inside ``B_R``.

    ``on_overlap`` selects what happens when the inflated balls overlap or
    leave ``B_R``: ``"raise"`` (default) aborts, ``"shrink"`` bisects for the
    largest feasible common factor not above ``gamma``, and ``"clamp"`` keeps
    ``gamma`` but lets a ball that would cross the outer sphere grow only by
    half of its original gap to it (pair overlaps then fall back to shrink).
    """
    if not R > 0:
        raise GeometryError("R must be positive")
    if on_overlap not in ("raise", "shrink", "clamp"):
        raise ValueError("on_overlap must be 'raise', 'shrink' or 'clamp'")
    dist = np.linalg.norm(config.centers, axis=1)
    kept = dist + config.radii < R
    boundary = ~kept & (dist - config.radii < R)
    centers = config.centers[kept]
    radii = config.radii[kept]
    coeffs = config.coefficients[kept]
    kept_vol = np.sum(4.0 / 3.0 * np.pi * radii ** 3)
    lens = lens_volume(R, config.radii[boundary], dist[boundary]).sum()
    if scale and kept_vol > 0:
        gamma = float(((kept_vol + lens) / kept_vol) ** (1.0 / 3.0))
    else:
        gamma = 1.0
    requested = gamma
    shrunk = False
    clamped = 0
    new_radii = radii * gamma
    if gamma > 1.0 and _rescale_violations(centers, new_radii, R):
        if on_overlap == "raise":
            raise OverlapError(f"rescaling by gamma={gamma:.6f} at R={R} creates overlaps")
        if on_overlap == "clamp":
            room = R - np.linalg.norm(centers, axis=1) - radii
            capped = np.minimum(new_radii, radii + 0.5 * room)
            clamped = int(np.count_nonzero(capped < new_radii))
            if not _has_overlap(centers, capped, 0.0):
                new_radii = capped
        if _rescale_violations(centers, new_radii, R):
            if _rescale_violations(centers, radii, R):
                raise OverlapError("configuration overlaps even without rescaling")
            lo, hi = 1.0, gamma
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if _rescale_violations(centers, radii * mid, R):
                    hi = mid
                else:
                    lo = mid
            gamma = lo
            new_radii = radii * gamma
            clamped = 0
            shrunk = True
    prov = dict(config.provenance)
    prov.update({"clip_R": R, "gamma": gamma, "scaled": scale, "clamped": clamped})
    out = Configuration(centers, new_radii, coeffs, config.matrix_coefficient, R,
                        seed=config.seed, provenance=prov)
    return out, ClipInfo(gamma, requested, int(kept.sum()), int(boundary.sum()), shrunk, clamped)


def validate(config: Configuration, eta: float = 0.0) -> list[tuple]:
    """Pairs with surface gap below ``eta`` and inclusions closer than ``eta`` to the outer sphere.

    Entries are ``("pair", i, j, gap)`` or ``("boundary", i, gap)``; an empty
    list means the configuration is valid.
    """
    out: list[tuple] = [("pair", i, j, g)
                        for i, j, g in _pair_violations(config.centers, config.radii, eta)]
    if config.outer_radius is not None and config.M:
        gap = config.R - np.linalg.norm(config.centers, axis=1) - config.radii
        for i in np.flatnonzero(gap < eta):
            out.append(("boundary", int(i), float(gap[i])))
    return out


def _config_to_dict(config: Configuration) -> dict[str, Any]:
    return {
        "a0": float(config.matrix_coefficient),
        "R": None if config.outer_radius is None else float(config.outer_radius),
        "seed": config.seed,
        "provenance": config.provenance,
        "inclusions": [{"center": [float(v) for v in c], "radius": float(r), "coeff": float(a)}
                       for c, r, a in zip(config.centers, config.radii, config.coefficients)],
    }


def save_config(config: Configuration, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(_config_to_dict(config), indent=1))


def load_config(path) -> Configuration:
    data = json.loads(Path(path).read_text())
    inc = data.get("inclusions", [])
    centers = np.array([i["center"] for i in inc], dtype=float).reshape(-1, 3)
    return Configuration(centers, np.array([i["radius"] for i in inc], dtype=float),
                         np.array([i["coeff"] for i in inc], dtype=float), float(data["a0"]),
                         data.get("R"), seed=data.get("seed"),
                         provenance=data.get("provenance") or {})
