"""Fast multipole evaluation for point multipoles of arbitrary degree (Laplace kernel).

Sources are point multipoles: source ``j`` at ``x_j`` with momenta ``Phi_j``
over real harmonics of degree ``<= N`` produces

    V(x) = sum_j sum_k Phi_jk I_k(x - x_j),      I_k(x) = Y_k(x/|x|) / |x|**(l_k + 1).

Targets are clusters: a centre plus a linear functional of the potential at
a few points around it (point values, or the harmonic projection of the
potential on a sphere).  The tree is a uniform octree over all centres;
clusters in neighbouring leaves interact through precomputed dense blocks,
everything else through multipole and local expansions of degree ``P``.

Expansions are stored in box units: a box of edge ``h`` and centre ``c``
represents ``sum_q m_q I_q((x - c)/h)`` (multipole) and
``sum_q L_q R_q((x - c)/h)`` (local), so the translation matrices do not
depend on the level.  They are built once per order by projecting the
shifted harmonics on a Lebedev sphere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .harmonics import degrees, irregular_harmonics, lebedev, nharm, solid_harmonics, sph_harmonics

__all__ = [
    "FmmParams",
    "MultipoleSourceSet",
    "Tree",
    "SphereFMM",
    "PointFMM",
    "evaluate",
    "direct_potential",
    "m2m_from_sources",
    "m2p_direct",
    "eval_multipole",
    "translation_operators",
]


@dataclass(frozen=True)
class FmmParams:
    """``order`` is the expansion degree P; ``leaf_size`` the target mean number of
    sources per non-empty leaf; ``separation`` the number of neighbour layers
    treated directly (1 is the classical choice).  With ``distance_truncation``
    a transfer over box offset ``t`` keeps degrees up to
    ``ceil(P log 2 / log |t|)`` only, which matches the truncation error of the
    closest offsets (the error of a transfer decays roughly like ``|t|**-P``)."""

    order: int
    leaf_size: float = 12.0
    max_depth: int = 10
    separation: int = 1
    min_leaf_ratio: float = 6.0
    distance_truncation: bool = True

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("expansion order must be nonnegative")
        if self.leaf_size <= 0:
            raise ValueError("leaf size must be positive")
        if self.separation not in (1, 2):
            raise ValueError("separation must be 1 or 2")
        if not 0 <= self.max_depth <= 15:
            raise ValueError("max_depth must lie in [0, 15]")

    @classmethod
    def default(cls, N: int, **kw) -> "FmmParams":
        return cls(order=N + 24, **kw)


@dataclass(frozen=True)
class MultipoleSourceSet:
    centers: np.ndarray
    momenta: np.ndarray
    N: int

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        m = np.asarray(self.momenta, dtype=float).reshape(len(c), -1)
        if m.shape[1] != nharm(self.N):
            raise ValueError(f"momenta need {nharm(self.N)} columns for N = {self.N}")
        if not np.all(np.isfinite(m)):
            raise ValueError("momenta must be finite")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "momenta", m)


# ---------------------------------------------------------------------------
# translation operators


def _projector(rule, L):
    return (rule.weights[:, None] * sph_harmonics(rule.points, L)).T


@lru_cache(maxsize=None)
def _offsets(separation: int):
    w = 2 * separation + 1
    r = np.arange(-w, w + 1)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    far = g[np.abs(g).max(axis=1) > separation]
    return far


def _canonical(offs):
    """True for offsets whose first nonzero component is positive."""
    first = np.where(offs[:, 0] != 0, offs[:, 0], np.where(offs[:, 1] != 0, offs[:, 1], offs[:, 2]))
    return first > 0


def _m2l_index(separation):
    """Map each offset to (stored matrix index, parity flip)."""
    offs = _offsets(separation)
    canon = _canonical(offs)
    stored = {tuple(t): i for i, t in enumerate(offs[canon])}
    idx = np.array([stored[tuple(t)] if c else stored[tuple(-t)] for t, c in zip(offs, canon)])
    return idx, ~canon


@lru_cache(maxsize=None)
def _children_offsets():
    # octant bit order: 4*x + 2*y + z; child centre minus parent centre, in parent units
    o = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=float)
    return (o - 0.5) / 2.0


# about 0.6 GB per order at P=25; keep only the most recent
@lru_cache(maxsize=2)
def translation_operators(P: int, separation: int = 1):
    """Level-independent M2M (8), L2L (8) and M2L matrices for order ``P``.

    Row-vector convention is not used: each matrix maps a coefficient column
    vector of the source expansion to that of the target expansion.
    """
    deg = degrees(P)
    nP = nharm(P)
    # M2M: I_k(u - d) = sum_q A_qk I_q(u), projected on |u| = 2
    rule = lebedev(min(P + 40, 131))
    proj = _projector(rule, P)
    rho = 2.0
    m2m = np.empty((8, nP, nP))
    for o, d in enumerate(_children_offsets()):
        vals = irregular_harmonics(rho * rule.points - d, P)
        A = (proj @ vals) * rho ** (deg + 1)[:, None]
        m2m[o] = A * 2.0 ** (-(deg + 1.0))[None, :]
    # L2L: R_k(v/2 + d) = sum_q C_qk R_q(v), exact polynomial projection
    rule2 = lebedev(2 * P + 2)
    proj2 = _projector(rule2, P)
    l2l = np.empty((8, nP, nP))
    for o, d in enumerate(_children_offsets()):
        vals = solid_harmonics(0.5 * rule2.points + d, P)
        l2l[o] = proj2 @ vals
    # M2L: I_k(u - t) = sum_q T_qk R_q(u), projected on |u| = 1.  Only offsets
    # with a positive leading component are stored: T(-t) = D T(t) D, D = (-1)^l.
    offs = _offsets(separation)
    rule3 = lebedev(min(P + 50, 131))
    proj3 = _projector(rule3, P)
    canon = _canonical(offs)
    m2l = np.empty((int(canon.sum()), nP, nP))
    for i, t in enumerate(offs[canon]):
        vals = irregular_harmonics(rule3.points - t, P)
        m2l[i] = proj3 @ vals
    return m2m, l2l, offs, m2l


@lru_cache(maxsize=None)
def _shift_tensor(P: int, N: int) -> np.ndarray:
    """Tensor ``C`` with ``I_k(u - d) = sum_q (sum_p R_p(d) C[p, q, k]) I_q(u)``.

    Entries of the multipole shift are homogeneous harmonic polynomials in
    ``d``, hence combinations of regular solid harmonics.
    """
    nP, nh = nharm(P), nharm(N)
    # |d| <= delta keeps R_p(d) / delta**l_p bounded, so rounding is not amplified
    rule_u = lebedev(min(P + 52, 131))
    proj_u = _projector(rule_u, P)
    rho = 2.0
    delta = 1.0
    rule_d = lebedev(2 * P + 2)
    A = np.empty((rule_d.size, nP, nh))
    for m, sd in enumerate(rule_d.points):
        vals = irregular_harmonics(rho * rule_u.points - delta * sd, N)
        A[m] = (proj_u @ vals) * rho ** (degrees(P) + 1)[:, None]
    proj_d = _projector(rule_d, P) / delta ** degrees(P)[:, None]
    C = np.tensordot(proj_d, A, axes=(1, 0))  # (p, q, k)
    # exact structure: only l_p = l_q - l_k survives
    dp, dq, dk = np.ix_(degrees(P), degrees(P), degrees(N))
    return np.where(dp == dq - dk, C, 0.0)


def shift_matrices(d: np.ndarray, P: int, N: int) -> np.ndarray:
    """Multipole shift matrices ``A(d)`` of shape ``(n, (P+1)^2, (N+1)^2)``."""
    C = _shift_tensor(P, N)
    R = solid_harmonics(np.asarray(d, dtype=float).reshape(-1, 3), P)
    return (R @ C.reshape(C.shape[0], -1)).reshape(len(R), C.shape[1], C.shape[2])


# ---------------------------------------------------------------------------
# direct evaluation


def direct_potential(sources: MultipoleSourceSet, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    out = np.zeros(len(targets))
    chunk = max(1, 4_000_000 // max(1, len(sources.centers) * nharm(sources.N)))
    for s in range(0, len(targets), chunk):
        diff = targets[s:s + chunk, None, :] - sources.centers[None, :, :]
        if np.any(np.einsum("...i,...i->...", diff, diff) == 0):
            raise ValueError("a target coincides with a source centre")
        out[s:s + chunk] = np.einsum("tjk,jk->t", irregular_harmonics(diff, sources.N),
                                     sources.momenta)
    return out


def m2p_direct(centers, momenta, target, N: int) -> float:
    """Exact potential of the listed point multipoles at one target."""
    src = MultipoleSourceSet(centers, momenta, N)
    return float(direct_potential(src, np.asarray(target, dtype=float)[None, :])[0])


def m2m_from_sources(centers, momenta, box_center, P: int, N: int) -> np.ndarray:
    """Degree-P multipole expansion about ``box_center`` (physical units) of the sources."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    momenta = np.asarray(momenta, dtype=float).reshape(len(centers), nharm(N))
    if P < N:
        raise ValueError("expansion order must be at least the source degree")
    A = shift_matrices(centers - np.asarray(box_center, dtype=float), P, N)
    return np.einsum("jqk,jk->q", A, momenta)


def eval_multipole(coeffs, center, x) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    P = int(round(math.sqrt(coeffs.size))) - 1
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    return irregular_harmonics(x - np.asarray(center, dtype=float), P) @ coeffs


# ---------------------------------------------------------------------------
# tree


def _keys(coords: np.ndarray, bits: int) -> np.ndarray:
    c = coords.astype(np.int64)
    return (c[:, 0] << (2 * bits)) | (c[:, 1] << bits) | c[:, 2]


class Tree:
    """Uniform octree over source and target centres with interaction lists."""

    def __init__(self, sources: np.ndarray, targets: np.ndarray, params: FmmParams,
                 target_radius: float = 0.0):
        t0 = time.perf_counter()
        self.params = params
        src = np.asarray(sources, dtype=float).reshape(-1, 3)
        tgt = np.asarray(targets, dtype=float).reshape(-1, 3)
        allp = np.vstack([src, tgt])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        extent = float(max((hi - lo).max(), 1e-12))
        center = 0.5 * (lo + hi)
        h = self._leaf_edge(src, lo, extent, params)
        h = max(h, params.min_leaf_ratio * target_radius)
        depth = max(0, math.ceil(math.log2(extent / h * (1 + 1e-12)))) if extent > h else 0
        depth = min(depth, params.max_depth)
        side = max(h * 2 ** depth, extent * (1 + 1e-9))
        self.depth = depth
        self.side = side
        self.origin = center - side / 2
        self.leaf_edge = side / 2 ** depth
        n = 2 ** depth
        self.src_coords = np.clip(np.floor((src - self.origin) / self.leaf_edge), 0, n - 1).astype(np.int64)
        self.tgt_coords = np.clip(np.floor((tgt - self.origin) / self.leaf_edge), 0, n - 1).astype(np.int64)
        self._build_levels()
        self._build_lists()
        self.build_time = time.perf_counter() - t0

    @staticmethod
    def _leaf_edge(src, lo, extent, params):
        # choose the edge so that non-empty leaves hold about leaf_size sources
        if len(src) == 0:
            return extent
        h = extent * (params.leaf_size / len(src)) ** (1.0 / 3.0)
        for _ in range(4):
            if h >= extent:
                return extent
            occ = len(src) / len(np.unique(_keys(np.floor((src - lo) / h), 21)))
            h *= (params.leaf_size / occ) ** (1.0 / 3.0)
        return min(h, extent)

    def box_centers(self, level: int) -> np.ndarray:
        edge = self.side / 2 ** level
        return self.origin + (self.boxes[level] + 0.5) * edge

    def box_edge(self, level: int) -> float:
        return self.side / 2 ** level

    def _build_levels(self):
        L = self.depth
        self.boxes = {}
        self.box_keys = {}
        self.src_box = {}
        self.tgt_box = {}
        for l in range(L, -1, -1):
            sh = L - l
            sc = self.src_coords >> sh
            tc = self.tgt_coords >> sh
            coords = np.unique(np.vstack([sc, tc]), axis=0) if len(sc) + len(tc) else np.zeros((0, 3), np.int64)
            keys = _keys(coords, max(l, 1))
            order = np.argsort(keys)
            self.boxes[l] = coords[order]
            self.box_keys[l] = keys[order]
            self.src_box[l] = np.searchsorted(self.box_keys[l], _keys(sc, max(l, 1)))
            self.tgt_box[l] = np.searchsorted(self.box_keys[l], _keys(tc, max(l, 1)))
        self.parent = {}
        self.octant = {}
        for l in range(1, L + 1):
            c = self.boxes[l]
            self.parent[l] = np.searchsorted(self.box_keys[l - 1], _keys(c >> 1, max(l - 1, 1)))
            b = c & 1
            self.octant[l] = 4 * b[:, 0] + 2 * b[:, 1] + b[:, 2]

    def _lookup(self, level, coords):
        n = 2 ** level
        inside = np.all((coords >= 0) & (coords < n), axis=-1)
        keys = _keys(np.where(inside[..., None], coords, 0).reshape(-1, 3), max(level, 1))
        keys = keys.reshape(coords.shape[:-1])
        idx = np.searchsorted(self.box_keys[level], keys)
        idx = np.minimum(idx, len(self.box_keys[level]) - 1)
        found = inside & (self.box_keys[level][idx] == keys)
        return idx, found

    def _build_lists(self):
        sep = self.params.separation
        offs = _offsets(sep)
        self.m2l = {}
        self.first_level = 2
        for l in range(self.first_level, self.depth + 1):
            b = self.boxes[l]
            cand = b[:, None, :] + offs[None, :, :]
            ok = np.all(np.abs((cand >> 1) - (b[:, None, :] >> 1)) <= sep, axis=-1)
            idx, found = self._lookup(l, cand)
            ok &= found
            tb, oi = np.nonzero(ok)
            self.m2l[l] = (tb, idx[tb, oi], oi)
        # near field between leaves
        r = np.arange(-sep, sep + 1)
        near_offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
        b = self.boxes[self.depth]
        idx, found = self._lookup(self.depth, b[:, None, :] + near_offs[None, :, :])
        tb, oi = np.nonzero(found)
        self.near_boxes = (tb, idx[tb, oi])

    def near_pairs(self, exclude_self: bool = False):
        """Target/source index pairs in neighbouring leaves, sorted by target."""
        L = self.depth
        nb = len(self.boxes[L])
        s_order = np.argsort(self.src_box[L], kind="stable")
        s_count = np.bincount(self.src_box[L], minlength=nb)
        s_start = np.concatenate([[0], np.cumsum(s_count)])
        tb, sb = self.near_boxes
        per_box = np.bincount(tb, weights=s_count[sb], minlength=nb).astype(np.int64)
        t_idx = np.arange(len(self.tgt_box[L]))
        n_per_t = per_box[self.tgt_box[L]]
        # for each target, concatenate the source lists of its near boxes
        box_pair_start = np.concatenate([[0], np.cumsum(np.bincount(tb, minlength=nb))])
        T = np.repeat(t_idx, n_per_t)
        S = np.empty(len(T), dtype=np.int64)
        pos = 0
        # loop over near-box offsets of each target box, vectorized over targets
        tbox = self.tgt_box[L]
        max_nb = int(np.diff(box_pair_start).max()) if nb else 0
        fill = np.zeros(len(t_idx), dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(n_per_t)])[:-1]
        for k in range(max_nb):
            has = (box_pair_start[tbox] + k) < box_pair_start[tbox + 1]
            ti = t_idx[has]
            pair = box_pair_start[tbox[ti]] + k
            src_box = sb[pair]
            cnt = s_count[src_box]
            base = starts[ti] + fill[ti]
            rep_t = np.repeat(np.arange(len(ti)), cnt)
            within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            S[np.repeat(base, cnt) + within] = s_order[s_start[src_box][rep_t] + within]
            fill[ti] += cnt
            pos += cnt.sum()
        if exclude_self:
            keep = T != S
            T, S = T[keep], S[keep]
        return T, S

    def counts(self) -> dict:
        m2l = int(sum(len(v[0]) for v in self.m2l.values()))
        L = self.depth
        s_count = np.bincount(self.src_box[L], minlength=len(self.boxes[L]))
        t_count = np.bincount(self.tgt_box[L], minlength=len(self.boxes[L]))
        tb, sb = self.near_boxes
        near = int(np.sum(t_count[tb] * s_count[sb]))
        return {"depth": self.depth, "leaf_edge": self.leaf_edge,
                "boxes": int(sum(len(b) for b in self.boxes.values())),
                "leaves": int(len(self.boxes[L])), "m2l_pairs": m2l, "near_pairs": near,
                "sources": int(len(self.src_coords)), "targets": int(len(self.tgt_coords))}


# ---------------------------------------------------------------------------
# generic plan


def _indicator(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse ``(n, len(index))`` matrix summing rows that share an index."""
    return sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                         shape=(n, len(index)))


class _FarField:
    """Upward, transfer and downward passes shared by the front ends."""

    def __init__(self, tree: Tree, P: int, N: int, src_centers: np.ndarray):
        self.tree = tree
        self.P = P
        self.N = N
        self.nP = nharm(P)
        self.active = tree.depth >= tree.first_level
        if not self.active:
            return
        self.m2m, self.l2l, _, self.m2l_mats = translation_operators(P, tree.params.separation)
        self.parity = (-1.0) ** degrees(P)
        L = tree.depth
        h = tree.leaf_edge
        self.nh = nharm(N)
        # P2M through the factorization A(d) = sum_p R_p(d) C[p]: sources are first
        # accumulated per leaf against R_p(d_j), then one sparse product gives the moments.
        d = (src_centers - tree.box_centers(L)[tree.src_box[L]]) / h
        self.src_R = solid_harmonics(d, P)
        self.src_scale = h ** -(degrees(N) + 1.0)
        C = _shift_tensor(P, N)
        self.p2m = sp.csr_matrix(C.transpose(0, 2, 1).reshape(-1, self.nP))  # rows (p, k)
        self.p2m_T = self.p2m.T.tocsr()
        self.leaf_of_src = tree.src_box[L]
        self.gather_src = _indicator(self.leaf_of_src, len(tree.boxes[L]))
        self.gather_tgt = _indicator(tree.tgt_box[L], len(tree.boxes[L]))
        self.octants = {l: [(o, np.flatnonzero(tree.octant[l] == o)) for o in range(8)]
                        for l in range(tree.first_level + 1, L + 1)}
        self._group_m2l()

    def _group_m2l(self):
        params = self.tree.params
        idx, flip = _m2l_index(params.separation)
        offs = _offsets(params.separation)
        order_of = np.full(len(offs), self.P)
        if params.distance_truncation:
            dist = np.linalg.norm(offs, axis=1)
            order_of = np.minimum(self.P, np.maximum(
                self.N, np.ceil(self.P * math.log(2.0) / np.log(dist) - 1e-9))).astype(int)
        self.m2l_groups = {}
        self._subs = {}
        for l, (tb, sb, oi) in self.tree.m2l.items():
            order = np.argsort(oi, kind="stable")
            tb, sb, oi = tb[order], sb[order], oi[order]
            cuts = np.flatnonzero(np.diff(oi)) + 1
            starts = np.concatenate([[0], cuts]).astype(int)
            ends = np.concatenate([cuts, [len(oi)]]).astype(int)
            self.m2l_groups[l] = [(int(idx[oi[s]]), bool(flip[oi[s]]), tb[s:e], sb[s:e],
                                   nharm(int(order_of[oi[s]])))
                                  for s, e in zip(starts, ends) if e > s]

    def _sub(self, k, n):
        key = (k, n)
        if key not in self._subs:
            self._subs[key] = np.ascontiguousarray(self.m2l_mats[k, :n, :n])
        return self._subs[key]

    def _zeros(self, level):
        return np.zeros((len(self.tree.boxes[level]), self.nP))

    def _m2l(self, src, k, flip, transpose, n):
        T = self._sub(k, n)
        src = src[:, :n]
        if flip:
            p = self.parity[:n]
            return ((src * p) @ (T if transpose else T.T)) * p
        return src @ (T if transpose else T.T)

    def upward(self, phi: np.ndarray) -> dict:
        t = self.tree
        L = t.depth
        phi = phi * self.src_scale
        W = np.empty((len(t.boxes[L]), self.nP, self.nh))
        for k in range(self.nh):
            W[:, :, k] = self.gather_src @ (self.src_R * phi[:, k:k + 1])
        mult = {L: np.ascontiguousarray((self.p2m_T @ W.reshape(len(W), -1).T).T)}
        for l in range(L, t.first_level, -1):
            mult[l - 1] = self._zeros(l - 1)
            for o, sel in self.octants[l]:
                if len(sel):
                    # parents are distinct within one octant
                    mult[l - 1][t.parent[l][sel]] += mult[l][sel] @ self.m2m[o].T
        return mult

    def transfer(self, mult: dict) -> dict:
        loc = {}
        for l in range(self.tree.first_level, self.tree.depth + 1):
            loc[l] = self._zeros(l)
            for k, flip, tb, sb, n in self.m2l_groups[l]:
                loc[l][tb, :n] += self._m2l(mult[l][sb], k, flip, False, n)
        return loc

    def downward(self, loc: dict) -> np.ndarray:
        t = self.tree
        for l in range(t.first_level + 1, t.depth + 1):
            for o, sel in self.octants[l]:
                if len(sel):
                    loc[l][sel] += loc[l - 1][t.parent[l][sel]] @ self.l2l[o].T
        return loc[t.depth]

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """Leaf local expansions generated by source momenta ``phi``."""
        return self.downward(self.transfer(self.upward(phi)))

    def apply_transpose(self, leaf_adj: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`apply`: source-momentum gradient from leaf-local weights."""
        t = self.tree
        L = t.depth
        loc = {L: leaf_adj.copy()}
        for l in range(L, t.first_level, -1):
            loc[l - 1] = self._zeros(l - 1)
            for o, sel in self.octants[l]:
                if len(sel):
                    loc[l - 1][t.parent[l][sel]] += loc[l][sel] @ self.l2l[o]
        mult = {}
        for l in range(t.first_level, L + 1):
            mult[l] = self._zeros(l)
            for k, flip, tb, sb, n in self.m2l_groups[l]:
                mult[l][sb, :n] += self._m2l(loc[l][tb], k, flip, True, n)
        for l in range(t.first_level + 1, L + 1):
            for o, sel in self.octants[l]:
                if len(sel):
                    mult[l][sel] += mult[l - 1][t.parent[l][sel]] @ self.m2m[o]
        W = (self.p2m @ np.ascontiguousarray(mult[L].T)).T.reshape(-1, self.nP, self.nh)
        out = np.empty((len(self.leaf_of_src), self.nh))
        for k in range(self.nh):
            out[:, k] = np.einsum("jp,jp->j", self.src_R, W[self.leaf_of_src, :, k])
        return out * self.src_scale


class SphereFMM:
    """Inclusion-inclusion block of the scaled single-layer operator.

    ``matvec`` maps trace coefficients ``kappa`` (shape ``(M, nh)``) to the
    harmonic projections of the induced potential on every other sphere.
    """

    exact_transpose = False

    def __init__(self, centers, radii, N: int, rule, params: FmmParams):
        t0 = time.perf_counter()
        self.centers = np.asarray(centers, dtype=float)
        self.radii = np.asarray(radii, dtype=float)
        self.N = N
        self.nh = nharm(N)
        self.rule = rule
        self.params = params
        if params.order < N:
            raise ValueError("FMM order must be at least N")
        deg = degrees(N)
        self.scale = 4.0 * np.pi * self.radii[:, None] ** (deg + 2) / (2 * deg + 1)
        self.tree = Tree(self.centers, self.centers, params, float(self.radii.max()))
        self.proj = _projector(rule, N)
        t1 = time.perf_counter()
        self._build_near()
        t2 = time.perf_counter()
        self.far = _FarField(self.tree, params.order, N, self.centers)
        if self.far.active:
            L = self.tree.depth
            h = self.tree.leaf_edge
            cen = self.tree.box_centers(L)[self.tree.tgt_box[L]]
            self.l2p = np.empty((len(self.radii), self.nh, nharm(params.order)))
            chunk = max(1, 20_000 // rule.size)
            for s in range(0, len(self.radii), chunk):
                sl = slice(s, s + chunk)
                nodes = (self.centers[sl, None, :] + self.radii[sl, None, None] * rule.points
                         - cen[sl, None, :]) / h
                self.l2p[sl] = np.einsum("kn,inq->ikq", self.proj,
                                         solid_harmonics(nodes, params.order))
        t3 = time.perf_counter()
        self.timings = {"tree_ms": 1e3 * (t1 - t0), "near_ms": 1e3 * (t2 - t1),
                        "far_setup_ms": 1e3 * (t3 - t2)}
        self.applications = 0

    def _build_near(self):
        M, nh, rule = len(self.radii), self.nh, self.rule
        T, S = self.tree.near_pairs(exclude_self=True)
        data = np.empty((len(T), nh, nh))
        chunk = max(1, 2_000_000 // (rule.size * nh))
        for s in range(0, len(T), chunk):
            ti, si = T[s:s + chunk], S[s:s + chunk]
            diff = (self.centers[ti, None, :] + self.radii[ti, None, None] * rule.points
                    - self.centers[si, None, :])
            irr = irregular_harmonics(diff, self.N) * self.scale[si, None, :]
            data[s:s + chunk] = np.einsum("kn,cnq->ckq", self.proj, irr)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(T, minlength=M))])
        self.near = sp.bsr_matrix((data, S, indptr), shape=(M * nh, M * nh))
        self._near_T = None
        self.near_pairs = len(T)

    def matvec(self, kappa: np.ndarray) -> np.ndarray:
        self.applications += 1
        kappa = np.asarray(kappa, dtype=float).reshape(-1, self.nh)
        out = (self.near @ kappa.ravel()).reshape(-1, self.nh)
        if self.far.active:
            leaf = self.far.apply(self.scale * kappa)
            out += np.einsum("ikq,iq->ik", self.l2p, leaf[self.tree.tgt_box[self.tree.depth]])
        return out

    def rmatvec(self, w: np.ndarray) -> np.ndarray:
        """Exact transpose of :meth:`matvec`."""
        w = np.asarray(w, dtype=float).reshape(-1, self.nh)
        if self._near_T is None:
            self._near_T = self.near.T.tobsr(blocksize=(self.nh, self.nh))
        out = (self._near_T @ w.ravel()).reshape(-1, self.nh)
        if self.far.active:
            leaf_adj = self.far.gather_tgt @ np.einsum("ikq,ik->iq", self.l2p, w)
            out += self.scale * self.far.apply_transpose(leaf_adj)
        return out

    def diagnostics(self) -> dict:
        d = self.tree.counts()
        d.update(self.timings)
        d.update({"order": self.params.order, "leaf_size": self.params.leaf_size,
                  "separation": self.params.separation, "near_blocks": int(self.near_pairs),
                  "applications": self.applications})
        return d


class PointFMM:
    """Potential of point multipoles at arbitrary target points."""

    def __init__(self, sources: MultipoleSourceSet, targets, params: FmmParams):
        self.sources = sources
        self.targets = np.asarray(targets, dtype=float).reshape(-1, 3)
        self.params = params
        N = sources.N
        if params.order < N:
            raise ValueError("FMM order must be at least the source degree")
        self.tree = Tree(sources.centers, self.targets, params, 0.0)
        T, S = self.tree.near_pairs()
        diff = self.targets[T] - sources.centers[S]
        if np.any(np.einsum("ij,ij->i", diff, diff) == 0):
            raise ValueError("a target coincides with a source centre")
        self.near_T, self.near_S = T, S
        self.near_vals = irregular_harmonics(diff, N) if len(T) else np.zeros((0, nharm(N)))
        self.far = _FarField(self.tree, params.order, N, sources.centers)
        if self.far.active:
            L = self.tree.depth
            cen = self.tree.box_centers(L)[self.tree.tgt_box[L]]
            self.l2p = solid_harmonics((self.targets - cen) / self.tree.leaf_edge, params.order)

    def evaluate(self, momenta=None) -> np.ndarray:
        phi = self.sources.momenta if momenta is None else np.asarray(momenta, dtype=float)
        out = np.zeros(len(self.targets))
        np.add.at(out, self.near_T, np.einsum("pk,pk->p", self.near_vals, phi[self.near_S]))
        if self.far.active:
            leaf = self.far.apply(phi)
            out += np.einsum("tq,tq->t", self.l2p, leaf[self.tree.tgt_box[self.tree.depth]])
        return out


def evaluate(sources: MultipoleSourceSet, targets, params: FmmParams | None = None) -> np.ndarray:
    """Potential of ``sources`` at ``targets`` (shape ``(n, 3)``)."""
    params = params or FmmParams.default(sources.N)
    return PointFMM(sources, targets, params).evaluate()
