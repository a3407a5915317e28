import math

import numpy as np
import pytest

from spherehom.fmm import (
    FmmParams,
    MultipoleSourceSet,
    SphereFMM,
    Tree,
    direct_potential,
    eval_multipole,
    evaluate,
    m2m_from_sources,
    m2p_direct,
)
from spherehom.harmonics import lebedev, nharm
from spherehom.operator import Discretization

from conftest import random_config

def cloud(M, seed, density=1.0, N=1):
    """Uniform points in a ball at fixed density, with random degree-N momenta."""
    rng = np.random.default_rng(seed)
    R = (3 * M / (4 * math.pi * density)) ** (1 / 3)
    x = rng.normal(size=(M, 3))
    x *= (R * rng.uniform(0, 1, M) ** (1 / 3) / np.linalg.norm(x, axis=1))[:, None]
    return MultipoleSourceSet(x, rng.normal(size=(M, nharm(N))), N)


def targets_near(src, seed, count=300, offset=0.3):
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(src.centers), count)
    d = rng.normal(size=(count, 3))
    return src.centers[pick] + offset * d / np.linalg.norm(d, axis=1, keepdims=True)


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_params_validation():
    with pytest.raises(ValueError):
        FmmParams(order=-1)
    with pytest.raises(ValueError):
        FmmParams(order=4, separation=3)
    with pytest.raises(ValueError):
        MultipoleSourceSet(np.zeros((2, 3)), np.zeros((2, 3)), 1)
    src = cloud(50, 0, N=2)
    with pytest.raises(ValueError):
        evaluate(src, np.ones((1, 3)), FmmParams(order=1))


def test_default_order_reported():
    assert FmmParams.default(1).order == 25


def test_monopole():
    src = MultipoleSourceSet(np.zeros((1, 3)), [[2.5]], 0)
    for d in (0.7, 2.0, 9.0):
        x = np.array([[0.0, d, 0.0]])
        assert evaluate(src, x)[0] == pytest.approx(2.5 / (d * math.sqrt(4 * math.pi)), rel=1e-14)
    assert m2p_direct(np.zeros((1, 3)), [[2.5]], [2.0, 0, 0], 0) == pytest.approx(
        2.5 / (2 * math.sqrt(4 * math.pi)), rel=1e-15)


def test_dipole_on_axis():
    mom = np.zeros((1, 4))
    mom[0, 2] = 1.7
    d = 3.0
    val = m2p_direct(np.zeros((1, 3)), mom, [0, 0, d], 1)
    assert val == pytest.approx(1.7 / d ** 2 * math.sqrt(3 / (4 * math.pi)), rel=1e-15)


def test_coincident_target_rejected():
    src = cloud(20, 1)
    with pytest.raises(ValueError):
        evaluate(src, src.centers[:1])
    with pytest.raises(ValueError):
        direct_potential(src, src.centers[3:4])


def test_all_direct_equals_m2p():
    src = cloud(60, 2)
    x = targets_near(src, 3, 20)
    fast = evaluate(src, x, FmmParams.default(1, max_depth=0))
    slow = np.array([m2p_direct(src.centers, src.momenta, t, 1) for t in x])
    assert np.abs(fast - slow).max() <= 1e-14 * np.abs(slow).max()


@pytest.mark.parametrize("N", [0, 1, 2])
def test_m2m_single_source_at_center(N):
    mom = np.random.default_rng(N).normal(size=(1, nharm(N)))
    c = np.array([[0.3, -0.2, 1.0]])
    expn = m2m_from_sources(c, mom, c[0], N + 5, N)
    assert np.abs(expn[:nharm(N)] - mom[0]).max() < 1e-14
    assert np.abs(expn[nharm(N):]).max() < 1e-14


def test_m2m_symmetric_monopoles():
    c = np.array([[0.2, 0.1, -0.3], [-0.2, -0.1, 0.3]])
    expn = m2m_from_sources(c, [[1.0], [1.0]], np.zeros(3), 6, 0)
    assert expn[0] == pytest.approx(2.0, rel=1e-14)
    assert np.abs(expn[1:4]).max() < 1e-14


def test_m2m_random_dipoles_far_field():
    rng = np.random.default_rng(4)
    N = 1
    c = rng.uniform(-0.5, 0.5, (40, 3))
    mom = rng.normal(size=(40, nharm(N)))
    expn = m2m_from_sources(c, mom, np.zeros(3), N + 8, N)
    for x in ([24.0, 4.0, -8.0], [0.0, -20.0, 12.0]):
        ref = m2p_direct(c, mom, x, N)
        assert eval_multipole(expn, np.zeros(3), x)[0] == pytest.approx(ref, rel=1e-10)


def test_m2m_rejects_low_order():
    with pytest.raises(ValueError):
        m2m_from_sources(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros(3), 0, 1)


def test_hundred_dipoles_default_order():
    src = cloud(100, 5)
    x = targets_near(src, 6)
    params = FmmParams.default(1, leaf_size=2.0)
    assert Tree(src.centers, x, params).depth >= 3
    assert rel_err(evaluate(src, x, params), direct_potential(src, x)) <= 1e-8


@pytest.mark.parametrize("N,seed", [(1, 7), (2, 8), (3, 9)])
def test_oracle_equivalence_default_order(N, seed):
    src = cloud(500, seed, N=N)
    x = targets_near(src, seed + 100, 500)
    params = FmmParams.default(N, leaf_size=4.0)
    assert rel_err(evaluate(src, x, params), direct_potential(src, x)) <= 1e-8


@pytest.mark.xfail(strict=True, reason="error decays about 0.5 per degree; six extra degrees "
                                       "do not reach 1e-12")
def test_oracle_equivalence_raised_order():
    src = cloud(500, 10)
    x = targets_near(src, 11, 500)
    params = FmmParams(order=FmmParams.default(1).order + 6, leaf_size=4.0)
    assert rel_err(evaluate(src, x, params), direct_potential(src, x)) <= 1e-12


def test_error_decays_with_order():
    src = cloud(500, 12)
    x = targets_near(src, 13, 300)
    ref = direct_potential(src, x)
    errs = [rel_err(evaluate(src, x, FmmParams(order=P, leaf_size=4.0)), ref)
            for P in (9, 15, 21, 27)]
    assert all(b < 0.2 * a for a, b in zip(errs, errs[1:]))


def test_translation_invariance():
    src = cloud(400, 14)
    x = targets_near(src, 15)
    params = FmmParams.default(1, leaf_size=4.0)
    base = evaluate(src, x, params)
    shift = np.array([3.0, -5.0, 7.25])
    moved = MultipoleSourceSet(src.centers + shift, src.momenta, 1)
    assert np.abs(evaluate(moved, x + shift, params) - base).max() <= 1e-12 * np.abs(base).max()


def _work(M):
    src = cloud(M, 16)
    c = Tree(src.centers, src.centers, FmmParams.default(1)).counts()
    return c["m2l_pairs"] + c["near_pairs"] + c["boxes"]


def test_interaction_counts_scale_near_linearly():
    sizes = [1_000, 10_000, 100_000]
    per_source = [_work(M) / M for M in sizes]
    bound = per_source[0] * math.log(sizes[-1]) / math.log(sizes[0])
    assert max(per_source) <= bound


def test_sphere_fmm_exact_transpose(rng):
    cfg = random_config(60, 5.0, seed=17, gap=0.1)
    N = 2
    rule = lebedev(6)
    fmm = SphereFMM(cfg.centers, cfg.radii, N, rule, FmmParams.default(N, leaf_size=1.0))
    assert fmm.far.active
    x = rng.normal(size=(60, nharm(N)))
    w = rng.normal(size=(60, nharm(N)))
    lhs = np.vdot(fmm.matvec(x), w)
    assert lhs == pytest.approx(np.vdot(x, fmm.rmatvec(w)), rel=1e-12)
    dense = Discretization(cfg, N, rule).interaction.matrix
    ref = dense.T @ w.ravel()
    assert rel_err(fmm.rmatvec(w).ravel(), ref) <= 1e-8


def test_sphere_fmm_diagnostics():
    cfg = random_config(60, 5.0, seed=18, gap=0.1)
    fmm = SphereFMM(cfg.centers, cfg.radii, 1, lebedev(4), FmmParams.default(1, leaf_size=1.0))
    fmm.matvec(np.ones((60, 4)))
    d = fmm.diagnostics()
    for key in ("depth", "m2l_pairs", "near_pairs", "order", "tree_ms", "far_setup_ms"):
        assert key in d
    assert d["applications"] == 1 and d["order"] == 25
