import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spherehom.geometry import (
    Configuration,
    GeometryError,
    LatticeSpec,
    OverlapError,
    RandomMediumSpec,
    SaturationError,
    clip_and_rescale,
    generate_lattice,
    generate_random,
    lens_volume,
    load_config,
    save_config,
    validate,
)

LATTICE = LatticeSpec(0.25, 10.0)


def _brute_lattice_count(radius, gen_radius):
    n = int(gen_radius + radius) + 1
    count = 0
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            for k in range(-n, n + 1):
                if math.sqrt(i * i + j * j + k * k) < gen_radius + radius:
                    count += 1
    return count


@pytest.mark.parametrize("gen", [0.3, 1.3, 2.7, 5.0])
def test_lattice_matches_brute_force(gen):
    assert generate_lattice(LATTICE, gen).M == _brute_lattice_count(0.25, gen)


def test_lattice_small_cases():
    assert generate_lattice(LATTICE, 0.3).M == 1
    # the face diagonals at distance sqrt(2) also reach the ball of radius 1.55
    assert generate_lattice(LATTICE, 1.3).M == 19


def test_lattice_shell_consistency():
    a = generate_lattice(LATTICE, 4.0).M
    b = generate_lattice(LATTICE, 5.0).M
    shell = sum(1 for i in range(-6, 7) for j in range(-6, 7) for k in range(-6, 7)
                if 4.25 <= math.sqrt(i * i + j * j + k * k) < 5.25)
    assert b - a == shell


def test_lattice_rejects_overlapping_radius():
    with pytest.raises(GeometryError):
        LatticeSpec(0.6, 10.0)


def test_large_lattice_count():
    # 278,369 kept inclusions; together with the outer sphere, 278,370 spheres
    cfg, info = clip_and_rescale(generate_lattice(LATTICE, 40.75), 40.75)
    assert info.M_kept == 278369
    assert info.M_kept + 1 == 278370
    assert cfg.M == info.M_kept


def test_lens_volume_monte_carlo():
    rng = np.random.default_rng(3)
    R, r, d = 2.0, 0.7, 1.8
    n = 400_000
    pts = rng.uniform(-r, r, size=(n, 3))
    pts = pts[np.linalg.norm(pts, axis=1) < r] + np.array([d, 0.0, 0.0])
    frac = np.mean(np.linalg.norm(pts, axis=1) < R)
    mc = frac * 4.0 / 3.0 * math.pi * r ** 3
    exact = float(lens_volume(R, r, d))
    assert abs(mc - exact) / exact <= 5e-3


def test_lens_volume_limits():
    R, r = 3.0, 0.5
    full = 4.0 / 3.0 * math.pi * r ** 3
    assert lens_volume(R, r, 1.0) == pytest.approx(full)
    assert lens_volume(R, r, 3.6) == 0.0
    # continuity at tangency from both sides
    assert lens_volume(R, r, R - r + 1e-12) == pytest.approx(full, rel=1e-9)
    assert lens_volume(R, r, R + r - 1e-9) == pytest.approx(0.0, abs=1e-12)


def test_gamma_single_boundary_ball():
    cfg = Configuration([[0, 0, 0], [1.8, 0, 0]], [0.5, 0.5], [5.0, 5.0], 1.0)
    out, info = clip_and_rescale(cfg, 2.0)
    v1 = 4.0 / 3.0 * math.pi * 0.5 ** 3
    v2 = float(lens_volume(2.0, 0.5, 1.8))
    assert info.M_kept == 1 and info.M_deleted == 1
    assert info.gamma == pytest.approx(((v1 + v2) / v1) ** (1.0 / 3.0), rel=1e-14)
    assert out.radii[0] == pytest.approx(0.5 * info.gamma, rel=1e-14)


def test_gamma_one_without_boundary_balls():
    cfg = Configuration([[0, 0, 0], [1.0, 0, 0]], [0.25, 0.25], [5.0, 5.0], 1.0)
    out, info = clip_and_rescale(cfg, 3.0)
    assert info.gamma == 1.0
    np.testing.assert_array_equal(out.radii, cfg.radii)
    np.testing.assert_array_equal(out.centers, cfg.centers)
    assert out.R == 3.0


@pytest.mark.parametrize("R", [3.3, 5.0, 10.0])
def test_clip_preserves_volume(R):
    raw = generate_lattice(LATTICE, R)
    out, _ = clip_and_rescale(raw, R)
    dist = np.linalg.norm(raw.centers, axis=1)
    kept = dist + raw.radii < R
    boundary = ~kept & (dist - raw.radii < R)
    expected = (np.sum(4 / 3 * np.pi * raw.radii[kept] ** 3)
                + lens_volume(R, raw.radii[boundary], dist[boundary]).sum())
    assert out.inclusion_volumes().sum() == pytest.approx(expected, rel=1e-12)


def test_gamma_tends_to_one_on_lattice():
    Rs = np.array([5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 40.0])
    gam = np.array([clip_and_rescale(generate_lattice(LATTICE, R), R, on_overlap="clamp")[1]
                    .gamma_requested for R in Rs])
    assert np.all(gam >= 1.0)
    slope = np.polyfit(np.log(Rs), np.log(gam - 1.0), 1)[0]
    assert slope <= -2.0 / 3.0


def test_overlap_raises_or_shrinks():
    # the kept ball sits next to the outer sphere, so inflating it pushes it out
    cfg = Configuration([[0, 0, 0], [0, 0, 1.69], [1.9, 0, 0]], [0.3, 0.3, 0.3], [5.0] * 3, 1.0)
    with pytest.raises(OverlapError):
        clip_and_rescale(cfg, 2.0)
    out, info = clip_and_rescale(cfg, 2.0, on_overlap="shrink")
    assert info.shrunk and 1.0 <= info.gamma < info.gamma_requested
    assert validate(out, 0.0) == []


def test_lattice_valid_after_clip():
    # at R = 10.5 the balls at |x| = sqrt(105) would cross the outer sphere
    with pytest.raises(OverlapError):
        clip_and_rescale(generate_lattice(LATTICE, 10.5), 10.5)
    out, info = clip_and_rescale(generate_lattice(LATTICE, 10.5), 10.5, on_overlap="clamp")
    assert validate(out, 1e-6) == []
    assert info.clamped > 0 and not info.shrunk
    # only the clamped balls lose volume
    full = (4 / 3 * np.pi * (0.25 * info.gamma) ** 3) * info.M_kept
    assert 0 < full - out.inclusion_volumes().sum() < 0.01 * full


def test_clamp_keeps_gamma_on_unaffected_balls():
    cfg = Configuration([[0, 0, 0], [0, 0, 1.69], [1.9, 0, 0]], [0.3, 0.3, 0.3], [5.0] * 3, 1.0)
    out, info = clip_and_rescale(cfg, 2.0, on_overlap="clamp")
    assert info.clamped == 1 and not info.shrunk
    assert out.radii[0] == pytest.approx(0.3 * info.gamma)
    assert out.radii[1] == pytest.approx(0.3 + 0.5 * (2.0 - 1.69 - 0.3))
    assert validate(out, 0.0) == []


def test_validate_detects_pairs_and_boundary():
    two = Configuration([[0, 0, 0], [3, 0, 0]], [1.0, 1.0], [2.0, 2.0], 1.0)
    assert validate(two, 0.5) == []
    hits = validate(two, 1.5)
    assert hits and hits[0][:3] == ("pair", 0, 1)
    near = Configuration([[0, 0, 0.9]], [1.0], [2.0], 1.0, outer_radius=2.0)
    assert validate(near, 0.2)[0][:2] == ("boundary", 0)


def test_random_empty_and_deterministic():
    empty = generate_random(RandomMediumSpec((0.1, 0.2), (2, 3), 0.1, 0.0, 1), 5.0)
    assert empty.M == 0
    spec = RandomMediumSpec((0.1, 0.25), (10, 50), 0.4, 1.0, 11)
    a = generate_random(spec, 4.0)
    b = generate_random(spec, 4.0)
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.radii, b.radii)
    np.testing.assert_array_equal(a.coefficients, b.coefficients)
    c = generate_random(RandomMediumSpec((0.1, 0.25), (10, 50), 0.4, 1.0, 12), 4.0)
    assert not np.array_equal(a.centers, c.centers)


def test_random_ranges_and_count():
    spec = RandomMediumSpec((0.1, 0.25), (10, 50), 0.4, 1.0, 5)
    cfg = generate_random(spec, 6.0)
    assert cfg.M == round(4 / 3 * math.pi * 6.0 ** 3)
    assert np.all((cfg.radii >= 0.1) & (cfg.radii <= 0.25))
    assert np.all((cfg.coefficients >= 10) & (cfg.coefficients <= 50))
    assert np.all(np.linalg.norm(cfg.centers, axis=1) <= 6.0)


@pytest.mark.slow
def test_random_scale_of_test_case():
    cfg = generate_random(RandomMediumSpec((0.1, 0.25), (10, 50), 0.4, 1.0, 7), 20.0)
    assert abs(cfg.M - 32442) / 32442 < 0.05


def test_random_saturation():
    spec = RandomMediumSpec((0.4, 0.4), (2, 3), 0.5, 5.0, 0, max_attempts=2000)
    with pytest.raises(SaturationError):
        generate_random(spec, 2.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), gap=st.floats(0.01, 0.5))
def test_random_media_are_valid(seed, gap):
    cfg = generate_random(RandomMediumSpec((0.1, 0.3), (2, 5), gap, 0.8, seed), 3.0)
    assert validate(cfg, 0.0) == []
    assert validate(cfg, gap * (1 - 1e-9)) == []


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
                          st.floats(1e-3, 10), st.floats(1e-3, 1e3)), min_size=0, max_size=6),
       st.floats(1e-2, 1e2))
def test_json_round_trip_is_bit_exact(tmp_path_factory, rows, a0):
    cfg = Configuration(np.array([r[:3] for r in rows]).reshape(-1, 3),
                        np.array([r[3] for r in rows]), np.array([r[4] for r in rows]),
                        a0, 7.25, seed=3, provenance={"generator": "test"})
    path = tmp_path_factory.mktemp("cfg") / "c.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back.centers.tobytes() == cfg.centers.tobytes()
    assert back.radii.tobytes() == cfg.radii.tobytes()
    assert back.coefficients.tobytes() == cfg.coefficients.tobytes()
    assert back.matrix_coefficient == a0 and back.R == 7.25 and back.seed == 3
    assert back.provenance == {"generator": "test"}


def test_mean_bounds():
    cfg, _ = clip_and_rescale(generate_lattice(LATTICE, 4.0), 4.0)
    assert 1.0 < cfg.harmonic_mean() < cfg.arithmetic_mean() < 10.0
    assert 0 < cfg.volume_fraction() < 1
