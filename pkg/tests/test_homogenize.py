import csv
import json

import numpy as np
import pytest

from spherehom.geometry import LatticeSpec, clip_and_rescale, generate_lattice
from spherehom.homogenize import (
    CSV_COLUMNS,
    CorrectorProblem,
    SweepSpec,
    compute_all,
    energy_curve,
    functional_J,
    lattice_source,
    results_to_json,
    self_reference,
    sweep,
    window_average,
    write_csv,
)
from spherehom.operator import Discretization
from spherehom.solver import SolverSettings

from conftest import random_config

LATTICE = LatticeSpec(0.25, 10.0)


def lattice(R, scale=True):
    return clip_and_rescale(generate_lattice(LATTICE, R), R, scale=scale, on_overlap="clamp")


@pytest.mark.parametrize("R", [2.0, 3.5])
def test_cubic_lattice_directions_agree(R):
    # the clipped cubic lattice is invariant under coordinate permutations
    cfg, _ = lattice(R)
    st = SolverSettings(eta_ls=1e-12)
    prob = CorrectorProblem(Discretization(cfg, 1), "iso", st)
    vals = prob.directional_values(3.0)
    assert max(vals) - min(vals) <= 1e-10
    e1 = CorrectorProblem(Discretization(cfg, 1), "e1", st).value(3.0)
    assert e1 == pytest.approx(np.mean(vals), abs=1e-10)


def test_bounds_between_harmonic_and_arithmetic_means():
    cfg = random_config(25, 3.5, seed=31)
    res = compute_all(cfg, 2)
    for a in (res.a1, res.a2, res.a3):
        assert cfg.harmonic_mean() <= a <= cfg.arithmetic_mean()


def test_energy_curve_concave():
    cfg, _ = lattice(3.0)
    prob = CorrectorProblem(Discretization(cfg, 1), "e1", SolverSettings(eta_ls=1e-11))
    a = np.linspace(1.0, 10.0, 10)
    J = energy_curve(prob, a)
    assert np.all(np.diff(J, 2) < 0)


def test_functional_matches_problem_value():
    cfg = random_config(6, 3.0, seed=32)
    prob = CorrectorProblem(Discretization(cfg, 1), "iso")
    assert functional_J(cfg, 1, None, 2.5) == pytest.approx(prob.value(2.5), rel=1e-12)


def test_a2_is_value_at_a1():
    cfg = random_config(12, 3.5, seed=33)
    res = compute_all(cfg, 1, settings=SolverSettings(eta_ls=1e-10))
    assert res.a2 == pytest.approx(functional_J(cfg, 1, None, res.a1,
                                                settings=SolverSettings(eta_ls=1e-10)), abs=1e-9)
    assert res.a2 >= functional_J(cfg, 1, None, res.a3) - 1e-9


def test_deterministic():
    cfg = random_config(15, 3.5, seed=34)
    r1 = compute_all(cfg, 1)
    r2 = compute_all(cfg, 1)
    assert (r1.a1, r1.a2, r1.a3) == (r2.a1, r2.a2, r2.a3)


def test_diagnostics_recorded():
    cfg = random_config(10, 3.5, seed=35)
    d = compute_all(cfg, 1).diagnostics
    for key in ("fixed_point_iterations", "linear_systems_total", "gmres_iters_total",
                "rule_degree", "setup_ms", "wall_ms"):
        assert key in d
    assert d["fixed_point_converged"] and d["optimizer_converged"]


def test_window_one_equals_raw():
    R = [2.0, 2.5, 3.0]
    v = [1.0, 4.0, 2.0]
    Rw, vw = window_average(R, v, 1)
    assert np.array_equal(Rw, R) and np.array_equal(vw, v)
    Rw, vw = window_average(R, v, 2)
    assert np.allclose(Rw, [2.25, 2.75]) and np.allclose(vw, [2.5, 3.0])
    assert window_average(R, v, 4)[0].size == 0
    with pytest.raises(ValueError):
        window_average(R, v, 0)


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec((3.0, 2.0))
    with pytest.raises(ValueError):
        SweepSpec((2.0,), window=0)
    with pytest.raises(ValueError):
        SweepSpec((2.0,), mode="xyz")


def test_sweep_records_failures_and_continues():
    good = lattice_source(LATTICE)

    def source(R):
        if R == 2.5:
            raise RuntimeError("boom")
        return good(R)

    res = sweep(SweepSpec((2.0, 2.5, 3.0), mode="e1"), source, backend="dense")
    assert res.results[1] is None and 2.5 in res.errors
    assert res.results[0] is not None and res.results[2] is not None


def test_sweep_matches_compute_all():
    res = sweep(SweepSpec((2.0, 3.0), window=2, mode="e1"), lattice_source(LATTICE),
                backend="dense")
    cfg, info = lattice(3.0)
    direct = compute_all(cfg, 1, mode="e1", clip=info)
    assert res.results[1].a2 == direct.a2
    assert res.results[1].gamma == info.gamma
    assert res.averaged["a2"][1][0] == pytest.approx((res.results[0].a2 + direct.a2) / 2)


def test_self_reference():
    res = sweep(SweepSpec((2.0, 2.5, 3.0), mode="e1"), lattice_source(LATTICE), backend="dense")
    assert self_reference(res.results, "a2", 2) == pytest.approx(
        (res.results[1].a2 + res.results[2].a2) / 2)
    with pytest.raises(ValueError):
        self_reference(res.results, "a2", 4)


def test_csv_and_json_output(tmp_path):
    cfg = random_config(5, 3.0, seed=36)
    res = compute_all(cfg, 1)
    write_csv([res], tmp_path / "out.csv")
    with open(tmp_path / "out.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS
    assert float(rows[0]["a2"]) == res.a2
    data = json.loads(results_to_json([res, None], {"seed": 1}))
    assert data["results"][0]["a1"] == res.a1 and data["results"][1] is None
