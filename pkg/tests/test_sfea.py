from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpsedf.dataset import Lattice
from gpsedf.exceptions import ContractError
from gpsedf.fesolver import FEResult, canonical_problem, solve_static
from gpsedf.kinematics import GOH_TRUTH
from gpsedf.posterior_reduce import StochasticSEDF, fit_tensor_spline
from gpsedf.sfea import DEFAULT_SNAPSHOTS, EnsembleError, build_sigma_points, ensemble_stats, propagate

BOX = (2.9, 3.42, 0.59, 1.54)


def fake_results(values, vm=None):
    out = {}
    for k, u in enumerate(values):
        u = np.asarray(u, dtype=float)
        v = np.abs(u[:2]) if vm is None else np.asarray(vm[k], dtype=float)
        out[k] = FEResult(u, np.zeros((1, 4, 2, 2)), v, np.zeros_like(u), {1.0: {"u": u, "von_mises": v}})
    return out


@pytest.fixture(scope="module")
def goh_spline():
    lat = Lattice(BOX, (30, 30))
    return lat, fit_tensor_spline(lat, GOH_TRUTH.energy(lat.points[:, 0], lat.points[:, 1]))


def test_m1_points_and_weights():
    ens = build_sigma_points([4.0])
    assert ens.points.ravel().tolist() == [0.0, 2.0, -2.0]
    assert ens.w.tolist() == [0.0, 0.5, 0.5]
    assert ens.v.tolist() == [2.0, 0.5, 0.5]
    assert build_sigma_points([4.0], standard_ut=True).v.tolist() == [0.0, 0.5, 0.5]


def test_m2_points():
    ens = build_sigma_points([1.0, 1.0])
    r = np.sqrt(2.0)
    expected = [[0, 0], [r, 0], [-r, 0], [0, r], [0, -r]]
    assert np.array_equal(ens.points, np.array(expected, dtype=float))
    assert len(ens) == 5 and ens.m == 2


def test_zero_eigenvalues_and_empty():
    ens = build_sigma_points([0.0, 0.0, 0.0])
    assert len(ens) == 7 and np.all(ens.points == 0.0)
    empty = build_sigma_points([])
    assert len(empty) == 1 and empty.w.tolist() == [1.0] and empty.v.tolist() == [0.0]
    with pytest.raises(ContractError):
        build_sigma_points([1.0, -0.5])


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_moment_identity_exact(m):
    # m * lambda_j is a perfect square so every point is exactly representable
    squares = [Fraction((j + 1) ** 2) for j in range(m)]
    lam = [s / m for s in squares]
    ens = build_sigma_points([float(x) for x in lam])
    w = [Fraction(x).limit_denominator(1000) for x in ens.w]
    v = [Fraction(x).limit_denominator(1000) for x in ens.v]
    assert w[1:] == [Fraction(1, 2 * m)] * (2 * m) and v[0] == 2
    pts = [[Fraction(x) for x in p] for p in ens.points]
    mean = [sum(wk * p[j] for wk, p in zip(w, pts)) for j in range(m)]
    assert mean == [0] * m
    cov = [[sum(vk * p[i] * p[j] for vk, p in zip(v, pts)) for j in range(m)] for i in range(m)]
    assert cov == [[lam[i] if i == j else 0 for j in range(m)] for i in range(m)]


@pytest.mark.parametrize("m", [1, 2, 4])
def test_linear_map_identity(m, rng):
    lam = rng.uniform(0.1, 3.0, m)
    A = rng.normal(size=(6, m))
    ens = build_sigma_points(lam)
    stats = ensemble_stats(fake_results([A @ p for p in ens.points]), ens, full_cov=True)
    assert np.max(np.abs(stats.mean_u[1.0])) < 1e-10
    expected = A @ np.diag(lam) @ A.T
    assert np.max(np.abs(stats.cov_u[1.0] - expected)) < 1e-10
    assert np.allclose(stats.std_u[1.0], np.sqrt(np.diag(expected)), atol=1e-10)


@given(st.floats(-5, 5), st.floats(0, 3))
def test_three_point_variance(r, d):
    ens = build_sigma_points([1.0])
    stats = ensemble_stats(fake_results([[r, 0.0], [r + d, 0.0], [r - d, 0.0]]), ens)
    assert stats.mean_u[1.0][0] == pytest.approx(r, abs=1e-12)
    assert stats.std_u[1.0][0] == pytest.approx(d, rel=1e-12, abs=1e-12)


def test_identical_members_have_zero_std():
    ens = build_sigma_points([0.3, 0.2])
    stats = ensemble_stats(fake_results([[1.0, 2.0, 3.0]] * 5), ens)
    assert np.all(stats.std_u[1.0] == 0.0) and np.all(stats.std_vm[1.0] == 0.0)


def test_permutation_invariance(rng):
    ens = build_sigma_points([0.5, 0.25, 0.1])
    values = rng.normal(size=(7, 10))
    res = fake_results(values)
    shuffled = {k: res[k] for k in rng.permutation(7)}
    a, b = ensemble_stats(res, ens, full_cov=True), ensemble_stats(shuffled, ens, full_cov=True)
    assert np.array_equal(a.mean_u[1.0], b.mean_u[1.0]) and np.array_equal(a.std_u[1.0], b.std_u[1.0])
    assert np.array_equal(a.cov_u[1.0], b.cov_u[1.0])


def test_full_covariance_psd(rng):
    ens = build_sigma_points(rng.uniform(0.1, 1.0, 4))
    stats = ensemble_stats(fake_results(rng.normal(size=(9, 12))), ens, full_cov=True)
    C = stats.cov_u[1.0]
    assert np.array_equal(C, C.T) and np.linalg.eigvalsh(C).min() > -1e-12


def test_stats_contract_errors():
    ens = build_sigma_points([1.0])
    res = fake_results([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(ContractError):
        ensemble_stats({k: res[k] for k in (0, 1)}, ens)
    res[2] = fake_results([[0.0, 0.0, 1.0]])[0]
    with pytest.raises(ContractError):
        ensemble_stats(res, ens)


def test_deterministic_sedf_collapses(goh_spline):
    _, surf = goh_spline
    sedf = StochasticSEDF.deterministic(surf)
    mesh, bcs = canonical_problem(4)
    results, ens = propagate(sedf, mesh, bcs)
    assert len(results) == 1
    stats = ensemble_stats(results, ens)
    assert stats.snapshots == DEFAULT_SNAPSHOTS
    # members run on the load schedule merged with the snapshot fractions
    merged = replace(bcs, load_schedule=(0.25, 1 / 3, 0.5, 2 / 3, 0.75, 1.0))
    direct = solve_static(mesh, merged, sedf.mean)
    assert np.array_equal(stats.mean_u[1.0], direct.displacement)
    for lf in DEFAULT_SNAPSHOTS:
        assert np.all(stats.std_u[lf] == 0.0) and np.all(stats.std_vm[lf] == 0.0)
    assert np.all(stats.mean_u[0.0] == 0.0)


def test_small_symmetric_perturbation(goh_spline):
    lat, surf = goh_spline
    P = lat.points
    mode = fit_tensor_spline(lat, (P[:, 0] - 3.0) ** 2 + 0.5 * (P[:, 1] - 1.0) ** 2)
    sedf = StochasticSEDF(surf, [1e-4], [mode], surf.box)
    mesh, bcs = canonical_problem(4)
    results, ens = propagate(sedf, mesh, bcs, snapshots=(1.0,))
    assert len(results) == 3
    stats = ensemble_stats(results, ens)
    central = results[0].displacement
    spread = np.abs(results[1].displacement - central).max()
    assert spread > 0
    # second-order deviation of the mean from the central run
    assert np.abs(stats.mean_u[1.0] - central).max() < 0.05 * spread
    assert np.all(stats.std_u[1.0] >= 0)


def test_failing_member_names_k(goh_spline):
    _, surf = goh_spline
    sedf = StochasticSEDF(surf, [4.0], [surf], surf.box)  # nu = -2 flips the energy
    mesh, bcs = canonical_problem(4, load_schedule=(1.0,))
    with pytest.raises(EnsembleError) as info:
        propagate(sedf, mesh, bcs, snapshots=(1.0,), solver_kwargs={"max_iter": 10})
    assert info.value.k == 2 and info.value.nu.tolist() == [-2.0]


def test_statistics_json(tmp_path, goh_spline):
    _, surf = goh_spline
    mesh, bcs = canonical_problem(3)
    results, ens = propagate(StochasticSEDF.deterministic(surf), mesh, bcs)
    stats = ensemble_stats(results, ens)
    stats.to_json(tmp_path / "s.json")
    import json

    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["ensemble"]["m"] == 0 and len(doc["fields"]) == 4
    assert len(doc["fields"]["1"]["mean_displacement"]) == len(mesh.nodes)
