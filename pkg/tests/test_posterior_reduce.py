import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from gpsedf.dataset import Lattice
from gpsedf.exceptions import ContractError, ExtrapolationError
from gpsedf.gp_exact import JointPosterior
from gpsedf.kinematics import GOH_TRUTH
from gpsedf.posterior_reduce import (
    SplineSurface,
    StochasticSEDF,
    build_stochastic_sedf,
    fit_tensor_spline,
    sample_posterior_grid,
    spline_eval,
    truncate_eigen,
)

BOX = (2.9, 3.42, 0.59, 1.54)


def interior(rng, n, box=BOX, margin=1e-3):
    lo = np.array([box[0] + margin, box[2] + margin])
    hi = np.array([box[1] - margin, box[3] - margin])
    return rng.uniform(lo, hi, (n, 2))


@pytest.fixture(scope="module")
def goh_surface():
    lat = Lattice(BOX, (50, 50))
    return lat, fit_tensor_spline(lat, GOH_TRUTH.energy(lat.points[:, 0], lat.points[:, 1]))


# --- eigen truncation --------------------------------------------------------


def test_rank_one():
    v = np.array([1.0, -2.0, 2.0])
    modes = truncate_eigen(np.outer(v, v))
    assert modes.m == 1
    assert modes.eigenvalues[0] == pytest.approx(9.0, rel=1e-12)
    assert abs(abs(modes.eigenvectors[:, 0] @ v) / 3.0 - 1.0) < 1e-12


def test_identity_keeps_all_but_four():
    # equal eigenvalues: residual share (N - m)/N < 0.05 first holds at m = 96
    modes = truncate_eigen(np.eye(100))
    assert modes.m == 96


def test_zero_and_degenerate_tolerance():
    assert truncate_eigen(np.zeros((5, 5))).m == 0
    assert truncate_eigen(np.diag([3.0, 2.0, 1.0]), tol=1.0).m == 0
    with pytest.raises(ContractError):
        truncate_eigen(np.zeros((2, 3)))


@given(st.integers(0, 10_000), st.sampled_from([0.01, 0.05, 0.2]))
def test_truncation_satisfies_frobenius_ratio(seed, tol):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(12, 12)) * np.exp(-np.arange(12))
    Sigma = A @ A.T
    modes = truncate_eigen(Sigma, tol)
    assert modes.truncation_error(Sigma) < tol
    assert np.all(np.diff(modes.eigenvalues) <= 0)
    assert np.allclose(modes.eigenvectors.T @ modes.eigenvectors, np.eye(modes.m), atol=1e-10)
    if modes.m > 1:
        fewer = modes.all_eigenvalues[: modes.m - 1]
        assert 1.0 - np.sum(fewer**2) / np.sum(modes.all_eigenvalues**2) >= tol


def test_negative_eigenvalues_clamped():
    modes = truncate_eigen(np.diag([1.0, -1e-9]))
    assert modes.m == 1 and np.all(modes.all_eigenvalues >= 0)


# --- splines -----------------------------------------------------------------


def test_basis_partition_of_unity(goh_surface, rng):
    _, surf = goh_surface
    pts = interior(rng, 1000)
    B1 = BSpline.design_matrix(pts[:, 0], surf.knots1, 3).toarray()
    B4 = BSpline.design_matrix(pts[:, 1], surf.knots4, 3).toarray()
    assert np.all(B1 >= 0) and np.all(B4 >= 0)
    tensor_sum = np.einsum("pi,pj->p", B1, B4)
    assert np.max(np.abs(tensor_sum - 1.0)) < 1e-12
    ones = SplineSurface(surf.knots1, surf.knots4, np.ones_like(surf.coef))
    assert np.max(np.abs(ones(pts[:, 0], pts[:, 1]) - 1.0)) < 1e-12


def test_constant_surface_derivatives_vanish(rng):
    lat = Lattice(BOX, (6, 7))
    surf = fit_tensor_spline(lat, np.full(len(lat), 4.2))
    pts = interior(rng, 200)
    assert np.allclose(surf(pts[:, 0], pts[:, 1]), 4.2, atol=1e-12)
    for d1, d4 in [(1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]:
        assert np.max(np.abs(spline_eval(surf, pts, d1, d4))) < 1e-9


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_bilinear_reproduction(a, b, c):
    lat = Lattice(BOX, (8, 9))
    f = lambda x, y: a * x + b * y + c * x * y  # noqa: E731
    surf = fit_tensor_spline(lat, f(lat.points[:, 0], lat.points[:, 1]))
    pts = interior(np.random.default_rng(0), 100)
    scale = 1.0 + abs(a) + abs(b) + abs(c)
    assert np.max(np.abs(surf(pts[:, 0], pts[:, 1]) - f(pts[:, 0], pts[:, 1]))) < 1e-10 * scale * 10


def test_node_interpolation(goh_surface):
    lat, surf = goh_surface
    values = GOH_TRUTH.energy(lat.points[:, 0], lat.points[:, 1])
    err = np.abs(surf(lat.points[:, 0], lat.points[:, 1]) - values)
    assert np.max(err) <= 1e-9 * np.max(np.abs(values))


def test_goh_off_lattice_error(goh_surface, rng):
    _, surf = goh_surface
    pts = interior(rng, 2000)
    err = np.abs(surf(pts[:, 0], pts[:, 1]) - GOH_TRUTH.energy(pts[:, 0], pts[:, 1]))
    assert np.max(err) < 1e-4


def test_derivatives_match_fd(goh_surface, rng):
    _, surf = goh_surface
    pts = interior(rng, 100, margin=1e-2)
    h = 1e-6
    for d1, d4 in [(0, 0), (1, 0), (0, 1)]:
        base = lambda p: spline_eval(surf, p, d1, d4)  # noqa: E731
        for axis, (n1, n4) in ((0, (d1 + 1, d4)), (1, (d1, d4 + 1))):
            e = np.zeros(2)
            e[axis] = h
            fd = (base(pts + e) - base(pts - e)) / (2 * h)
            exact = spline_eval(surf, pts, n1, n4)
            assert np.max(np.abs(exact - fd)) <= 1e-5 * np.max(np.abs(exact)), (n1, n4)


def test_mixed_partials_commute(goh_surface, rng):
    _, surf = goh_surface
    pts = interior(rng, 100)
    t1, t4, c = surf.knots1, surf.knots4, surf.coef
    first = np.array([BSpline(t4, BSpline(t1, c, 3).derivative()(x1), 3).derivative()(x4) for x1, x4 in pts])
    second = np.array([BSpline(t1, BSpline(t4, c.T, 3).derivative()(x4), 3).derivative()(x1) for x1, x4 in pts])
    d14 = spline_eval(surf, pts, 1, 1)
    scale = np.max(np.abs(d14))
    assert np.max(np.abs(first - second)) <= 1e-12 * scale
    assert np.max(np.abs(first - d14)) <= 1e-12 * scale


def test_goh_second_derivatives_close(goh_surface, rng):
    _, surf = goh_surface
    pts = interior(rng, 200, margin=0.02)
    d = surf.derivs(pts[:, 0], pts[:, 1])
    t = GOH_TRUTH.derivs(pts[:, 0], pts[:, 1])
    for name in ("W1", "W4", "W11", "W44", "W14"):
        ref = np.asarray(getattr(t, name))
        assert np.max(np.abs(getattr(d, name) - ref)) < 1e-2 * np.max(np.abs(ref)), name


def test_extrapolation_raises(goh_surface):
    _, surf = goh_surface
    with pytest.raises(ExtrapolationError) as info:
        surf(np.array([3.0, 3.6]), np.array([1.0, 1.0]), element=np.array([4, 9]))
    assert info.value.element == 9
    assert np.isfinite(surf(BOX[1], BOX[3]))


def test_invalid_knots_rejected():
    t = np.r_[[0.0] * 4, [1.0] * 4]
    with pytest.raises(ContractError):
        SplineSurface(t[::-1], t, np.zeros((4, 4)))
    with pytest.raises(ContractError):
        SplineSurface(np.r_[0.0, t[1:]] + np.r_[0, 0.5, 0, 0, 0, 0, 0, 0], t, np.zeros((4, 4)))
    with pytest.raises(ContractError):
        SplineSurface(t, t, np.zeros((3, 4)))
    with pytest.raises(ContractError):
        fit_tensor_spline(Lattice(BOX, (3, 8)), np.zeros(24))


# --- grid sampling and the stochastic SEDF -----------------------------------


def fake_gp(mean_fn, cov_scale=1.0, box=BOX):
    """Predict function with a smooth squared-exponential posterior."""

    def predict_fn(points, tags, full_cov):
        d = points[:, None, :] - points[None, :, :]
        K = cov_scale * np.exp(-0.5 * np.sum((d / 0.3) ** 2, axis=-1))
        return JointPosterior(points, tuple(tags), mean_fn(points), cov=K)

    predict_fn.box = box
    return predict_fn


def test_single_point_grid():
    gp = fake_gp(lambda p: p[:, 0] - 3.0, cov_scale=0.7)
    post = sample_posterior_grid(gp, Lattice((3.1, 3.1, 1.2, 1.2), (1, 1)))
    assert post.W_bar == pytest.approx([0.1]) and post.Sigma.ravel() == pytest.approx([0.7])


def test_dense_grid_limit():
    with pytest.raises(ContractError):
        sample_posterior_grid(fake_gp(lambda p: p[:, 0]), resolution=(101, 100))


def test_tol_one_gives_deterministic_mean():
    gp = fake_gp(lambda p: GOH_TRUTH.energy(p[:, 0], p[:, 1]))
    sedf = build_stochastic_sedf(gp, tol=1.0, resolution=(10, 10))
    assert sedf.m == 0
    pts = interior(np.random.default_rng(0), 50)
    assert np.array_equal(sedf.energy(pts[:, 0], pts[:, 1]), sedf.mean(pts[:, 0], pts[:, 1]))


def test_modes_orthonormal_at_nodes_and_json(tmp_path):
    gp = fake_gp(lambda p: GOH_TRUTH.energy(p[:, 0], p[:, 1]), cov_scale=0.01)
    sedf, post, modes = build_stochastic_sedf(gp, resolution=(12, 12), return_parts=True)
    assert 0 < sedf.m < len(post.grid) // 10
    P = post.grid.points
    E = np.column_stack([s(P[:, 0], P[:, 1]) for s in sedf.modes])
    assert np.allclose(E.T @ E, np.eye(sedf.m), atol=1e-9)
    sedf.to_json(tmp_path / "sedf.json")
    back = StochasticSEDF.from_json(tmp_path / "sedf.json")
    nu = np.linspace(-1, 1, sedf.m)
    pts = interior(np.random.default_rng(1), 30)
    assert np.array_equal(back.energy(pts[:, 0], pts[:, 1], nu), sedf.energy(pts[:, 0], pts[:, 1], nu))
    with pytest.raises(ContractError):
        sedf.realization(np.zeros(sedf.m + 1))


@pytest.mark.slow
def test_seeded_run_reduction(runs):
    _, _, state, _ = runs.get(8)
    sedf, post, modes = build_stochastic_sedf(state, return_parts=True)
    N = len(post.grid)
    assert modes.m <= N // 10
    assert modes.truncation_error(post.Sigma) < 0.05
    rng = np.random.default_rng(0)
    z = rng.standard_normal((10_000, sedf.m)) * np.sqrt(sedf.eigenvalues)
    P = post.grid.points
    E = np.column_stack([s(P[:, 0], P[:, 1]) for s in sedf.modes])
    samples = sedf.mean(P[:, 0], P[:, 1]) + z @ E.T
    target = (E**2) @ sedf.eigenvalues
    keep = target > 1e-3 * target.max()
    assert np.max(np.abs(samples.var(axis=0)[keep] / target[keep] - 1.0)) < 0.1
    assert np.allclose(sedf.mean(P[:, 0], P[:, 1]), post.W_bar, atol=1e-9 * np.abs(post.W_bar).max())
