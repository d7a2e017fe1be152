import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpsedf.dataset import Lattice, ObservationSet, generate_protocols, synthesize_observations
from gpsedf.exceptions import ContractError, DomainError
from gpsedf.gp_exact import optimize_hyperparams, posterior_exact
from gpsedf.evaluation import (
    fit_analytical_models,
    fit_metrics,
    grid_error,
    hull_mask,
    prediction_protocol_1,
    prediction_protocols,
)
from gpsedf.kinematics import GOH_TRUTH, MODEL_PARAMS, AnalyticalModel, stress_coefficients

BOX = (2.95, 3.4, 0.7, 1.5)


@pytest.fixture(scope="module")
def lattice():
    return Lattice(BOX, (15, 15))


def truth_fields(points, model=GOH_TRUTH):
    d = model.derivs(points[:, 0], points[:, 1])
    return {"val": np.asarray(d.W), "d1": np.asarray(d.W1), "d4": np.asarray(d.W4)}


def test_grid_error_zero_for_truth(lattice):
    rep = grid_error(truth_fields(lattice.points), GOH_TRUTH, lattice.points)
    for tag in ("val", "d1", "d4"):
        assert rep.max(tag) == 0.0


def test_grid_error_constant_offset(lattice):
    f = truth_fields(lattice.points)
    shifted = {t: v + 0.12 * np.max(np.abs(v)) for t, v in f.items()}
    rep = grid_error(shifted, GOH_TRUTH, lattice.points)
    for tag in f:
        assert np.allclose(rep.errors[tag], 12.0, rtol=1e-12)


def test_grid_error_normalizes_by_truth_only(lattice):
    f = truth_fields(lattice.points)
    other = AnalyticalModel("GOH", {"mu": 5.0, "k1": 4.0, "k2": 10.0, "kappa": 0.1})
    field = {"val": f["val"] + 1.0}
    rep = grid_error(field, other, lattice.points)
    assert np.allclose(rep.errors["val"], 100.0 / np.max(np.abs(f["val"])))


def test_grid_error_contract(lattice):
    with pytest.raises(ContractError):
        grid_error({"val": np.zeros(3)}, GOH_TRUTH, lattice.points)
    with pytest.raises(ContractError):
        grid_error({"d11": np.zeros(len(lattice))}, GOH_TRUTH, lattice.points)
    with pytest.raises(DomainError):
        # the energy vanishes at the reference point only
        grid_error({"val": np.zeros(1)}, GOH_TRUTH, np.array([[3.0, 1.0]]))


def test_hull_mask(obs8, lattice):
    inside = hull_mask(lattice.points, obs8.invariants)
    assert inside.any() and (~inside).any()
    assert hull_mask(obs8.invariants, obs8.invariants).all()


def test_fit_metrics_definitions(obs8):
    perfect = fit_metrics(obs8, obs8.y)
    assert perfect.L2 == 0.0 and perfect.R2 == 1.0
    mean_only = fit_metrics(obs8, np.full_like(obs8.y, obs8.y.mean()))
    assert mean_only.R2 == pytest.approx(0.0, abs=1e-12)
    off = obs8.y + np.array([0.3, -0.4])
    assert fit_metrics(obs8, off).L2 == pytest.approx(0.5 * np.sqrt(len(obs8)), rel=1e-12)
    with pytest.raises(ContractError):
        fit_metrics(obs8, obs8.y[:, 0])
    flat = ObservationSet.from_arrays(obs8.X[:3], np.ones((3, 2)))
    with pytest.raises(DomainError):
        fit_metrics(flat, flat.y)


@given(st.randoms(use_true_random=False))
def test_fit_metrics_permutation_invariant(rand):
    obs = synthesize_observations(generate_protocols(2, steps=6), GOH_TRUTH, 0.02, seed=1)
    pred = obs.y + 0.1 * np.sin(np.arange(obs.y.size)).reshape(obs.y.shape)
    perm = np.array(rand.sample(range(len(obs)), len(obs)))
    a = fit_metrics(obs, pred)
    b = fit_metrics(ObservationSet.from_arrays(obs.X[perm], obs.y[perm]), pred[perm])
    assert a.L2 == pytest.approx(b.L2, rel=1e-12) and a.R2 == pytest.approx(b.R2, rel=1e-12)


def test_goh_self_recovery():
    obs = synthesize_observations(generate_protocols(4), GOH_TRUTH, 0.0, seed=0)
    fit = fit_analytical_models(obs, kinds=("GOH",), restarts=10)["GOH"]
    assert fit.ok and fit.metrics.L2 < 1e-6
    for name, value in GOH_TRUTH.params.items():
        assert fit.params[name] == pytest.approx(value, rel=0.01), name


@pytest.fixture(scope="module")
def model_fits(obs8):
    return fit_analytical_models(obs8)


def test_all_models_finite(model_fits):
    assert set(model_fits) == set(MODEL_PARAMS) and len(model_fits) == 7
    for kind, fit in model_fits.items():
        assert fit.ok, kind
        assert np.isfinite(fit.metrics.L2) and fit.metrics.R2 <= 1.0


def test_hgo_worse_than_goh(model_fits):
    assert model_fits["HGO"].metrics.L2 > model_fits["GOH"].metrics.L2


def test_fits_deterministic(obs3):
    a = fit_analytical_models(obs3, kinds=("HGO", "LS"), restarts=3, seed=5)
    b = fit_analytical_models(obs3, kinds=("HGO", "LS"), restarts=3, seed=5)
    assert a["HGO"].params == b["HGO"].params and a["LS"].params == b["LS"].params


@pytest.fixture(scope="module")
def exact_predict(obs3):
    h = optimize_hyperparams(obs3)
    return lambda p, t, fc: posterior_exact(obs3, h, p, t, full_cov=fc)


def test_protocol_start_near_zero(exact_predict):
    curves = prediction_protocols(exact_predict, GOH_TRUTH)
    p1, p2 = curves["protocol_1"], curves["protocol_2"]
    assert np.allclose(p1.points[0], [3.0, 1.0]) and np.allclose(p2.points[0], [3.0, 1.0], atol=1e-12)
    for c in (p1, p2):
        for comp, mean in c.mean.items():
            scale = np.max(np.abs(c.truth[comp])) + 1e-12
            assert abs(mean[0]) < 0.05 * max(scale, 1.0), comp
            assert abs(c.truth[comp][0]) < 1e-12
    assert p1.stretch[-1] == pytest.approx(1.31)
    assert np.allclose(p2.points[-1], [3.3, 0.8])


def test_band_matches_monte_carlo(exact_predict, rng):
    curves = prediction_protocol_1(exact_predict, n=32)
    idx = [3, 10, 17, 24, 31]
    pts = curves.points[idx]
    post = exact_predict(pts, ("d1", "d4"), True)
    draws = rng.multivariate_normal(post.mean, post.cov, size=10_000, method="eigh")
    lx = curves.stretch[idx]
    a1, a4, b1 = stress_coefficients(lx, np.ones_like(lx))
    n = len(idx)
    Pxx = a1 * draws[:, :n] + a4 * draws[:, n:]
    Pyy = b1 * draws[:, :n]
    assert np.allclose(Pxx.std(axis=0), curves.std["Pxx"][idx], rtol=0.05)
    assert np.allclose(Pyy.std(axis=0), curves.std["Pyy"][idx], rtol=0.05)
    assert np.allclose(Pxx.mean(axis=0), curves.mean["Pxx"][idx], atol=0.05 * curves.std["Pxx"][idx].max())
