"""Closed-form GP posterior for stress observations without constraints.

The stresses are linear in (Psi_1, Psi_4) at each observed state, so their
covariance with any latent channel is the kernel block mapped through the
per-record coefficient rows. A single near-noiseless observation pins Psi
to zero at the undeformed state.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import REFERENCE_POINT, ObservationSet
from .exceptions import ContractError
from .kernel import Hyperparams, cholesky_with_jitter, cross_cov, prior_mean, zero_lag_variance
from .kinematics import invariants_from_stretches, stress_coefficients

__all__ = [
    "LinearObservationMap",
    "JointPosterior",
    "posterior_exact",
    "log_marginal_likelihood",
    "initial_hyperparams",
    "ExactGPRegressor",
]

LATENT_TAGS = ("d1", "d4")
_LOG_NAMES = ("sigma_f", "lengthscale", "ex2", "ey2")


@dataclass
class JointPosterior:
    """Gaussian over tagged channels at query points, laid out tag-major."""

    points: np.ndarray
    tags: tuple
    mean: np.ndarray
    cov: np.ndarray = None
    var: np.ndarray = None
    extrapolated: np.ndarray = None

    def __post_init__(self):
        if self.var is None and self.cov is not None:
            self.var = np.diag(self.cov).copy()

    def _slice(self, tag):
        n = self.points.shape[0]
        i = self.tags.index(tag)
        return slice(i * n, (i + 1) * n)

    def mean_of(self, tag):
        return self.mean[self._slice(tag)]

    def var_of(self, tag):
        return self.var[self._slice(tag)]

    def std_of(self, tag):
        return np.sqrt(np.maximum(self.var_of(tag), 0.0))

    def block(self, tag_a, tag_b):
        if self.cov is None:
            raise ContractError("posterior was computed without full covariance")
        return self.cov[self._slice(tag_a), self._slice(tag_b)]


class LinearObservationMap:
    """Maps latent [Psi_1(X), Psi_4(X), Psi(ref)] to [Pxx, Pyy, Psi(ref)].

    ``H`` is the dense observation matrix; rows are ordered Pxx records,
    Pyy records, then the reference row.
    """

    def __init__(self, lambda_x, lambda_y, reference=REFERENCE_POINT):
        lx = np.asarray(lambda_x, dtype=float)
        ly = np.asarray(lambda_y, dtype=float)
        I1, I4 = invariants_from_stretches(lx, ly)
        self.points = np.column_stack([I1, I4])
        self.reference = np.array([reference], dtype=float)
        self.a1, self.a4, self.b1 = stress_coefficients(lx, ly)
        n = lx.size
        self.n = n
        H = np.zeros((2 * n + 1, 2 * n + 1))
        idx = np.arange(n)
        H[idx, idx] = self.a1
        H[idx, n + idx] = self.a4
        H[n + idx, idx] = self.b1
        H[2 * n, 2 * n] = 1.0
        self.H = H

    @classmethod
    def from_observations(cls, obs):
        return cls(obs.lambda_x, obs.lambda_y)

    def _H(self, like):
        if type(like).__module__.startswith("torch"):
            return torch.as_tensor(self.H, dtype=like.dtype)
        return self.H

    def latent_cross(self, Y, tags_y, h):
        """Cov(latent, channels of Y): shape (2n + 1, len(tags_y) * len(Y))."""
        X, ref = self.points, self.reference
        if _torch_like(Y):
            X = torch.as_tensor(X, dtype=Y.dtype)
            ref = torch.as_tensor(ref, dtype=Y.dtype)
        top = cross_cov(X, LATENT_TAGS, Y, tags_y, h)
        bottom = cross_cov(ref, ("val",), Y, tags_y, h)
        if _torch_like(top):
            return torch.cat([top, bottom], dim=0)
        return np.vstack([top, bottom])

    def obs_cross(self, Y, tags_y, h):
        K = self.latent_cross(Y, tags_y, h)
        return self._H(K) @ K

    def latent_cov(self, h, torch_dtype=None):
        """Prior covariance of [Psi_1(X), Psi_4(X), Psi(ref)]."""
        X, ref = self.points, self.reference
        if torch_dtype is not None:
            X = torch.as_tensor(X, dtype=torch_dtype)
            ref = torch.as_tensor(ref, dtype=torch_dtype)
        Kll = cross_cov(X, LATENT_TAGS, X, LATENT_TAGS, h)
        Klr = cross_cov(X, LATENT_TAGS, ref, ("val",), h)
        Krr = cross_cov(ref, ("val",), ref, ("val",), h)
        if torch_dtype is not None:
            return torch.cat([torch.cat([Kll, Klr], 1), torch.cat([Klr.T, Krr], 1)], 0)
        return np.block([[Kll, Klr], [Klr.T, Krr]])

    def obs_cov(self, h, torch_dtype=None):
        K = self.latent_cov(h, torch_dtype)
        H = self._H(K)
        return H @ K @ H.T

    def obs_mean(self, h):
        """Prior mean of the observation vector."""
        if _torch_like(h.alpha):
            a1, a4, b1 = (torch.as_tensor(c) for c in (self.a1, self.a4, self.b1))
            zero = torch.zeros(1, dtype=torch.float64)
            return torch.cat([a1 * h.alpha + a4 * h.beta, b1 * h.alpha, zero])
        return np.concatenate([self.a1 * h.alpha + self.a4 * h.beta, self.b1 * h.alpha, [0.0]])

    def noise_diag(self, h):
        n = self.n
        if _torch_like(h.ex2):
            one = torch.ones(n, dtype=torch.float64)
            return torch.cat([h.ex2 * one, h.ey2 * one, torch.tensor([h.e02], dtype=torch.float64)])
        return np.concatenate([np.full(n, h.ex2), np.full(n, h.ey2), [h.e02]])


def _torch_like(x):
    return type(x).__module__.startswith("torch")


def observation_vector(obs):
    """Stacked [Pxx, Pyy, 0] target for the map above."""
    return np.concatenate([obs.Pxx, obs.Pyy, [0.0]])


def posterior_exact(obs, h, points, tags=("val",), full_cov=True):
    """Posterior over ``tags`` at ``points`` given stresses and the reference value."""
    if len(obs) == 0:
        raise ContractError("no observations")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ContractError("no query points")
    tags = tuple(tags)
    omap = LinearObservationMap.from_observations(obs)
    Kyy = omap.obs_cov(h) + np.diag(omap.noise_diag(h))
    L, _ = cholesky_with_jitter(Kyy, scale=h.sigma_f**2)
    resid = observation_vector(obs) - omap.obs_mean(h)
    Kys = omap.obs_cross(points, tags, h)
    alpha = scipy.linalg.cho_solve((L, True), resid)
    mstar = np.concatenate([prior_mean(points, t, h) for t in tags])
    mean = mstar + Kys.T @ alpha
    V = scipy.linalg.solve_triangular(L, Kys, lower=True)
    if full_cov:
        Kss = cross_cov(points, tags, points, tags, h)
        cov = Kss - V.T @ V
        return JointPosterior(points, tags, mean, cov=0.5 * (cov + cov.T))
    prior_var = np.concatenate([np.full(points.shape[0], zero_lag_variance(t, h)) for t in tags])
    return JointPosterior(points, tags, mean, var=prior_var - np.sum(V * V, axis=0))


def _hyper_tensors(h, requires_grad):
    """Torch view of ``h`` with log-parameterized positive entries."""
    raw = {}
    for name in ("alpha", "beta"):
        raw[name] = torch.tensor(float(getattr(h, name)), dtype=torch.float64, requires_grad=requires_grad)
    for name in _LOG_NAMES:
        raw["log_" + name] = torch.tensor(np.log(float(getattr(h, name))), dtype=torch.float64,
                                          requires_grad=requires_grad)
    return raw


def _hyper_from_raw(raw, h):
    return Hyperparams(
        alpha=raw["alpha"], beta=raw["beta"],
        sigma_f=torch.exp(raw["log_sigma_f"]), lengthscale=torch.exp(raw["log_lengthscale"]),
        ex2=torch.exp(raw["log_ex2"]), ey2=torch.exp(raw["log_ey2"]),
        e02=h.e02, nu_probit=h.nu_probit,
    )


def _lml_torch(omap, y, ht):
    Kyy = omap.obs_cov(ht, torch_dtype=torch.float64) + torch.diag(omap.noise_diag(ht))
    L, _ = cholesky_with_jitter(Kyy, scale=float(ht.sigma_f.detach()) ** 2)
    r = (torch.as_tensor(y) - omap.obs_mean(ht)).unsqueeze(1)
    a = torch.linalg.solve_triangular(L, r, upper=False)
    n = y.size
    return -0.5 * (a * a).sum() - torch.log(torch.diagonal(L)).sum() - 0.5 * n * np.log(2 * np.pi)


def log_marginal_likelihood(obs, h, return_grad=False):
    """Gaussian log-evidence of the stress and reference observations.

    With ``return_grad`` the gradient w.r.t. (alpha, beta, log sigma_f,
    log lengthscale, log ex2, log ey2) is returned as a dict.
    """
    if len(obs) == 0:
        raise ContractError("no observations")
    omap = LinearObservationMap.from_observations(obs)
    raw = _hyper_tensors(h, requires_grad=return_grad)
    lml = _lml_torch(omap, observation_vector(obs), _hyper_from_raw(raw, h))
    if not return_grad:
        return float(lml)
    lml.backward()
    return float(lml.detach()), {k: float(v.grad) for k, v in raw.items()}


def initial_hyperparams(obs, noise=0.05):
    """Data-driven starting point for hyperparameter optimization."""
    th = obs.invariants
    diag = np.hypot(*(th.max(axis=0) - th.min(axis=0)))
    sf = float(np.std(np.concatenate([obs.Pxx, obs.Pyy])))
    return Hyperparams(alpha=1.0, beta=1.0, sigma_f=max(sf, 1e-3), lengthscale=max(0.5 * diag, 1e-3),
                       ex2=noise, ey2=noise)


def optimize_hyperparams(obs, h0=None, maxiter=200):
    """Maximize the log marginal likelihood with L-BFGS in log-space."""
    h0 = h0 or initial_hyperparams(obs)
    omap = LinearObservationMap.from_observations(obs)
    y = observation_vector(obs)
    names = ["alpha", "beta"] + ["log_" + n for n in _LOG_NAMES]
    x0 = np.array([h0.alpha, h0.beta] + [np.log(getattr(h0, n)) for n in _LOG_NAMES])

    def fun(x):
        raw = {n: torch.tensor(v, dtype=torch.float64, requires_grad=True) for n, v in zip(names, x)}
        try:
            val = -_lml_torch(omap, y, _hyper_from_raw(raw, h0))
        except Exception:
            return 1e25, np.zeros_like(x)
        val.backward()
        return float(val.detach()), np.array([float(raw[n].grad) for n in names])

    bounds = [(None, None), (None, None), (-7, 7), (-5, 3), (-14, 5), (-14, 5)]
    res = scipy.optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                  options={"maxiter": maxiter})
    x = res.x
    return Hyperparams(alpha=x[0], beta=x[1], sigma_f=np.exp(x[2]), lengthscale=np.exp(x[3]),
                       ex2=np.exp(x[4]), ey2=np.exp(x[5]), e02=h0.e02, nu_probit=h0.nu_probit)


def stress_posterior(posterior_fn, lambda_x, lambda_y):
    """Mean and std of (Pxx, Pyy) from a joint (Psi_1, Psi_4) posterior per state.

    ``posterior_fn(points, tags)`` must return a JointPosterior with full covariance
    restricted to matching points; only the per-point 2x2 blocks are used.
    """
    lx = np.asarray(lambda_x, dtype=float)
    ly = np.asarray(lambda_y, dtype=float)
    I1, I4 = invariants_from_stretches(lx, ly)
    post = posterior_fn(np.column_stack([I1, I4]), ("d1", "d4"))
    a1, a4, b1 = stress_coefficients(lx, ly)
    m1, m4 = post.mean_of("d1"), post.mean_of("d4")
    v11 = np.diag(post.block("d1", "d1"))
    v44 = np.diag(post.block("d4", "d4"))
    v14 = np.diag(post.block("d1", "d4"))
    mean = np.column_stack([a1 * m1 + a4 * m4, b1 * m1])
    var = np.column_stack([a1**2 * v11 + 2 * a1 * a4 * v14 + a4**2 * v44, b1**2 * v11])
    return mean, np.sqrt(np.maximum(var, 0.0))


class ExactGPRegressor(RegressorMixin, BaseEstimator):
    """Constraint-free GP strain-energy regressor.

    ``fit(X, y)`` takes biaxial stretches X = [lambda_x, lambda_y] and
    first-PK stresses y = [Pxx, Pyy]. When ``hyperparams`` is None the
    log marginal likelihood is maximized.
    """

    def __init__(self, hyperparams=None, optimize=True, maxiter=200):
        self.hyperparams = hyperparams
        self.optimize = optimize
        self.maxiter = maxiter

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=1)
        y = check_array(y, ensure_min_samples=1)
        if X.shape[1] != 2 or y.shape != X.shape:
            raise ContractError("expected X and y of shape (n, 2)")
        self.observations_ = ObservationSet.from_arrays(X, y)
        h = self.hyperparams
        if h is None:
            h = initial_hyperparams(self.observations_)
            if self.optimize:
                h = optimize_hyperparams(self.observations_, h, self.maxiter)
        self.hyperparams_ = h
        self.log_marginal_likelihood_ = log_marginal_likelihood(self.observations_, h)
        return self

    def predict_sedf(self, points, tags=("val",), full_cov=True):
        check_is_fitted(self)
        return posterior_exact(self.observations_, self.hyperparams_, points, tags, full_cov)

    def predict(self, X, return_std=False):
        check_is_fitted(self)
        X = check_array(X)
        mean, std = stress_posterior(lambda p, t: self.predict_sedf(p, t, True), X[:, 0], X[:, 1])
        return (mean, std) if return_std else mean

