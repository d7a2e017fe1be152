"""Sparse variational GP with probit convexity likelihoods.

Inducing variables are kernel channels (by default Psi, Psi_1 and Psi_4)
at M movable locations. Internally q(u) is stored whitened: with
L = chol(K_ZZ), u = mu_Z + L v and q(v) = N(m_w, L_w L_w^T). The exported
state carries the unwhitened mean m_v = mu_Z + L m_w and factor L L_w.

Expected Gaussian log-likelihoods (stresses and the reference value) are
computed in closed form; the probit terms use reparameterized Monte Carlo
with a seeded generator, so the loss and its gradient are deterministic.
"""
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch
from scipy.special import log_ndtr
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import REFERENCE_POINT, Lattice, ObservationSet, build_constraint_grid
from .exceptions import ContractError, NumericalError, TrainingError
from .gp_exact import JointPosterior, initial_hyperparams, optimize_hyperparams, stress_posterior
from .kernel import E02, NU_PROBIT, Hyperparams, cholesky_with_jitter, cross_cov, prior_mean, zero_lag_variance
from .kinematics import stress_coefficients

__all__ = [
    "TrainConfig",
    "TrainTrace",
    "TrainingData",
    "InducingSet",
    "VariationalState",
    "probit_constraint_loglik",
    "elbo",
    "train",
    "predict",
    "optimal_gaussian_q",
    "ConvexGPRegressor",
]

DTYPE = torch.float64
CONSTRAINT_TAGS = ("d11", "d44")


class _LogNdtr(torch.autograd.Function):
    """log Phi(x) with a backward pass that stays accurate for x << 0.

    torch's own backward forms phi/Phi from exponentials whose arguments
    cancel, losing digits once x is in the thousands; the ratio equals
    sqrt(2/pi) / erfcx(-x/sqrt(2)) with no cancellation.
    """

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.special.log_ndtr(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * math.sqrt(2.0 / math.pi) / torch.special.erfcx(-x / math.sqrt(2.0))


def torch_log_ndtr(x):
    return _LogNdtr.apply(x)


def probit_constraint_loglik(w11, w44, nu_probit=NU_PROBIT):
    """Sum over locations of log Phi(nu*w11) + log Phi(nu*w44)."""
    w11 = np.asarray(w11, dtype=float)
    w44 = np.asarray(w44, dtype=float)
    return float(np.sum(log_ndtr(nu_probit * w11)) + np.sum(log_ndtr(nu_probit * w44)))


@dataclass
class TrainConfig:
    warmup_iters: int = 1000
    warmup_lr: float = 0.05
    gamma_ladder: tuple = (1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
    iters_per_gamma: int = 500
    constrained_lr: float = 0.01
    mc_samples: int = 8
    seed: int = 0
    batch_size: int = None
    convexity: bool = True
    n_inducing: tuple = (8, 8)
    inducing_tags: tuple = ("val", "d1", "d4")
    train_hyperparams: bool = True
    train_inducing: bool = True
    init: str = "exact"
    collapsed_warmup: bool = True
    # off-diagonal entries of the whitened factor are stored divided by this;
    # Adam moves every raw entry by about lr per step, so a small value keeps
    # that jitter from inflating the constrained second-derivative variances
    factor_scale: float = 0.01
    # stage 2 moves only q(u); hyperparameters and Z keep their stage-1 values
    stage2_hyperparams: bool = False

    def __post_init__(self):
        if self.init not in ("exact", "heuristic"):
            raise ContractError(f"unknown init {self.init!r}")
        self.gamma_ladder = tuple(float(g) for g in self.gamma_ladder)
        self.n_inducing = tuple(int(n) for n in self.n_inducing)
        self.inducing_tags = tuple(self.inducing_tags)
        if min(self.warmup_iters, self.iters_per_gamma, self.mc_samples) < 0 or self.mc_samples < 1:
            raise ContractError("iteration and sample counts must be positive")
        if not (self.warmup_lr > 0 and self.constrained_lr > 0):
            raise ContractError("learning rates must be positive")

    def to_dict(self):
        d = asdict(self)
        d["gamma_ladder"] = list(self.gamma_ladder)
        d["n_inducing"] = list(self.n_inducing)
        d["inducing_tags"] = list(self.inducing_tags)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def scales(self):
        return (1.0, self.factor_scale)

    @property
    def total_iters(self):
        return self.warmup_iters + (len(self.gamma_ladder) * self.iters_per_gamma if self.convexity else 0)


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    hyperparams: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.loss)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,gamma,loss\n")
            for i, (g, l) in enumerate(zip(self.gamma, self.loss)):
                fh.write(f"{i},{g!r},{l!r}\n")


@dataclass
class TrainingData:
    """Observations, the reference point and (optionally) constraint locations."""

    observations: ObservationSet
    constraints: Lattice = None
    reference: tuple = REFERENCE_POINT

    @property
    def box(self):
        if self.constraints is not None:
            return self.constraints.bounds
        return build_constraint_grid(self.observations).bounds


@dataclass
class InducingSet:
    """Inducing locations, channels and the unwhitened q(u) = N(m_v, F F^T)."""

    Z: np.ndarray
    tags: tuple
    m_v: np.ndarray
    S_factor: np.ndarray

    @property
    def S_v(self):
        return self.S_factor @ self.S_factor.T

    @classmethod
    def from_covariance(cls, Z, tags, m_v, S_v):
        S_v = np.asarray(S_v, dtype=float)
        if not np.allclose(S_v, S_v.T, atol=1e-12 * max(1.0, np.abs(S_v).max())):
            raise ContractError("S_v must be symmetric")
        w, V = np.linalg.eigh(S_v)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ContractError("S_v is not positive semidefinite")
        return cls(np.asarray(Z, float), tuple(tags), np.asarray(m_v, float), V * np.sqrt(np.maximum(w, 0.0)))


@dataclass
class VariationalState:
    hyperparams: Hyperparams
    Z: np.ndarray
    inducing_tags: tuple
    m_v: np.ndarray
    S_factor: np.ndarray
    jitter: float
    box: tuple
    config_hash: str = ""

    @property
    def inducing(self):
        return InducingSet(self.Z, self.inducing_tags, self.m_v, self.S_factor)

    def to_dict(self):
        return {
            "format": "gpsedf.variational_state",
            "version": 1,
            "hyperparams": self.hyperparams.to_dict(),
            "inducing_tags": list(self.inducing_tags),
            "Z": self.Z.tolist(),
            "m_v": self.m_v.tolist(),
            "S_factor": self.S_factor.tolist(),
            "jitter": float(self.jitter),
            "box": [float(b) for b in self.box],
            "config_hash": self.config_hash,
        }

    def to_json(self, path):
        # json writes floats with repr, which round-trips float64 exactly
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "gpsedf.variational_state":
            raise ContractError("not a variational state document")
        return cls(
            hyperparams=Hyperparams.from_dict(d["hyperparams"]),
            Z=np.array(d["Z"], dtype=float).reshape(-1, 2),
            inducing_tags=tuple(d["inducing_tags"]),
            m_v=np.array(d["m_v"], dtype=float),
            S_factor=np.array(d["S_factor"], dtype=float),
            jitter=float(d["jitter"]),
            box=tuple(d["box"]),
            config_hash=d.get("config_hash", ""),
        )

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --- objective ---------------------------------------------------------------


class _Objective:
    """Negative ELBO over torch parameters for fixed training data."""

    def __init__(self, data, tags_u, mc_samples=8, batch_size=None, scales=(1.0, 1.0)):
        self.scales = tuple(float(x) for x in scales)
        obs = data.observations
        self.tags_u = tuple(tags_u)
        self.Xd = torch.as_tensor(obs.invariants, dtype=DTYPE)
        a1, a4, b1 = stress_coefficients(obs.lambda_x, obs.lambda_y)
        self.a1, self.a4, self.b1 = (torch.as_tensor(c, dtype=DTYPE) for c in (a1, a4, b1))
        self.yxx = torch.as_tensor(obs.Pxx, dtype=DTYPE)
        self.yyy = torch.as_tensor(obs.Pyy, dtype=DTYPE)
        self.ref = torch.as_tensor(np.array([data.reference], dtype=float), dtype=DTYPE)
        self.Xc = None
        if data.constraints is not None:
            self.Xc = torch.as_tensor(data.constraints.points, dtype=DTYPE)
        self.mc_samples = int(mc_samples)
        self.batch_size = batch_size
        self.n = self.Xd.shape[0]

    @staticmethod
    def hyper(params, e02=E02, nu=NU_PROBIT):
        return Hyperparams(
            alpha=params["alpha"], beta=params["beta"],
            sigma_f=torch.exp(params["log_sigma_f"]), lengthscale=torch.exp(params["log_lengthscale"]),
            ex2=torch.exp(params["log_ex2"]), ey2=torch.exp(params["log_ey2"]), e02=e02, nu_probit=nu,
        )

    def terms(self, params, gamma=None, generator=None, batch=None, B=None, logdet_B=None):
        """Dict of ELBO pieces. ``gamma=None`` drops the constraint term."""
        h = self.hyper(params)
        Z = params["Z"]
        sf2 = h.sigma_f**2
        ell2 = h.lengthscale**2
        Kzz = cross_cov(Z, self.tags_u, Z, self.tags_u, h)
        L, jitter = cholesky_with_jitter(Kzz, scale=float(sf2.detach()))
        if B is None:
            m_w, B = _raw_to_q(params, self.scales)
            logdet_S = 2.0 * params["L_logdiag"].sum()
        else:
            m_w = self.scales[0] * params["m_w"]
            logdet_S = logdet_B

        idx = batch if batch is not None else slice(None)
        Xd = self.Xd[idx]
        a1, a4, b1 = self.a1[idx], self.a4[idx], self.b1[idx]
        nb = Xd.shape[0]
        Kd = cross_cov(Z, self.tags_u, Xd, ("d1", "d4"), h)
        K1, K4 = Kd[:, :nb], Kd[:, nb:]
        blocks = [K1 * a1 + K4 * a4, K1 * b1, cross_cov(Z, self.tags_u, self.ref, ("val",), h)]
        use_c = gamma is not None and self.Xc is not None
        if use_c:
            blocks.append(cross_cov(Z, self.tags_u, self.Xc, CONSTRAINT_TAGS, h))
        KzT = torch.cat(blocks, dim=1)
        A = torch.linalg.solve_triangular(L, KzT, upper=False)
        mean = A.T @ m_w
        var = -(A * A).sum(0) + ((B.T @ A) ** 2).sum(0)

        sl_x = slice(0, nb)
        sl_y = slice(nb, 2 * nb)
        mx = a1 * h.alpha + a4 * h.beta + mean[sl_x]
        my = b1 * h.alpha + mean[sl_y]
        vx = (a1**2 + a4**2) * sf2 / ell2 + var[sl_x]
        vy = b1**2 * sf2 / ell2 + var[sl_y]
        scale = self.n / nb
        lx = -0.5 * torch.log(2 * math.pi * h.ex2) - ((self.yxx[idx] - mx) ** 2 + vx) / (2 * h.ex2)
        ly = -0.5 * torch.log(2 * math.pi * h.ey2) - ((self.yyy[idx] - my) ** 2 + vy) / (2 * h.ey2)
        mr = mean[2 * nb]
        vr = sf2 + var[2 * nb]
        lref = -0.5 * math.log(2 * math.pi * h.e02) - (mr**2 + vr) / (2 * h.e02)

        M = m_w.shape[0]
        kl = 0.5 * ((B * B).sum() + (m_w * m_w).sum() - M - logdet_S)
        out = {
            "data": scale * (lx.sum() + ly.sum()),
            "reference": lref,
            "kl": kl,
            "jitter": jitter,
        }
        if use_c:
            mc = mean[2 * nb + 1:]
            vc = 3.0 * sf2 / ell2**2 + var[2 * nb + 1:]
            eps = torch.randn(self.mc_samples, mc.shape[0], generator=generator, dtype=DTYPE)
            f = mc + torch.sqrt(torch.clamp(vc, min=1e-300)) * eps
            out["constraint"] = gamma * torch_log_ndtr(h.nu_probit * f).mean(0).sum()
        else:
            out["constraint"] = torch.zeros((), dtype=DTYPE)
        out["elbo"] = out["data"] + out["reference"] + out["constraint"] - out["kl"]
        return out


def _q_to_raw(m_w, Lw, scales):
    """Raw optimizer variables for whitened (m_w, L_w); see TrainConfig.factor_scale."""
    mean_scale, factor_scale = scales
    return {
        "m_w": torch.as_tensor(np.asarray(m_w) / mean_scale, dtype=DTYPE),
        "L_off": torch.as_tensor(np.tril(Lw, -1) / factor_scale, dtype=DTYPE),
        "L_logdiag": torch.as_tensor(np.log(np.diag(Lw)), dtype=DTYPE),
    }


def _raw_to_q(params, scales):
    mean_scale, factor_scale = scales
    Lw = factor_scale * torch.tril(params["L_off"], -1) + torch.diag(torch.exp(params["L_logdiag"]))
    return mean_scale * params["m_w"], Lw


def _initial_params(data, config, h0=None):
    """Lattice inducing points; hyperparameters from the exact-GP evidence optimum
    (``config.init == "exact"``) and q(u) at its closed-form Gaussian optimum."""
    obs = data.observations
    if h0 is None:
        h0 = initial_hyperparams(obs)
        if config.init == "exact":
            h0 = optimize_hyperparams(obs, h0)
            h0 = Hyperparams(**{k: float(v) for k, v in asdict(h0).items()})
    box = data.box
    Z = Lattice(box, config.n_inducing).points
    M = Z.shape[0] * len(config.inducing_tags)
    params = {
        "alpha": torch.tensor(float(h0.alpha), dtype=DTYPE),
        "beta": torch.tensor(float(h0.beta), dtype=DTYPE),
        "log_sigma_f": torch.tensor(math.log(h0.sigma_f), dtype=DTYPE),
        "log_lengthscale": torch.tensor(math.log(h0.lengthscale), dtype=DTYPE),
        "log_ex2": torch.tensor(math.log(h0.ex2), dtype=DTYPE),
        "log_ey2": torch.tensor(math.log(h0.ey2), dtype=DTYPE),
        "Z": torch.as_tensor(Z, dtype=DTYPE).clone(),
        "m_w": torch.zeros(M, dtype=DTYPE),
        "L_off": torch.zeros(M, M, dtype=DTYPE),
        "L_logdiag": torch.zeros(M, dtype=DTYPE),
    }
    if config.init == "exact":
        m_w, Lw, *_ = _optimal_whitened(data, Z, config.inducing_tags, h0)
        params.update(_q_to_raw(m_w, Lw, config.scales))
    return params


_HYPER_KEYS = ("alpha", "beta", "log_sigma_f", "log_lengthscale", "log_ex2", "log_ey2")


def _trainable(params, config):
    keys = ["m_w", "L_off", "L_logdiag"]
    if config.train_hyperparams:
        keys += list(_HYPER_KEYS)
    if config.train_inducing:
        keys.append("Z")
    return keys


def _params_to_state(params, tags_u, box, config_hash, e02=E02, nu=NU_PROBIT, scales=(1.0, 1.0)):
    with torch.no_grad():
        h = _Objective.hyper(params, e02, nu)
        hyper = Hyperparams(**{k: float(v) for k, v in asdict(h).items()})
        Z = params["Z"].numpy().copy()
        Kzz = cross_cov(Z, tags_u, Z, tags_u, hyper)
        L, jitter = cholesky_with_jitter(Kzz, scale=hyper.sigma_f**2)
        mu = np.concatenate([prior_mean(Z, t, hyper) for t in tags_u])
        m_w, Lw = (x.numpy() for x in _raw_to_q(params, scales))
        m_v = mu + L @ m_w
        S_factor = L @ Lw
    return VariationalState(hyper, Z, tuple(tags_u), m_v, S_factor, jitter, tuple(float(b) for b in box), config_hash)


def _state_to_params(state, scales=(1.0, 1.0)):
    """Whitened torch parameters reproducing ``state``."""
    h = state.hyperparams
    L = _chol_state(state)
    mu = np.concatenate([prior_mean(state.Z, t, h) for t in state.inducing_tags])
    m_w = scipy.linalg.solve_triangular(L, state.m_v - mu, lower=True)
    Lw = scipy.linalg.solve_triangular(L, state.S_factor, lower=True)
    if np.allclose(Lw, np.tril(Lw), rtol=0, atol=1e-12 * max(1.0, np.abs(Lw).max())):
        Lw = np.tril(Lw) * np.where(np.diag(Lw) < 0, -1.0, 1.0)  # positive diagonal, same S
    else:
        S = Lw @ Lw.T
        Lw, _ = cholesky_with_jitter(0.5 * (S + S.T), scale=1.0, start=1e-14)
    t = lambda x: torch.tensor(x, dtype=DTYPE)  # noqa: E731
    return {
        "alpha": t(h.alpha), "beta": t(h.beta),
        "log_sigma_f": t(math.log(h.sigma_f)), "log_lengthscale": t(math.log(h.lengthscale)),
        "log_ex2": t(math.log(h.ex2)), "log_ey2": t(math.log(h.ey2)),
        "Z": t(state.Z.copy()),
        **_q_to_raw(m_w, Lw, scales),
    }


def _chol_state(state):
    h = state.hyperparams
    Kzz = cross_cov(state.Z, state.inducing_tags, state.Z, state.inducing_tags, h)
    try:
        return scipy.linalg.cholesky(Kzz + state.jitter * np.eye(Kzz.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        L, _ = cholesky_with_jitter(Kzz, scale=h.sigma_f**2)
        return L


def elbo(data, q, h, gamma=None, mc_samples=8, seed=0, return_terms=False):
    """Evidence lower bound for an explicit q(u).

    ``q`` is an InducingSet; ``gamma=None`` (or a dataset without
    constraints) leaves out the probit terms.
    """
    Z = np.asarray(q.Z, dtype=float)
    Kzz = cross_cov(Z, q.tags, Z, q.tags, h)
    L, _ = cholesky_with_jitter(Kzz, scale=h.sigma_f**2)
    mu = np.concatenate([prior_mean(Z, t, h) for t in q.tags])
    m_w = scipy.linalg.solve_triangular(L, q.m_v - mu, lower=True)
    B = scipy.linalg.solve_triangular(L, q.S_factor, lower=True)
    sign, logdet = np.linalg.slogdet(B)
    if sign == 0:
        logdet = -np.inf
    t = lambda x: torch.tensor(x, dtype=DTYPE)  # noqa: E731
    params = {
        "alpha": t(float(h.alpha)), "beta": t(float(h.beta)),
        "log_sigma_f": t(math.log(h.sigma_f)), "log_lengthscale": t(math.log(h.lengthscale)),
        "log_ex2": t(math.log(h.ex2)), "log_ey2": t(math.log(h.ey2)),
        "Z": t(Z), "m_w": t(m_w),
    }
    obj = _Objective(data, q.tags, mc_samples)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        out = obj.terms(params, gamma=gamma, generator=gen, B=t(B), logdet_B=2.0 * logdet)
    out = {k: float(v) for k, v in out.items()}
    return out if return_terms else out["elbo"]


def _optimal_whitened(data, Z, tags, h):
    """Whitened optimum (m_w, L_w) plus (L, jitter, mu_Z) for the Gaussian terms."""
    obs = data.observations
    Kzz = cross_cov(Z, tags, Z, tags, h)
    L, jitter = cholesky_with_jitter(Kzz, scale=h.sigma_f**2)
    a1, a4, b1 = stress_coefficients(obs.lambda_x, obs.lambda_y)
    n = len(obs)
    Kd = cross_cov(Z, tags, obs.invariants, ("d1", "d4"), h)
    K1, K4 = Kd[:, :n], Kd[:, n:]
    ref = np.array([data.reference], dtype=float)
    KzT = np.hstack([K1 * a1 + K4 * a4, K1 * b1, cross_cov(Z, tags, ref, ("val",), h)])
    A = scipy.linalg.solve_triangular(L, KzT, lower=True)
    y = np.concatenate([obs.Pxx, obs.Pyy, [0.0]])
    mu_y = np.concatenate([a1 * h.alpha + a4 * h.beta, b1 * h.alpha, [0.0]])
    noise = np.concatenate([np.full(n, h.ex2), np.full(n, h.ey2), [h.e02]])
    P = np.eye(A.shape[0]) + (A / noise) @ A.T
    Lp = scipy.linalg.cholesky(P, lower=True)
    m_w = scipy.linalg.cho_solve((Lp, True), A @ ((y - mu_y) / noise))
    Pinv = scipy.linalg.cho_solve((Lp, True), np.eye(P.shape[0]))
    Lw = np.linalg.cholesky(0.5 * (Pinv + Pinv.T))
    mu = np.concatenate([prior_mean(Z, t, h) for t in tags])
    return m_w, Lw, L, jitter, mu


def optimal_gaussian_q(data, Z, tags, h):
    """Closed-form optimal q(u) for the Gaussian (stress + reference) terms only.

    Returns (InducingSet, jitter used for K_ZZ).
    """
    Z = np.asarray(Z, dtype=float)
    m_w, Lw, L, jitter, mu = _optimal_whitened(data, Z, tuple(tags), h)
    return InducingSet(Z, tuple(tags), mu + L @ m_w, L @ Lw), jitter


# --- training ----------------------------------------------------------------


def _set_optimal_q(params, data, tags_u, e02, nu, scales=(1.0, 1.0)):
    """Overwrite the whitened q with its closed-form optimum at the current hyperparameters and Z."""
    with torch.no_grad():
        h = _Objective.hyper(params, e02, nu)
        h = Hyperparams(**{k: float(v) for k, v in asdict(h).items()})
        m_w, Lw, *_ = _optimal_whitened(data, params["Z"].numpy(), tags_u, h)
        for k, v in _q_to_raw(m_w, Lw, scales).items():
            params[k].copy_(v)


def train(data, config=None, hyperparams=None, initial_state=None, callback=None):
    """Two-stage ELBO maximization; returns (VariationalState, TrainTrace).

    Stage 1 runs ``warmup_iters`` Adam steps without constraints; with
    ``collapsed_warmup`` q(u) is reset to its closed-form optimum before every
    step, so Adam only moves the hyperparameters and Z. Stage 2
    (when ``config.convexity``) adds the probit log-likelihood scaled by
    each gamma of the ladder in turn.
    """
    config = config or TrainConfig()
    if data.constraints is None and config.convexity:
        data = TrainingData(data.observations, build_constraint_grid(data.observations), data.reference)
    box = data.box
    e02 = hyperparams.e02 if hyperparams is not None else E02
    nu = hyperparams.nu_probit if hyperparams is not None else NU_PROBIT
    if initial_state is not None:
        params = _state_to_params(initial_state, config.scales)
        tags_u = initial_state.inducing_tags
    else:
        params = _initial_params(data, config, hyperparams)
        tags_u = config.inducing_tags
    obj = _Objective(data, tags_u, config.mc_samples, config.batch_size, config.scales)
    keys = _trainable(params, config)
    for k in keys:
        params[k].requires_grad_(True)
    gen = torch.Generator().manual_seed(int(config.seed))
    batch_gen = np.random.default_rng(config.seed)
    lo = torch.tensor([box[0], box[2]], dtype=DTYPE)
    hi = torch.tensor([box[1], box[3]], dtype=DTYPE)
    trace = TrainTrace()
    t0 = time.perf_counter()

    q_keys = ("m_w", "L_off", "L_logdiag")
    stages = [(None, config.warmup_iters, config.warmup_lr)]
    if config.convexity:
        stages += [(g, config.iters_per_gamma, config.constrained_lr) for g in config.gamma_ladder]
    opt = None
    last = None
    for stage, (gamma, iters, lr) in enumerate(stages):
        collapsed = stage == 0 and config.collapsed_warmup
        group = [k for k in keys if not (collapsed and k in q_keys)]
        if stage > 0 and not config.stage2_hyperparams:
            group = [k for k in group if k in q_keys]
        if (lr, collapsed) != last:
            opt = torch.optim.Adam([params[k] for k in group], lr=lr) if group else None
            last = (lr, collapsed)
        for _ in range(iters):
            if collapsed:
                _set_optimal_q(params, data, tags_u, e02, nu, config.scales)
            if opt is not None:
                opt.zero_grad()
            batch = None
            if config.batch_size and config.batch_size < obj.n:
                batch = torch.as_tensor(np.sort(batch_gen.choice(obj.n, config.batch_size, replace=False)))
            try:
                out = obj.terms(params, gamma=gamma, generator=gen, batch=batch)
            except NumericalError as exc:
                raise TrainingError(f"factorization failed at iteration {len(trace)}: {exc}", trace) from exc
            loss = -out["elbo"]
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at iteration {len(trace)}", trace)
            if opt is not None:
                loss.backward()
                opt.step()
            if config.train_inducing:
                with torch.no_grad():
                    params["Z"].copy_(torch.maximum(torch.minimum(params["Z"], hi), lo))
            trace.loss.append(value)
            trace.gamma.append(0.0 if gamma is None else gamma)
            if callback is not None:
                callback(len(trace), value, out)
        if collapsed:
            _set_optimal_q(params, data, tags_u, e02, nu, config.scales)

    for k in keys:
        params[k] = params[k].detach()
    state = _params_to_state(params, tags_u, box, config.digest(), e02, nu, config.scales)
    trace.hyperparams = state.hyperparams.to_dict()
    trace.metadata = {
        "iterations": len(trace),
        "seconds": time.perf_counter() - t0,
        "final_loss": trace.loss[-1] if trace.loss else None,
        "config_hash": config.digest(),
    }
    return state, trace


def training_gradient(data, params, tags_u, gamma=None, mc_samples=8, seed=0):
    """Loss and autograd gradient for the given raw parameters (used for checks)."""
    params = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    obj = _Objective(data, tags_u, mc_samples)
    gen = torch.Generator().manual_seed(int(seed))
    loss = -obj.terms(params, gamma=gamma, generator=gen)["elbo"]
    loss.backward()
    return float(loss.detach()), {k: v.grad.clone() for k, v in params.items()}


def training_loss(data, params, tags_u, gamma=None, mc_samples=8, seed=0):
    obj = _Objective(data, tags_u, mc_samples)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        return float(-obj.terms(params, gamma=gamma, generator=gen)["elbo"])


# --- prediction --------------------------------------------------------------


def _outside_box(points, box, tol=1e-12):
    return (
        (points[:, 0] < box[0] - tol) | (points[:, 0] > box[1] + tol)
        | (points[:, 1] < box[2] - tol) | (points[:, 1] > box[3] + tol)
    )


def predict(state, points, tags=("val",), full_cov=True):
    """Sparse predictive distribution over ``tags`` at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tags = tuple(tags)
    h = state.hyperparams
    L = _chol_state(state)
    mu_z = np.concatenate([prior_mean(state.Z, t, h) for t in state.inducing_tags])
    Kzs = cross_cov(state.Z, state.inducing_tags, points, tags, h)
    A = scipy.linalg.solve_triangular(L, Kzs, lower=True)
    wm = scipy.linalg.solve_triangular(L, state.m_v - mu_z, lower=True)
    Bw = scipy.linalg.solve_triangular(L, state.S_factor, lower=True)
    BA = Bw.T @ A
    mstar = np.concatenate([prior_mean(points, t, h) for t in tags])
    mean = mstar + A.T @ wm
    extrapolated = _outside_box(points, state.box)
    if full_cov:
        cov = cross_cov(points, tags, points, tags, h) - A.T @ A + BA.T @ BA
        return JointPosterior(points, tags, mean, cov=0.5 * (cov + cov.T), extrapolated=extrapolated)
    prior_var = np.concatenate([np.full(points.shape[0], zero_lag_variance(t, h)) for t in tags])
    var = prior_var - np.sum(A * A, axis=0) + np.sum(BA * BA, axis=0)
    return JointPosterior(points, tags, mean, var=var, extrapolated=extrapolated)


class ConvexGPRegressor(RegressorMixin, BaseEstimator):
    """Strain-energy GP trained on biaxial data with optional convexity constraints.

    ``fit(X, y)`` takes stretches X = [lambda_x, lambda_y] and first-PK
    stresses y = [Pxx, Pyy] in kPa; ``predict`` returns mean stresses.
    The fitted GP over Psi and its derivatives is exposed through
    ``predict_sedf`` and ``state_``.
    """

    def __init__(self, convexity=True, n_inducing=(8, 8), inducing_tags=("val", "d1", "d4"), padding=0.1,
                 constraint_resolution=(20, 20), warmup_iters=1000, warmup_lr=0.05,
                 gamma_ladder=(1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6), iters_per_gamma=500,
                 constrained_lr=0.01, mc_samples=8, batch_size=None, seed=0):
        self.convexity = convexity
        self.n_inducing = n_inducing
        self.inducing_tags = inducing_tags
        self.padding = padding
        self.constraint_resolution = constraint_resolution
        self.warmup_iters = warmup_iters
        self.warmup_lr = warmup_lr
        self.gamma_ladder = gamma_ladder
        self.iters_per_gamma = iters_per_gamma
        self.constrained_lr = constrained_lr
        self.mc_samples = mc_samples
        self.batch_size = batch_size
        self.seed = seed

    def train_config(self):
        return TrainConfig(
            warmup_iters=self.warmup_iters, warmup_lr=self.warmup_lr, gamma_ladder=self.gamma_ladder,
            iters_per_gamma=self.iters_per_gamma, constrained_lr=self.constrained_lr,
            mc_samples=self.mc_samples, seed=self.seed, batch_size=self.batch_size, convexity=self.convexity,
            n_inducing=self.n_inducing, inducing_tags=self.inducing_tags,
        )

    def fit(self, X, y, protocol_id=None):
        X = check_array(X, ensure_min_samples=2)
        y = check_array(y, ensure_min_samples=2)
        if X.shape[1] != 2 or y.shape != X.shape:
            raise ContractError("expected X and y of shape (n, 2)")
        obs = ObservationSet.from_arrays(X, y, protocol_id)
        grid = build_constraint_grid(obs, self.padding, self.constraint_resolution)
        self.constraint_grid_ = grid
        self.state_, self.trace_ = train(TrainingData(obs, grid), self.train_config())
        self.observations_ = obs
        return self

    def predict_sedf(self, points, tags=("val",), full_cov=True):
        check_is_fitted(self)
        return predict(self.state_, points, tags, full_cov)

    def predict(self, X, return_std=False):
        check_is_fitted(self)
        X = check_array(X)
        mean, std = stress_posterior(lambda p, t: predict(self.state_, p, t, True), X[:, 0], X[:, 1])
        return (mean, std) if return_std else mean

    @classmethod
    def from_state(cls, state, **params):
        est = cls(**params)
        est.state_ = state
        est.trace_ = None
        est.constraint_grid_ = Lattice(state.box, est.constraint_resolution)
        return est
