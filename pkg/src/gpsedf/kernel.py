"""Squared-exponential kernel with closed-form derivative blocks.

The latent vector at a point is [Psi, Psi_1, Psi_4, Psi_11, Psi_44]. The
covariance between channel ``a`` at p and channel ``b`` at q is the mixed
partial of k(p, q) = sf^2 exp(-|p - q|^2 / (2 l^2)) with multi-index ``a``
applied to p and ``b`` applied to q. With u = (p - q) / l this is

    sf^2 (-1)^|a| l^-(|a|+|b|) He_{a1+b1}(u1) He_{a4+b4}(u4) exp(-|u|^2 / 2)

where He_n are probabilists' Hermite polynomials. The formulas use only
arithmetic and ``exp`` so they run on numpy arrays and torch tensors alike.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.linalg

from .exceptions import NumericalError

__all__ = [
    "TAGS",
    "Hyperparams",
    "prior_mean",
    "kernel_block",
    "cross_cov",
    "assemble_joint_cov",
    "zero_lag_variance",
    "cholesky_with_jitter",
]

TAGS = {
    "val": (0, 0),
    "d1": (1, 0),
    "d4": (0, 1),
    "d11": (2, 0),
    "d44": (0, 2),
}

E02 = 1e-5
NU_PROBIT = 1e4


@dataclass
class Hyperparams:
    alpha: float = 1.0
    beta: float = 1.0
    sigma_f: float = 1.0
    lengthscale: float = 0.5
    ex2: float = 0.05
    ey2: float = 0.05
    e02: float = E02
    nu_probit: float = NU_PROBIT

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in d.items() if k in names})


def _is_torch(x):
    return type(x).__module__.startswith("torch")


def _exp(x):
    if _is_torch(x):
        import torch

        return torch.exp(x)
    return np.exp(x)


def _hermite(n, u):
    if n == 0:
        return 1.0
    if n == 1:
        return u
    u2 = u * u
    if n == 2:
        return u2 - 1.0
    if n == 3:
        return u * (u2 - 3.0)
    if n == 4:
        return u2 * (u2 - 6.0) + 3.0
    raise ValueError(f"derivative order {n} not supported")


def prior_mean(X, tag, h):
    """Linear prior mean and its derivatives at points X (shape (n, 2))."""
    I1, I4 = X[:, 0], X[:, 1]
    if tag == "val":
        return h.alpha * (I1 - 3.0) + h.beta * (I4 - 1.0)
    if tag == "d1":
        return 0.0 * I1 + h.alpha
    if tag == "d4":
        return 0.0 * I1 + h.beta
    if tag in ("d11", "d44"):
        return 0.0 * I1
    raise KeyError(tag)


def _block_from_lags(u1, u4, gauss, a, b, h):
    a1, a4 = TAGS[a]
    b1, b4 = TAGS[b]
    order = a1 + a4 + b1 + b4
    scale = h.sigma_f**2 * (-1.0) ** (a1 + a4) / h.lengthscale**order
    return scale * (_hermite(a1 + b1, u1) * _hermite(a4 + b4, u4)) * gauss


def kernel_block(p, q, a, b, h):
    """Cov(d^a Psi(p), d^b Psi(q)) for single points p, q = (I1, I4)."""
    u1 = (p[0] - q[0]) / h.lengthscale
    u4 = (p[1] - q[1]) / h.lengthscale
    gauss = _exp(-0.5 * (u1 * u1 + u4 * u4))
    return _block_from_lags(u1, u4, gauss, a, b, h)


def cross_cov(X, tags_x, Y, tags_y, h):
    """Tag-major block matrix of covariances between point sets X and Y.

    Rows are ordered [tags_x[0] at all X, tags_x[1] at all X, ...] and
    columns likewise for Y.
    """
    u1 = (X[:, 0][:, None] - Y[:, 0][None, :]) / h.lengthscale
    u4 = (X[:, 1][:, None] - Y[:, 1][None, :]) / h.lengthscale
    gauss = _exp(-0.5 * (u1 * u1 + u4 * u4))
    rows = [[_block_from_lags(u1, u4, gauss, a, b, h) for b in tags_y] for a in tags_x]
    if _is_torch(u1):
        import torch

        return torch.cat([torch.cat(r, dim=1) for r in rows], dim=0)
    return np.block(rows)


def zero_lag_variance(tag, h):
    """Prior variance of one channel (the kernel is stationary)."""
    a1, a4 = TAGS[tag]
    return h.sigma_f**2 * _hermite(2 * a1, 0.0) * _hermite(2 * a4, 0.0) * (-1.0) ** (a1 + a4) / h.lengthscale ** (2 * (a1 + a4))


def assemble_joint_cov(points_with_tags, h, jitter=None):
    """Covariance matrix for an arbitrary list of (point, tag) pairs, plus jitter*I."""
    if not points_with_tags:
        raise ValueError("empty design")
    P = np.array([[float(p[0]), float(p[1])] for p, _ in points_with_tags])
    tags = [t for _, t in points_with_tags]
    n = len(tags)
    u1 = (P[:, 0][:, None] - P[:, 0][None, :]) / h.lengthscale
    u4 = (P[:, 1][:, None] - P[:, 1][None, :]) / h.lengthscale
    gauss = np.exp(-0.5 * (u1**2 + u4**2))
    K = np.empty((n, n))
    tag_arr = np.array(tags)
    for a in set(tags):
        ia = np.flatnonzero(tag_arr == a)
        for b in set(tags):
            ib = np.flatnonzero(tag_arr == b)
            sub = np.ix_(ia, ib)
            K[sub] = _block_from_lags(u1[sub], u4[sub], gauss[sub], a, b, h)
    K = 0.5 * (K + K.T)
    if jitter is None:
        jitter = 1e-8 * h.sigma_f**2
    return K + jitter * np.eye(n)


def cholesky_with_jitter(K, scale=1.0, start=1e-8, stop=1e-4):
    """Lower Cholesky factor of K + jitter*I with escalating jitter.

    Jitter runs from start*scale to stop*scale in factors of ten. Works
    for numpy arrays and torch tensors; returns (L, jitter used).
    """
    jitter = start * scale
    if _is_torch(K):
        import torch

        eye = torch.eye(K.shape[0], dtype=K.dtype)
        while jitter <= stop * scale * (1 + 1e-9):
            L, info = torch.linalg.cholesky_ex(K + jitter * eye)
            if int(info) == 0:
                return L, jitter
            jitter *= 10.0
        raise NumericalError("Cholesky failed at maximum jitter")
    eye = np.eye(K.shape[0])
    while jitter <= stop * scale * (1 + 1e-9):
        try:
            return scipy.linalg.cholesky(K + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("Cholesky failed at maximum jitter")
