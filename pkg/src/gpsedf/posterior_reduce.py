"""Grid sampling of the GP posterior, eigen-truncation and spline surrogates.

The reduced model is a stochastic strain-energy function

    Psi(I1, I4) = S_bar(I1, I4) + sum_i nu_i * S_i(I1, I4),  nu_i ~ N(0, lambda_i)

where S_bar interpolates the posterior mean on a lattice and each S_i
interpolates one unit eigenvector of the lattice covariance.
"""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .dataset import Lattice
from .exceptions import ContractError, ExtrapolationError, NumericalError
from .kinematics import SEDFDerivatives

__all__ = [
    "GridPosterior",
    "EigenModes",
    "SplineSurface",
    "StochasticSEDF",
    "MAX_GRID_POINTS",
    "sample_posterior_grid",
    "truncate_eigen",
    "fit_tensor_spline",
    "spline_eval",
    "build_stochastic_sedf",
]

MAX_GRID_POINTS = 10_000
SEDF_FORMAT = "gpsedf.stochastic_sedf"


@dataclass
class GridPosterior:
    grid: Lattice
    W_bar: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        self.W_bar = np.asarray(self.W_bar, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        n = len(self.grid)
        if self.W_bar.shape != (n,) or self.Sigma.shape != (n, n):
            raise ContractError("mean/covariance shapes do not match the grid")


@dataclass
class EigenModes:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (N, m), columns are modes
    all_eigenvalues: np.ndarray = field(default=None, repr=False)

    @property
    def m(self):
        return int(self.eigenvalues.size)

    def truncation_error(self, Sigma):
        """Relative squared Frobenius residual of the rank-m reconstruction."""
        S = 0.5 * (Sigma + Sigma.T)
        R = S - (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T
        den = np.sum(S * S)
        return float(np.sum(R * R) / den) if den > 0 else 0.0


def _predictor(gp):
    """Return (predict_fn(points, tags, full_cov), box or None) for a trained GP."""
    from .gp_variational import VariationalState, predict

    if isinstance(gp, VariationalState):
        return (lambda p, t, fc: predict(gp, p, t, fc)), tuple(gp.box)
    if hasattr(gp, "predict_sedf"):
        state = getattr(gp, "state_", None)
        box = tuple(state.box) if state is not None and hasattr(state, "box") else getattr(gp, "box_", None)
        return gp.predict_sedf, box
    if callable(gp):
        return gp, getattr(gp, "box", None)
    raise ContractError("expected a trained GP state, estimator or predict function")


def _grid(grid, box, resolution):
    if isinstance(grid, Lattice):
        return grid
    if grid is not None:
        box = grid
    if box is None:
        raise ContractError("grid bounds are required when the GP carries no training box")
    return Lattice(tuple(box), resolution)


def sample_posterior_grid(gp, grid=None, resolution=(50, 50)):
    """Posterior mean and full covariance of Psi on a lattice.

    ``grid`` may be a Lattice, a bounds tuple (I1_min, I1_max, I4_min, I4_max)
    or None, in which case the GP's padded training box is used.
    """
    predict_fn, box = _predictor(gp)
    lat = _grid(grid, box, resolution)
    n = len(lat)
    if n > MAX_GRID_POINTS:
        raise ContractError(f"{n} grid points exceed the dense covariance limit {MAX_GRID_POINTS}")
    post = predict_fn(lat.points, ("val",), True)
    Sigma = np.asarray(post.cov, dtype=float)
    return GridPosterior(lat, np.asarray(post.mean, dtype=float), 0.5 * (Sigma + Sigma.T))


def truncate_eigen(Sigma, tol=0.05):
    """Keep the fewest eigenpairs whose squared eigenvalues leave a share < ``tol``.

    Negative eigenvalues (round-off) are clamped to zero first. An all-zero
    matrix, or ``tol >= 1``, yields m = 0.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ContractError("Sigma must be square")
    if not tol > 0:
        raise ContractError("tol must be positive")
    S = 0.5 * (Sigma + Sigma.T)
    lam, E = np.linalg.eigh(S)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    E = E[:, order]
    energy = lam**2
    total = energy.sum()
    if total == 0.0 or tol >= 1.0:
        m = 0
    else:
        residual = 1.0 - np.cumsum(energy) / total
        m = int(np.argmax(residual < tol)) + 1
    return EigenModes(lam[:m].copy(), E[:, :m].copy(), all_eigenvalues=lam)


@dataclass
class SplineSurface:
    """Clamped tensor-product B-spline over (I1, I4)."""

    knots1: np.ndarray
    knots4: np.ndarray
    coef: np.ndarray
    order: int = 3

    def __post_init__(self):
        self.knots1 = np.asarray(self.knots1, dtype=float)
        self.knots4 = np.asarray(self.knots4, dtype=float)
        self.coef = np.asarray(self.coef, dtype=float)
        q = int(self.order)
        for t in (self.knots1, self.knots4):
            if np.any(np.diff(t) < 0):
                raise ContractError("knot vectors must be non-decreasing")
            if not (np.all(t[: q + 1] == t[0]) and np.all(t[-q - 1:] == t[-1])):
                raise ContractError("knot vectors must be clamped")
        shape = (self.knots1.size - q - 1, self.knots4.size - q - 1)
        if self.coef.shape != shape:
            raise ContractError(f"control net shape {self.coef.shape} does not match knots {shape}")
        self._spl = NdBSpline((self.knots1, self.knots4), self.coef, q, extrapolate=False)

    @property
    def box(self):
        return (self.knots1[0], self.knots1[-1], self.knots4[0], self.knots4[-1])

    def __call__(self, I1, I4, d1=0, d4=0, element=None):
        I1, I4 = np.broadcast_arrays(np.asarray(I1, dtype=float), np.asarray(I4, dtype=float))
        lo1, hi1, lo4, hi4 = self.box
        tol = 1e-12 * max(1.0, abs(hi1), abs(hi4))
        bad = (I1 < lo1 - tol) | (I1 > hi1 + tol) | (I4 < lo4 - tol) | (I4 > hi4 + tol) | ~np.isfinite(I1 + I4)
        if np.any(bad):
            k = int(np.flatnonzero(bad.ravel())[0])
            where = element if element is None or np.ndim(element) == 0 else np.asarray(element).ravel()[k]
            raise ExtrapolationError(
                f"(I1, I4) = ({I1.ravel()[k]:.6g}, {I4.ravel()[k]:.6g}) outside spline box {self.box}",
                element=where,
            )
        pts = np.column_stack([np.clip(I1.ravel(), lo1, hi1), np.clip(I4.ravel(), lo4, hi4)])
        return self._spl(pts, nu=(int(d1), int(d4))).reshape(I1.shape)

    def derivs(self, I1, I4, element=None):
        """Value and derivatives up to second order as SEDFDerivatives."""
        ev = lambda a, b: self(I1, I4, a, b, element=element)
        return SEDFDerivatives(W=ev(0, 0), W1=ev(1, 0), W4=ev(0, 1), W11=ev(2, 0), W44=ev(0, 2), W14=ev(1, 1))

    def combine(self, weights, others):
        """Surface with control net coef + sum_i w_i * others[i].coef (shared knots)."""
        coef = self.coef.copy()
        for w, s in zip(weights, others):
            coef += w * s.coef
        return SplineSurface(self.knots1, self.knots4, coef, self.order)

    def to_dict(self):
        return {
            "order": self.order,
            "knots1": self.knots1.tolist(),
            "knots4": self.knots4.tolist(),
            "coef": self.coef.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["knots1"], d["knots4"], d["coef"], d.get("order", 3))


def fit_tensor_spline(grid, values, order=3):
    """Interpolating clamped tensor-product spline through lattice values.

    Interior knots sit at the sample coordinates (the two next to each end
    are dropped so the collocation system is square), ends are clamped.
    """
    if not isinstance(grid, Lattice):
        raise ContractError("grid must be a Lattice")
    n1, n4 = grid.resolution
    if min(n1, n4) < order + 1:
        raise ContractError(f"a degree-{order} spline needs at least {order + 1} nodes per axis")
    values = np.asarray(values, dtype=float)
    if values.size != n1 * n4:
        raise ContractError(f"expected {n1 * n4} values, got {values.size}")
    V = values.reshape(n1, n4)
    a1, a4 = grid.axes
    try:
        s1 = make_interp_spline(a1, V, k=order)
        s4 = make_interp_spline(a4, s1.c.T, k=order)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"singular collocation system: {exc}") from exc
    surf = SplineSurface(s1.t, s4.t, s4.c.T, order)
    resid = np.max(np.abs(surf(grid.points[:, 0], grid.points[:, 1]) - values))
    scale = max(np.max(np.abs(values)), 1e-300)
    if not resid <= 1e-10 * scale + 1e-300:
        raise NumericalError(f"spline interpolation residual {resid:.3g} too large")
    return surf


def spline_eval(s, p, d1_order=0, d4_order=0):
    """Value or mixed partial of ``s`` at p = (I1, I4) (scalar or arrays)."""
    if not (0 <= d1_order <= 2 and 0 <= d4_order <= 2):
        raise ContractError("derivative orders must be in 0..2")
    I1, I4 = (p.I1, p.I4) if hasattr(p, "I1") else (np.asarray(p)[..., 0], np.asarray(p)[..., 1])
    out = s(I1, I4, d1_order, d4_order)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class StochasticSEDF:
    mean: SplineSurface
    eigenvalues: np.ndarray
    modes: list
    box: tuple

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        self.box = tuple(float(b) for b in self.box)
        if len(self.modes) != self.eigenvalues.size:
            raise ContractError("mode count does not match eigenvalue count")

    @property
    def m(self):
        return len(self.modes)

    def realization(self, nu=None):
        """Deterministic spline surface S_bar + sum nu_i S_i."""
        if nu is None or self.m == 0:
            return self.mean
        nu = np.asarray(nu, dtype=float).reshape(-1)
        if nu.size != self.m:
            raise ContractError(f"expected {self.m} mode coefficients, got {nu.size}")
        return self.mean.combine(nu, self.modes)

    def energy(self, I1, I4, nu=None):
        return self.realization(nu)(I1, I4)

    def to_dict(self):
        return {
            "format": SEDF_FORMAT,
            "version": 1,
            "order": self.mean.order,
            "box": list(self.box),
            "mean": self.mean.to_dict(),
            "eigenvalues": self.eigenvalues.tolist(),
            "modes": [s.to_dict() for s in self.modes],
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != SEDF_FORMAT:
            raise ContractError("not a stochastic SEDF document")
        return cls(
            SplineSurface.from_dict(d["mean"]),
            d["eigenvalues"],
            [SplineSurface.from_dict(s) for s in d["modes"]],
            d["box"],
        )

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def deterministic(cls, surface):
        return cls(surface, np.zeros(0), [], surface.box)


def build_stochastic_sedf(gp, grid=None, tol=0.05, resolution=(50, 50), return_parts=False):
    """Grid posterior -> eigen-truncation -> spline surfaces for mean and modes."""
    post = sample_posterior_grid(gp, grid, resolution)
    modes = truncate_eigen(post.Sigma, tol)
    mean = fit_tensor_spline(post.grid, post.W_bar)
    surfaces = [fit_tensor_spline(post.grid, modes.eigenvectors[:, i]) for i in range(modes.m)]
    sedf = StochasticSEDF(mean, modes.eigenvalues, surfaces, post.grid.bounds)
    return (sedf, post, modes) if return_parts else sedf
