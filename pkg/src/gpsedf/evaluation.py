"""Error metrics, analytical-model fitting and out-of-range prediction protocols."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from scipy.spatial import Delaunay

from .exceptions import ContractError, DomainError, NumericalError
from .kinematics import (
    KAPPA_MAX,
    MODEL_PARAMS,
    AnalyticalModel,
    invariants_from_shear_state,
    invariants_from_stretches,
    pk1_full,
    shear_state_for_invariants,
    stress_coefficients,
)

__all__ = [
    "GridErrorReport",
    "FitMetrics",
    "ModelFit",
    "StressCurves",
    "grid_error",
    "hull_mask",
    "fit_metrics",
    "fit_analytical_models",
    "prediction_protocol_1",
    "prediction_protocol_2",
    "prediction_protocols",
    "gp_grid_fields",
    "write_grid_csv",
    "write_curves_csv",
    "write_summary_json",
]

FIELDS = ("val", "d1", "d4")


def hull_mask(points, hull_points, tol=1e-9):
    """True where ``points`` lie inside the convex hull of ``hull_points``."""
    hull_points = np.asarray(hull_points, dtype=float)
    try:
        tri = Delaunay(hull_points)
    except Exception as exc:  # qhull raises its own error type
        raise ContractError(f"cannot triangulate hull: {exc}") from None
    return tri.find_simplex(np.asarray(points, dtype=float), tol=tol) >= 0


@dataclass
class GridErrorReport:
    points: np.ndarray
    errors: dict
    inside: np.ndarray = None

    def max(self, tag, mask=None):
        e = self.errors[tag] if mask is None else self.errors[tag][mask]
        return float(e.max()) if e.size else float("nan")

    def mean(self, tag, mask=None):
        e = self.errors[tag] if mask is None else self.errors[tag][mask]
        return float(e.mean()) if e.size else float("nan")

    @property
    def outside(self):
        return None if self.inside is None else ~self.inside

    def summary(self):
        out = {}
        for tag in self.errors:
            out[tag] = {"max": self.max(tag), "mean": self.mean(tag)}
            if self.inside is not None:
                out[tag].update(
                    max_inside=self.max(tag, self.inside),
                    mean_inside=self.mean(tag, self.inside),
                    max_outside=self.max(tag, ~self.inside),
                    mean_outside=self.mean(tag, ~self.inside),
                )
        return out


def _truth_fields(truth, points):
    d = truth.derivs(points[:, 0], points[:, 1])
    return {"val": np.asarray(d.W, float), "d1": np.asarray(d.W1, float), "d4": np.asarray(d.W4, float)}


def grid_error(fields, truth, points, hull_points=None):
    """Percent error 100*|field - truth| / max|truth| over the grid, per field.

    ``fields`` maps any of val/d1/d4 to arrays on ``points``; ``truth`` is an
    AnalyticalModel. ``hull_points`` (e.g. training invariants) adds an
    inside-hull mask.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ref = _truth_fields(truth, points)
    errors = {}
    for tag, f in fields.items():
        if tag not in ref:
            raise ContractError(f"unknown field {tag!r}")
        f = np.asarray(f, dtype=float)
        if f.shape != (points.shape[0],):
            raise ContractError(f"field {tag} has shape {f.shape}, expected ({points.shape[0]},)")
        norm = np.max(np.abs(ref[tag]))
        if not norm > 0:
            raise DomainError(f"truth for {tag} vanishes on the grid; error is undefined")
        errors[tag] = 100.0 * np.abs(f - ref[tag]) / norm
    inside = hull_mask(points, hull_points) if hull_points is not None else None
    return GridErrorReport(points, errors, inside)


def gp_grid_fields(predict_fn, points, tags=FIELDS, chunk=500):
    """Posterior means and stds of ``tags`` on ``points`` via ``predict_fn(points, tags, full_cov)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    means = {t: [] for t in tags}
    stds = {t: [] for t in tags}
    for s in range(0, points.shape[0], chunk):
        post = predict_fn(points[s:s + chunk], tags, False)
        for t in tags:
            means[t].append(post.mean_of(t))
            stds[t].append(post.std_of(t))
    return {t: np.concatenate(means[t]) for t in tags}, {t: np.concatenate(stds[t]) for t in tags}


@dataclass
class FitMetrics:
    L2: float
    R2: float

    def to_dict(self):
        return {"L2": self.L2, "R2": self.R2}


def fit_metrics(obs, predicted):
    """L2 norm of stress residuals and R^2 pooled over both components."""
    predicted = np.asarray(predicted, dtype=float)
    y = obs.y
    if predicted.shape != y.shape:
        raise ContractError(f"prediction shape {predicted.shape} does not match {y.shape}")
    res = predicted - y
    ss_res = float(np.sum(res**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if not ss_tot > 0:
        raise DomainError("observed stresses have zero variance; R2 is undefined")
    return FitMetrics(L2=math.sqrt(ss_res), R2=1.0 - ss_res / ss_tot)


# --- analytical-model fitting ------------------------------------------------

LOG_BOUNDS = (1e-3, 1e3)


@dataclass
class ModelFit:
    kind: str
    params: dict = None
    metrics: FitMetrics = None
    restarts: int = 0
    error: str = None

    @property
    def ok(self):
        return self.error is None

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": self.params,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "restarts": self.restarts,
            "error": self.error,
        }


def _decode(kind, z):
    """Unconstrained vector -> parameter dict. Positive params are log-bounded, kappa is a sigmoid."""
    lo, hi = np.log(LOG_BOUNDS[0]), np.log(LOG_BOUNDS[1])
    out = {}
    for name, zi in zip(MODEL_PARAMS[kind], z):
        if name == "kappa":
            out[name] = KAPPA_MAX[kind] / (1.0 + math.exp(-float(np.clip(zi, -50, 50))))
        else:
            out[name] = float(np.exp(np.clip(zi, lo, hi)))
    return out


def _residual_fn(kind, obs):
    I1, I4 = invariants_from_stretches(obs.lambda_x, obs.lambda_y)
    a1, a4, b1 = stress_coefficients(obs.lambda_x, obs.lambda_y)
    y = np.concatenate([obs.Pxx, obs.Pyy])

    def residuals(z):
        model = AnalyticalModel(kind, _decode(kind, z))
        with np.errstate(all="ignore"):
            d = model.derivs(I1, I4)
            r = np.concatenate([a1 * d.W1 + a4 * d.W4, b1 * d.W1]) - y
        if not np.all(np.isfinite(r)):
            return np.full_like(y, 1e10)
        return r

    return residuals


def _fit_one(kind, obs, restarts, rng):
    residuals = _residual_fn(kind, obs)
    lo, hi = np.log(LOG_BOUNDS[0]), np.log(LOG_BOUNDS[1])
    names = MODEL_PARAMS[kind]
    best = None
    for _ in range(restarts):
        z0 = np.array([rng.normal(0.0, 1.5) if n == "kappa" else rng.uniform(lo, 0.6 * hi) for n in names])
        res = scipy.optimize.minimize(
            lambda z: float(np.sum(residuals(z) ** 2)), z0, method="Nelder-Mead",
            options={"maxiter": 400 * len(names), "xatol": 1e-8, "fatol": 1e-12},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        return None
    # least-squares polish of the best simplex result
    try:
        pol = scipy.optimize.least_squares(residuals, best.x, method="trf", x_scale="jac", max_nfev=2000)
        z = pol.x if np.sum(pol.fun**2) < best.fun else best.x
    except (ValueError, np.linalg.LinAlgError):
        z = best.x
    return _decode(kind, z)


def fit_analytical_models(obs, kinds=tuple(MODEL_PARAMS), restarts=20, seed=0):
    """Multi-start least-squares fit of each model to the stresses; returns {kind: ModelFit}."""
    if len(obs) == 0:
        raise ContractError("no observations to fit")
    out = {}
    for i, kind in enumerate(kinds):
        if kind not in MODEL_PARAMS:
            raise ContractError(f"unknown model kind {kind!r}")
        rng = np.random.default_rng([seed, i])
        try:
            params = _fit_one(kind, obs, restarts, rng)
        except (NumericalError, DomainError, ValueError, FloatingPointError) as exc:
            out[kind] = ModelFit(kind, restarts=restarts, error=str(exc))
            continue
        if params is None:
            out[kind] = ModelFit(kind, restarts=restarts, error="all restarts failed")
            continue
        model = AnalyticalModel(kind, params)
        metrics = fit_metrics(obs, np.column_stack(model.stresses(obs.lambda_x, obs.lambda_y)))
        out[kind] = ModelFit(kind, params, metrics, restarts)
    return out


# --- prediction protocols ----------------------------------------------------


@dataclass
class StressCurves:
    """Stress components along a path with posterior standard deviations."""

    t: np.ndarray
    points: np.ndarray
    mean: dict
    std: dict
    stretch: np.ndarray = None
    truth: dict = field(default_factory=dict)

    def band(self, comp, k=2.0):
        return self.mean[comp] - k * self.std[comp], self.mean[comp] + k * self.std[comp]

    def coverage(self, comp, k=2.0):
        lo, hi = self.band(comp, k)
        tr = self.truth[comp]
        return float(np.mean((tr >= lo) & (tr <= hi)))


def _derivative_blocks(predict_fn, points):
    post = predict_fn(points, ("d1", "d4"), True)
    m1, m4 = post.mean_of("d1"), post.mean_of("d4")
    v11 = np.diag(post.block("d1", "d1"))
    v44 = np.diag(post.block("d4", "d4"))
    v14 = np.diag(post.block("d1", "d4"))
    return m1, m4, v11, v14, v44


def _linear_band(c1, c4, m1, m4, v11, v14, v44):
    mean = c1 * m1 + c4 * m4
    var = c1**2 * v11 + 2 * c1 * c4 * v14 + c4**2 * v44
    return mean, np.sqrt(np.maximum(var, 0.0))


def prediction_protocol_1(predict_fn, max_stretch=1.31, n=32, truth=None):
    """Uniaxial-strain path: lambda_x from 1 to ``max_stretch`` with lambda_y held at 1."""
    t = np.linspace(0.0, 1.0, n)
    lx = 1.0 + t * (max_stretch - 1.0)
    ly = np.ones_like(lx)
    I1, I4 = invariants_from_stretches(lx, ly)
    pts = np.column_stack([I1, I4])
    m1, m4, v11, v14, v44 = _derivative_blocks(predict_fn, pts)
    a1, a4, b1 = stress_coefficients(lx, ly)
    mean, std = {}, {}
    mean["Pxx"], std["Pxx"] = _linear_band(a1, a4, m1, m4, v11, v14, v44)
    mean["Pyy"], std["Pyy"] = _linear_band(b1, 0.0 * b1, m1, m4, v11, v14, v44)
    curves = StressCurves(t, pts, mean, std, stretch=lx)
    if truth is not None:
        Pxx, Pyy = truth.stresses(lx, ly)
        curves.truth = {"Pxx": Pxx, "Pyy": Pyy}
    return curves


def _shear_coefficients(lx, ly, k):
    """Per-component (c1, c4) with P = c1*W1 + c4*W4 for F = [[lx, k], [0, ly]].

    pk1_full is linear in (W1, W4), so unit derivatives give the columns.
    """
    F = np.zeros(lx.shape + (2, 2))
    F[..., 0, 0], F[..., 0, 1], F[..., 1, 1] = lx, k, ly
    one, zero = np.ones_like(lx), np.zeros_like(lx)
    P1 = pk1_full(F, one, zero)
    P4 = pk1_full(F, zero, one)
    idx = {"xx": (0, 0), "xy": (0, 1), "yx": (1, 0), "yy": (1, 1)}
    return {c: (P1[..., i, j], P4[..., i, j]) for c, (i, j) in idx.items()}


def prediction_protocol_2(predict_fn, start=(3.0, 1.0), end=(3.3, 0.8), n=32, truth=None):
    """Straight invariant path realised by a simple-shear state; reports Pxx, Pyy, Pxy."""
    t = np.linspace(0.0, 1.0, n)
    I1 = start[0] + t * (end[0] - start[0])
    I4 = start[1] + t * (end[1] - start[1])
    lx, ly, k = shear_state_for_invariants(I1, I4)
    pts = np.column_stack(invariants_from_shear_state(lx, ly, k))
    m1, m4, v11, v14, v44 = _derivative_blocks(predict_fn, pts)
    coef = _shear_coefficients(lx, ly, k)
    mean, std = {}, {}
    for name, c in (("Pxx", "xx"), ("Pyy", "yy"), ("Pxy", "xy")):
        mean[name], std[name] = _linear_band(*coef[c], m1, m4, v11, v14, v44)
    curves = StressCurves(t, pts, mean, std, stretch=np.column_stack([lx, ly, k]))
    if truth is not None:
        d = truth.derivs(pts[:, 0], pts[:, 1])
        curves.truth = {name: coef[c][0] * d.W1 + coef[c][1] * d.W4 for name, c in
                        (("Pxx", "xx"), ("Pyy", "yy"), ("Pxy", "xy"))}
    return curves


def prediction_protocols(predict_fn, truth=None, n=32):
    return {
        "protocol_1": prediction_protocol_1(predict_fn, n=n, truth=truth),
        "protocol_2": prediction_protocol_2(predict_fn, n=n, truth=truth),
    }


# --- reports -----------------------------------------------------------------


def write_grid_csv(path, points, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["I1", "I4", "value"])
        for (a, b), v in zip(points, values):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])


def write_curves_csv(path, curves, comp):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["path_t", "mean", "std"] + (["truth"] if comp in curves.truth else [])
        w.writerow(header)
        for i, t in enumerate(curves.t):
            row = [repr(float(t)), repr(float(curves.mean[comp][i])), repr(float(curves.std[comp][i]))]
            if comp in curves.truth:
                row.append(repr(float(curves.truth[comp][i])))
            w.writerow(row)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def write_summary_json(path, summary):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=1, allow_nan=True)
