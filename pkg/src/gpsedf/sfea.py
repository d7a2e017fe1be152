"""Sigma-point propagation of a stochastic SEDF through the FE solver.

Mode coefficients nu ~ N(0, diag(lambda)) are represented by 2m+1 points:
the origin and +-sqrt(m*lambda_j) along each axis. Mean weights are 0 for
the origin and 1/(2m) otherwise; covariance weights are 2 for the origin
and 1/(2m) otherwise. The central covariance weight of 2 is what a scaled
unscented transform with alpha = 1, beta = 2, kappa = 0 gives; it is kept
by default. ``standard_ut=True`` drops the beta term so the central
covariance weight is 0.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, GPSEDFError
from .fesolver import MaterialRealization, solve_static

__all__ = [
    "SigmaEnsemble",
    "ResultStatistics",
    "EnsembleError",
    "DEFAULT_SNAPSHOTS",
    "build_sigma_points",
    "propagate",
    "ensemble_stats",
]

DEFAULT_SNAPSHOTS = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)


class EnsembleError(GPSEDFError, RuntimeError):
    """An ensemble member's FE solve failed."""

    def __init__(self, message, k=None, nu=None):
        super().__init__(message)
        self.k = k
        self.nu = nu


@dataclass
class SigmaEnsemble:
    points: np.ndarray  # (2m+1, m)
    w: np.ndarray
    v: np.ndarray
    eigenvalues: np.ndarray

    @property
    def m(self):
        return int(self.eigenvalues.size)

    def __len__(self):
        return self.points.shape[0]

    def to_dict(self):
        return {
            "m": self.m,
            "eigenvalues": self.eigenvalues.tolist(),
            "points": self.points.tolist(),
            "w": self.w.tolist(),
            "v": self.v.tolist(),
        }


def build_sigma_points(eigenvalues, standard_ut=False):
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    if np.any(~(lam >= 0)):
        raise ContractError("eigenvalues must be nonnegative")
    m = lam.size
    if m == 0:
        return SigmaEnsemble(np.zeros((1, 0)), np.ones(1), np.zeros(1), lam)
    r = np.sqrt(m * lam)
    pts = np.zeros((2 * m + 1, m))
    idx = np.arange(m)
    pts[1 + 2 * idx, idx] = r
    pts[2 + 2 * idx, idx] = -r
    w = np.full(2 * m + 1, 1.0 / (2 * m))
    v = w.copy()
    w[0] = 0.0
    v[0] = 0.0 if standard_ut else 2.0
    return SigmaEnsemble(pts, w, v, lam)


@dataclass
class ResultStatistics:
    """Weighted mean and standard deviation per snapshot load factor."""

    snapshots: tuple
    mean_u: dict
    std_u: dict
    mean_vm: dict
    std_vm: dict
    ensemble: SigmaEnsemble = None
    cov_u: dict = field(default_factory=dict)

    def to_dict(self):
        key = lambda lf: f"{lf:.12g}"
        out = {
            "snapshots": list(self.snapshots),
            "fields": {
                key(lf): {
                    "mean_displacement": self.mean_u[lf].reshape(-1, 2).tolist(),
                    "std_displacement": self.std_u[lf].reshape(-1, 2).tolist(),
                    "mean_von_mises": self.mean_vm[lf].tolist(),
                    "std_von_mises": self.std_vm[lf].tolist(),
                }
                for lf in self.snapshots
            },
        }
        if self.ensemble is not None:
            out["ensemble"] = self.ensemble.to_dict()
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def _schedule_with(load_schedule, snapshots):
    merged = []
    for s in sorted(list(load_schedule) + [s for s in snapshots if s > 0.0]):
        if not merged or s - merged[-1] > 1e-12:
            merged.append(s)
    merged[-1] = 1.0
    return tuple(merged)


def propagate(sedf, mesh, bcs, snapshots=DEFAULT_SNAPSHOTS, ensemble=None, standard_ut=False, solver_kwargs=None):
    """Run one FE solve per sigma point; returns ({k: FEResult}, ensemble)."""
    from dataclasses import replace

    ensemble = build_sigma_points(sedf.eigenvalues, standard_ut) if ensemble is None else ensemble
    snapshots = tuple(float(s) for s in snapshots)
    bcs = replace(bcs, load_schedule=_schedule_with(bcs.load_schedule, snapshots))
    results = {}
    for k, nu in enumerate(ensemble.points):
        try:
            results[k] = solve_static(mesh, bcs, MaterialRealization(sedf, nu), snapshots=snapshots,
                                      **(solver_kwargs or {}))
        except GPSEDFError as exc:
            raise EnsembleError(f"member k={k} with nu={nu.tolist()} failed: {exc}", k, nu) from exc
    return results, ensemble


def _weighted(R, ens):
    mean = np.einsum("k,k...->...", ens.w, R)
    dev = R - mean
    var = np.einsum("k,k...->...", ens.v, dev * dev)
    return mean, dev, var


def ensemble_stats(results, ensemble, snapshots=None, full_cov=False):
    """Weighted statistics of displacement and von Mises over the ensemble."""
    keys = sorted(results)
    if keys != list(range(len(ensemble))):
        raise ContractError("results must be keyed by sigma-point index 0..2m")
    first = results[keys[0]]
    if snapshots is None:
        snapshots = tuple(sorted(first.snapshots)) or (1.0,)
    mean_u, std_u, mean_vm, std_vm, cov_u = {}, {}, {}, {}, {}
    for lf in snapshots:
        U, V = [], []
        for k in keys:
            r = results[k]
            snap = r.snapshots.get(lf)
            if snap is None:
                if lf != 1.0:
                    raise ContractError(f"member {k} has no snapshot at load factor {lf}")
                snap = {"u": r.displacement, "von_mises": r.von_mises}
            if snap["u"].shape != first.displacement.shape or snap["von_mises"].shape != first.von_mises.shape:
                raise ContractError("ensemble members use different meshes")
            U.append(snap["u"])
            V.append(snap["von_mises"])
        U, V = np.array(U), np.array(V)
        mu, dev, var = _weighted(U, ensemble)
        mean_u[lf], std_u[lf] = mu, np.sqrt(np.maximum(var, 0.0))
        mv, _, vv = _weighted(V, ensemble)
        mean_vm[lf], std_vm[lf] = mv, np.sqrt(np.maximum(vv, 0.0))
        if full_cov:
            if U.shape[1] > 10_000:
                raise ContractError("full covariance limited to 1e4 displacement entries")
            C = np.einsum("k,ki,kj->ij", ensemble.v, dev, dev)
            cov_u[lf] = 0.5 * (C + C.T)
    return ResultStatistics(tuple(snapshots), mean_u, std_u, mean_vm, std_vm, ensemble, cov_u)
