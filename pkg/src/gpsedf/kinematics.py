"""Planar incompressible kinematics and invariant-based hyperelastic models.

Everything here is vectorized over numpy arrays. Energies and stresses are
in kPa, stretches are dimensionless. The fiber direction is the x-axis
unless a direction is passed explicitly.
"""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DomainError

__all__ = [
    "StretchState",
    "InvariantPoint",
    "SEDFDerivatives",
    "AnalyticalModel",
    "MODEL_PARAMS",
    "GOH_TRUTH",
    "invariants_from_stretches",
    "invariants_from_shear_state",
    "shear_state_for_invariants",
    "stress_coefficients",
    "stresses_from_derivs",
    "pk1_full",
    "analytic_energy",
    "analytic_derivs",
]


@dataclass(frozen=True)
class StretchState:
    lambda_x: float
    lambda_y: float
    shear_k: float = 0.0

    def __post_init__(self):
        if not (self.lambda_x > 0 and self.lambda_y > 0):
            raise DomainError("stretches must be positive")

    @property
    def F(self):
        """In-plane deformation gradient [[lx, k], [0, ly]]."""
        return np.array([[self.lambda_x, self.shear_k], [0.0, self.lambda_y]])


@dataclass(frozen=True)
class InvariantPoint:
    I1: float
    I4: float


@dataclass
class SEDFDerivatives:
    """Energy and its partial derivatives w.r.t. (I1, I4); arrays or scalars."""

    W: np.ndarray = 0.0
    W1: np.ndarray = 0.0
    W4: np.ndarray = 0.0
    W11: np.ndarray = 0.0
    W44: np.ndarray = 0.0
    W14: np.ndarray = 0.0


def _check_stretches(lx, ly):
    lx = np.asarray(lx, dtype=float)
    ly = np.asarray(ly, dtype=float)
    if np.any(~(lx > 0)) or np.any(~(ly > 0)):
        raise DomainError("stretches must be positive and finite")
    return lx, ly


def invariants_from_stretches(lambda_x, lambda_y):
    """Return (I1, I4) for F = diag(lx, ly, 1/(lx*ly)) and fibers along x."""
    lx, ly = _check_stretches(lambda_x, lambda_y)
    I1 = lx**2 + ly**2 + (lx * ly) ** -2
    I4 = lx**2
    return I1, I4


def invariants_from_shear_state(lambda_x, lambda_y, shear_k=0.0):
    """Invariants of the in-plane F = [[lx, k], [0, ly]] with plane-stress thickness."""
    lx, ly = _check_stretches(lambda_x, lambda_y)
    k = np.asarray(shear_k, dtype=float)
    I1 = lx**2 + k**2 + ly**2 + (lx * ly) ** -2
    I4 = lx**2
    return I1, I4


def shear_state_for_invariants(I1, I4):
    """Sheared stretch state (lx, ly=1, k) that realizes a target (I1, I4).

    Only defined where I1 - I4 - 1 - 1/I4 >= 0.
    """
    I1 = np.asarray(I1, dtype=float)
    I4 = np.asarray(I4, dtype=float)
    if np.any(I4 <= 0):
        raise DomainError("I4 must be positive")
    radicand = I1 - I4 - 1.0 - 1.0 / I4
    # round-off at the identity state
    radicand = np.where(np.abs(radicand) < 1e-14, 0.0, radicand)
    if np.any(radicand < 0):
        raise DomainError("target invariants not reachable with lambda_y = 1")
    return np.sqrt(I4), np.ones_like(I4), np.sqrt(radicand)


def stress_coefficients(lambda_x, lambda_y):
    """Rows mapping (W1, W4) to (Pxx, Pyy) for an unsheared biaxial state.

    Returns ``(a1, a4, b1)`` with Pxx = a1*W1 + a4*W4 and Pyy = b1*W1.
    """
    lx, ly = _check_stretches(lambda_x, lambda_y)
    a1 = 2.0 * (lx - lx**-3 * ly**-2)
    a4 = 2.0 * lx
    b1 = 2.0 * (ly - lx**-2 * ly**-3)
    return a1, a4, b1


def stresses_from_derivs(lambda_x, lambda_y, W1, W4):
    """First-PK (Pxx, Pyy) after eliminating pressure with Pzz = 0."""
    a1, a4, b1 = stress_coefficients(lambda_x, lambda_y)
    return a1 * W1 + a4 * W4, b1 * W1


def pk1_full(F, W1, W4, fiber=(1.0, 0.0)):
    """In-plane first-PK stress of a plane-stress incompressible membrane.

    ``F`` has shape (..., 2, 2); W1 and W4 broadcast against the leading
    axes. The pressure p = 2*W1/det(F)^2 makes the out-of-plane stress vanish.
    """
    F = np.asarray(F, dtype=float)
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(~(det > 0)):
        raise DomainError("deformation gradient must have positive determinant")
    M = np.asarray(fiber, dtype=float)
    W1 = np.asarray(W1, dtype=float)[..., None, None]
    W4 = np.asarray(W4, dtype=float)[..., None, None]
    FinvT = np.empty_like(F)
    FinvT[..., 0, 0] = F[..., 1, 1]
    FinvT[..., 0, 1] = -F[..., 1, 0]
    FinvT[..., 1, 0] = -F[..., 0, 1]
    FinvT[..., 1, 1] = F[..., 0, 0]
    FinvT /= det[..., None, None]
    p = 2.0 * W1 / det[..., None, None] ** 2
    FM = np.einsum("...ij,j->...i", F, M)
    return 2.0 * W1 * F + 2.0 * W4 * FM[..., :, None] * M - p * FinvT


# --- analytical models -----------------------------------------------------

MODEL_PARAMS = {
    "GOH": ("mu", "k1", "k2", "kappa"),
    "HGO": ("mu", "k1", "k2"),
    "HGO2": ("k1", "k2", "k3", "k4"),
    "Holzapfel": ("mu", "k1", "k2", "kappa"),
    "HY": ("k1", "k2", "k3", "k4"),
    "LS": ("mu", "k1", "k2", "k3", "kappa"),
    "MN": ("mu", "k1", "k2", "k3"),
}

# upper bound on kappa per model; lower bound is 0
KAPPA_MAX = {"GOH": 1.0 / 3.0, "Holzapfel": 1.0, "LS": 1.0}


@dataclass
class AnalyticalModel:
    """One of the seven invariant-based models, with named parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_PARAMS:
            raise ContractError(f"unknown model kind {self.kind!r}")
        missing = set(MODEL_PARAMS[self.kind]) - set(self.params)
        if missing:
            raise ContractError(f"{self.kind} is missing parameters {sorted(missing)}")
        self.params = {k: float(self.params[k]) for k in MODEL_PARAMS[self.kind]}
        if "kappa" in self.params:
            kappa = self.params["kappa"]
            if not 0.0 <= kappa <= KAPPA_MAX[self.kind]:
                raise ContractError(f"kappa={kappa} out of range for {self.kind}")

    def energy(self, I1, I4):
        return analytic_energy(self, I1, I4)

    def derivs(self, I1, I4):
        return analytic_derivs(self, I1, I4)

    def stresses(self, lambda_x, lambda_y):
        I1, I4 = invariants_from_stretches(lambda_x, lambda_y)
        d = self.derivs(I1, I4)
        return stresses_from_derivs(lambda_x, lambda_y, d.W1, d.W4)


GOH_TRUTH = AnalyticalModel("GOH", {"mu": 5.0, "k1": 4.0, "k2": 10.0, "kappa": 0.1})


def _prep(model, I1, I4):
    if not isinstance(model, AnalyticalModel):
        raise ContractError("expected an AnalyticalModel")
    I1 = np.asarray(I1, dtype=float)
    I4 = np.asarray(I4, dtype=float)
    if model.kind in ("HY", "MN") and np.any(~(I4 > 0)):
        raise ContractError(f"{model.kind} requires I4 > 0")
    return I1, I4


def analytic_energy(model, I1, I4):
    """Strain energy of ``model`` at (I1, I4)."""
    return analytic_derivs(model, I1, I4).W


def analytic_derivs(model, I1, I4):
    """Closed-form energy, gradient and Hessian entries of ``model``."""
    I1, I4 = _prep(model, I1, I4)
    p = model.params
    x = I1 - 3.0
    y = I4 - 1.0
    zero = np.zeros(np.broadcast(I1, I4).shape)
    kind = model.kind

    if kind == "GOH":
        mu, k1, k2, kap = p["mu"], p["k1"], p["k2"], p["kappa"]
        c4 = 1.0 - 3.0 * kap
        a = kap * I1 + c4 * I4 - 1.0
        E = np.exp(k2 * a**2)
        dWa = k1 * a * E
        d2Wa = k1 * E * (1.0 + 2.0 * k2 * a**2)
        return SEDFDerivatives(
            W=0.5 * mu * x + k1 / (2 * k2) * (E - 1.0),
            W1=0.5 * mu + kap * dWa,
            W4=c4 * dWa,
            W11=kap**2 * d2Wa,
            W44=c4**2 * d2Wa,
            W14=kap * c4 * d2Wa,
        )

    if kind == "HGO":
        mu, k1, k2 = p["mu"], p["k1"], p["k2"]
        E = np.exp(k2 * y**2)
        return SEDFDerivatives(
            W=0.5 * mu * x + k1 / (2 * k2) * (E - 1.0),
            W1=0.5 * mu + zero,
            W4=k1 * y * E + zero,
            W11=zero,
            W44=k1 * E * (1.0 + 2.0 * k2 * y**2) + zero,
            W14=zero,
        )

    if kind == "HGO2":
        k1, k2, k3, k4 = p["k1"], p["k2"], p["k3"], p["k4"]
        E1 = np.exp(k2 * x)
        E4 = np.exp(k4 * y**2)
        return SEDFDerivatives(
            W=k1 / k2 * (E1 - 1.0) + k3 / (2 * k4) * (E4 - 1.0),
            W1=k1 * E1 + zero,
            W4=k3 * y * E4 + zero,
            W11=k1 * k2 * E1 + zero,
            W44=k3 * E4 * (1.0 + 2.0 * k4 * y**2) + zero,
            W14=zero,
        )

    if kind == "Holzapfel":
        mu, k1, k2, kap = p["mu"], p["k1"], p["k2"], p["kappa"]
        E = np.exp(k2 * (kap * x**2 + (1.0 - kap) * y**2))
        return SEDFDerivatives(
            W=0.5 * mu * x + k1 / (2 * k2) * (E - 1.0),
            W1=0.5 * mu + k1 * kap * x * E,
            W4=k1 * (1.0 - kap) * y * E,
            W11=k1 * kap * E * (1.0 + 2.0 * k2 * kap * x**2),
            W44=k1 * (1.0 - kap) * E * (1.0 + 2.0 * k2 * (1.0 - kap) * y**2),
            W14=2.0 * k1 * k2 * kap * (1.0 - kap) * x * y * E,
        )

    if kind == "HY":
        k1, k2, k3, k4 = p["k1"], p["k2"], p["k3"], p["k4"]
        E1 = np.exp(k2 * x)
        s = np.sqrt(I4)
        z = s - 1.0
        G = np.exp(k4 * z**2)
        return SEDFDerivatives(
            W=k1 / k2 * (E1 - 1.0) + k3 / k4 * (G - 1.0),
            W1=k1 * E1 + zero,
            W4=k3 * z * G / s + zero,
            W11=k1 * k2 * E1 + zero,
            W44=k3 * G * (k4 * z**2 / s**2 + 0.5 / s**3) + zero,
            W14=zero,
        )

    if kind == "LS":
        mu, k1, k2, k3, kap = p["mu"], p["k1"], p["k2"], p["k3"], p["kappa"]
        E1 = np.exp(k2 * x**2)
        E4 = np.exp(k3 * y**2)
        return SEDFDerivatives(
            W=0.5 * mu * x + 0.5 * k1 * (kap * E1 + (1.0 - kap) * E4 - 1.0),
            W1=0.5 * mu + k1 * kap * k2 * x * E1 + zero,
            W4=k1 * (1.0 - kap) * k3 * y * E4 + zero,
            W11=k1 * kap * k2 * E1 * (1.0 + 2.0 * k2 * x**2) + zero,
            W44=k1 * (1.0 - kap) * k3 * E4 * (1.0 + 2.0 * k3 * y**2) + zero,
            W14=zero,
        )

    # MN
    mu, k1, k2, k3 = p["mu"], p["k1"], p["k2"], p["k3"]
    s = np.sqrt(I4)
    z = s - 1.0
    E = np.exp(k2 * x**2 + k3 * z**4)
    Q1 = 2.0 * k2 * x
    Q4 = 2.0 * k3 * z**3 / s
    Q44 = k3 * (3.0 * z**2 / s**2 - z**3 / s**3)
    return SEDFDerivatives(
        W=0.5 * mu * x + k1 * (E - 1.0),
        W1=0.5 * mu + k1 * E * Q1,
        W4=k1 * E * Q4,
        W11=k1 * E * (Q1**2 + 2.0 * k2),
        W44=k1 * E * (Q4**2 + Q44),
        W14=k1 * E * Q1 * Q4,
    )
