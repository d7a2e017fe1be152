"""Biaxial protocols, synthetic observations, CSV I/O and invariant lattices."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DomainError, ParseError
from .kinematics import invariants_from_stretches

__all__ = [
    "Protocol",
    "ObservationSet",
    "Lattice",
    "ConstraintGrid",
    "REFERENCE_POINT",
    "generate_protocols",
    "synthesize_observations",
    "build_constraint_grid",
    "load_observations_csv",
    "save_observations_csv",
    "CSV_HEADER",
]

CSV_HEADER = ("protocol_id", "lambda_x", "lambda_y", "Pxx", "Pyy")

# Psi is pinned to zero at the undeformed state
REFERENCE_POINT = (3.0, 1.0)


@dataclass(frozen=True)
class Protocol:
    """A straight loading path starting at the identity.

    ``biaxial_ray`` moves along direction (sin(angle), cos(angle)) in
    (lambda_x, lambda_y) space, scaled so the larger stretch reaches
    ``max_stretch``. The pure-shear kinds keep lambda_x * lambda_y = 1.
    """

    kind: str
    angle: float = math.pi / 4
    steps: int = 20
    max_stretch: float = 1.2

    def __post_init__(self):
        if self.kind not in ("biaxial_ray", "pure_shear_x", "pure_shear_y", "custom"):
            raise ContractError(f"unknown protocol kind {self.kind!r}")
        if self.steps < 2:
            raise ContractError("a protocol needs at least 2 steps")
        if not self.max_stretch > 1:
            raise ContractError("max_stretch must exceed 1")
        if self.kind == "biaxial_ray" and not 0 < self.angle < math.pi / 2:
            raise ContractError("ray angle must lie in (0, pi/2)")

    def stretches(self):
        """(lambda_x, lambda_y) at ``steps`` points; the identity itself is excluded."""
        t = np.arange(1, self.steps + 1) / self.steps
        amp = self.max_stretch - 1.0
        if self.kind == "biaxial_ray":
            dx, dy = math.sin(self.angle), math.cos(self.angle)
            m = max(dx, dy)
            return 1.0 + t * amp * dx / m, 1.0 + t * amp * dy / m
        lam = 1.0 + t * amp
        if self.kind == "pure_shear_x":
            return lam, 1.0 / lam
        if self.kind == "pure_shear_y":
            return 1.0 / lam, lam
        raise ContractError("custom protocols carry their own stretches")


@dataclass
class ObservationSet:
    """Biaxial stretch/stress records; stresses are first-PK in kPa."""

    lambda_x: np.ndarray
    lambda_y: np.ndarray
    Pxx: np.ndarray
    Pyy: np.ndarray
    protocol_id: np.ndarray = None

    def __post_init__(self):
        self.lambda_x = np.asarray(self.lambda_x, dtype=float).ravel()
        self.lambda_y = np.asarray(self.lambda_y, dtype=float).ravel()
        self.Pxx = np.asarray(self.Pxx, dtype=float).ravel()
        self.Pyy = np.asarray(self.Pyy, dtype=float).ravel()
        n = self.lambda_x.size
        if self.protocol_id is None:
            self.protocol_id = np.zeros(n, dtype=int)
        self.protocol_id = np.array([str(p) for p in np.ravel(self.protocol_id)], dtype=object)
        if not (self.lambda_y.size == self.Pxx.size == self.Pyy.size == self.protocol_id.size == n):
            raise ContractError("observation arrays differ in length")
        if n and (np.any(~(self.lambda_x > 0)) or np.any(~(self.lambda_y > 0))):
            raise DomainError("stretches must be positive")

    def __len__(self):
        return self.lambda_x.size

    @property
    def invariants(self):
        """(N, 2) array of (I1, I4) per record."""
        I1, I4 = invariants_from_stretches(self.lambda_x, self.lambda_y)
        return np.column_stack([I1, I4])

    @property
    def X(self):
        return np.column_stack([self.lambda_x, self.lambda_y])

    @property
    def y(self):
        return np.column_stack([self.Pxx, self.Pyy])

    @classmethod
    def from_arrays(cls, X, y, protocol_id=None):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(X[:, 0], X[:, 1], y[:, 0], y[:, 1], protocol_id)

    def subset(self, mask):
        mask = np.asarray(mask)
        return ObservationSet(
            self.lambda_x[mask], self.lambda_y[mask], self.Pxx[mask], self.Pyy[mask], self.protocol_id[mask]
        )

    def protocols(self):
        """Protocol ids in order of first appearance."""
        return list(dict.fromkeys(self.protocol_id.tolist()))


@dataclass
class Lattice:
    """Uniform rectangular lattice in (I1, I4); points are row-major with I4 fastest."""

    bounds: tuple
    resolution: tuple = (20, 20)
    points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        i1_min, i1_max, i4_min, i4_max = (float(b) for b in self.bounds)
        n1, n4 = (int(r) for r in self.resolution)
        if n1 < 1 or n4 < 1:
            raise ContractError("resolution must be positive")
        if (n1 > 1 and not i1_max > i1_min) or (n4 > 1 and not i4_max > i4_min):
            raise ContractError("degenerate lattice bounds")
        self.bounds = (i1_min, i1_max, i4_min, i4_max)
        self.resolution = (n1, n4)
        g1, g4 = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.column_stack([g1.ravel(), g4.ravel()])

    @property
    def axes(self):
        i1_min, i1_max, i4_min, i4_max = self.bounds
        n1, n4 = self.resolution
        a1 = np.linspace(i1_min, i1_max, n1) if n1 > 1 else np.array([i1_min])
        a4 = np.linspace(i4_min, i4_max, n4) if n4 > 1 else np.array([i4_min])
        return a1, a4

    def __len__(self):
        return self.points.shape[0]


ConstraintGrid = Lattice


def generate_protocols(ell, include_pure_shear=True, max_stretch=1.2, steps=20):
    """``ell`` biaxial rays at angles j*pi/(2*(ell+1)), plus two pure-shear paths."""
    if ell < 0 or (ell == 0 and not include_pure_shear):
        raise ContractError("empty protocol design")
    protocols = [
        Protocol("biaxial_ray", j * math.pi / (2 * (ell + 1)), steps, max_stretch) for j in range(1, ell + 1)
    ]
    if include_pure_shear:
        protocols.append(Protocol("pure_shear_x", steps=steps, max_stretch=max_stretch))
        protocols.append(Protocol("pure_shear_y", steps=steps, max_stretch=max_stretch))
    return protocols


def synthesize_observations(protocols, truth, noise_variance=0.02, seed=None):
    """Sample each protocol, compute ``truth`` stresses and add Gaussian noise."""
    if noise_variance < 0:
        raise ContractError("noise variance must be nonnegative")
    lx, ly, pid = [], [], []
    for k, proto in enumerate(protocols):
        a, b = proto.stretches()
        lx.append(a)
        ly.append(b)
        pid.append(np.full(a.size, k))
    lx, ly, pid = np.concatenate(lx), np.concatenate(ly), np.concatenate(pid)
    Pxx, Pyy = truth.stresses(lx, ly)
    rng = np.random.default_rng(seed)
    std = math.sqrt(noise_variance)
    Pxx = Pxx + std * rng.standard_normal(Pxx.size)
    Pyy = Pyy + std * rng.standard_normal(Pyy.size)
    return ObservationSet(lx, ly, Pxx, Pyy, pid)


def build_constraint_grid(obs, padding=0.1, resolution=(20, 20)):
    """Lattice over the observed (I1, I4) extent padded by ``padding`` on each side."""
    if len(obs) == 0:
        raise ContractError("no observations")
    th = obs.invariants
    lo, hi = th.min(axis=0), th.max(axis=0)
    if np.all(hi - lo == 0):
        raise ContractError("degenerate observation hull: all points identical")
    return Lattice((lo[0] - padding, hi[0] + padding, lo[1] - padding, hi[1] + padding), resolution)


def save_observations_csv(obs, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in zip(obs.protocol_id, obs.lambda_x, obs.lambda_y, obs.Pxx, obs.Pyy):
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def load_observations_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ParseError(f"missing column(s) {missing}", line=1)
        idx = [header.index(c) for c in CSV_HEADER]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            pid = row[idx[0]].strip()
            try:
                vals = [float(row[i]) for i in idx[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", line=lineno)
            if vals[0] <= 0 or vals[1] <= 0:
                raise ParseError("nonpositive stretch", line=lineno)
            rows.append((pid, *vals))
    if not rows:
        raise ParseError("no observation records", line=1)
    pid, lx, ly, pxx, pyy = zip(*rows)
    return ObservationSet(lx, ly, pxx, pyy, pid)
