"""Plane-stress incompressible hyperelastic membrane solver on bilinear quads.

The material is any object with ``derivs(I1, I4)`` returning SEDFDerivatives
(an AnalyticalModel, a SplineSurface or a MaterialRealization). The
through-thickness stretch is 1/det(F), so I1 = tr(F^T F) + det(F)^-2 and the
pressure is eliminated in closed form. Units: mm, kPa, mN.
"""
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .exceptions import ContractError, ConvergenceError, DomainError, ExtrapolationError, NumericalError

__all__ = [
    "Mesh",
    "BoundaryConditions",
    "MaterialRealization",
    "FEResult",
    "rectangle_mesh",
    "canonical_problem",
    "element_stress_tangent",
    "material_state",
    "solve_static",
    "von_mises",
    "THICKNESS",
]

THICKNESS = 0.38
_GAUSS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]) / np.sqrt(3.0)
_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@dataclass
class Mesh:
    nodes: np.ndarray
    quads: np.ndarray
    fiber_angle: np.ndarray = None
    thickness: float = THICKNESS

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.quads = np.asarray(self.quads, dtype=int).reshape(-1, 4)
        if self.fiber_angle is None:
            self.fiber_angle = np.zeros(len(self.quads))
        self.fiber_angle = np.broadcast_to(np.asarray(self.fiber_angle, dtype=float), (len(self.quads),)).copy()
        if self.quads.min() < 0 or self.quads.max() >= len(self.nodes):
            raise ContractError("element connectivity refers to missing nodes")
        if np.setdiff1d(np.arange(len(self.nodes)), self.quads).size:
            raise ContractError("mesh has orphan nodes")
        _, detJ = self.shape_gradients()
        if np.any(~(detJ > 0)):
            bad = int(np.argwhere(~(detJ > 0))[0, 0])
            raise ContractError(f"element {bad} has a non-positive reference Jacobian")

    @property
    def n_dof(self):
        return 2 * len(self.nodes)

    def shape_gradients(self):
        """dN/dX at each Gauss point, shape (E, 4, 4, 2), and det J0 (E, 4)."""
        xi, eta = _GAUSS[:, 0], _GAUSS[:, 1]
        dN = np.empty((4, 4, 2))  # gauss, node, (dxi, deta)
        dN[:, :, 0] = 0.25 * _XI[None, :, 0] * (1.0 + eta[:, None] * _XI[None, :, 1])
        dN[:, :, 1] = 0.25 * _XI[None, :, 1] * (1.0 + xi[:, None] * _XI[None, :, 0])
        X = self.nodes[self.quads]  # E, node, dim
        J = np.einsum("gai,ead->egdi", dN, X)  # dX_d/dxi_i
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        Jinv = np.empty_like(J)
        Jinv[..., 0, 0] = J[..., 1, 1]
        Jinv[..., 0, 1] = -J[..., 0, 1]
        Jinv[..., 1, 0] = -J[..., 1, 0]
        Jinv[..., 1, 1] = J[..., 0, 0]
        Jinv /= np.where(detJ == 0, 1.0, detJ)[..., None, None]
        G = np.einsum("gai,egid->egad", dN, Jinv)
        return G, detJ

    def fiber_vectors(self):
        return np.column_stack([np.cos(self.fiber_angle), np.sin(self.fiber_angle)])

    def to_dict(self):
        return {
            "nodes": self.nodes.tolist(),
            "quads": self.quads.tolist(),
            "fiber_angle": self.fiber_angle.tolist(),
            "thickness": self.thickness,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["nodes"], d["quads"], d.get("fiber_angle"), d.get("thickness", THICKNESS))


@dataclass
class BoundaryConditions:
    """Dirichlet rows (node, component, value) and edge tractions.

    Each Neumann row is (node_a, node_b, traction_a, traction_b): a nominal
    traction (kPa, per unit load factor) varying linearly along the
    reference edge a-b.
    """

    dirichlet: list = field(default_factory=list)
    neumann: list = field(default_factory=list)
    load_schedule: tuple = (0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        self.dirichlet = [(int(n), int(c), float(v)) for n, c, v in self.dirichlet]
        self.neumann = [(int(a), int(b), tuple(map(float, ta)), tuple(map(float, tb))) for a, b, ta, tb in self.neumann]
        sched = tuple(float(s) for s in self.load_schedule)
        if not sched or sched[-1] != 1.0 or np.any(np.diff((0.0,) + sched) <= 0):
            raise ContractError("load schedule must be increasing and end at 1")
        self.load_schedule = sched
        keys = [(n, c) for n, c, _ in self.dirichlet]
        if len(set(keys)) != len(keys):
            raise ContractError("duplicate Dirichlet entries")

    def dirichlet_dofs(self):
        dofs = np.array([2 * n + c for n, c, _ in self.dirichlet], dtype=int)
        vals = np.array([v for _, _, v in self.dirichlet], dtype=float)
        return dofs, vals

    def external_force(self, mesh):
        """Consistent nodal forces (mN) at load factor 1."""
        f = np.zeros(mesh.n_dof)
        for a, b, ta, tb in self.neumann:
            L = np.linalg.norm(mesh.nodes[b] - mesh.nodes[a])
            ta, tb = np.asarray(ta), np.asarray(tb)
            w = L * mesh.thickness / 6.0
            f[2 * a:2 * a + 2] += w * (2.0 * ta + tb)
            f[2 * b:2 * b + 2] += w * (ta + 2.0 * tb)
        return f

    def validate(self, mesh):
        dofs, _ = self.dirichlet_dofs()
        if dofs.size and (dofs.max() >= mesh.n_dof):
            raise ContractError("Dirichlet node out of range")
        loaded = np.flatnonzero(self.external_force(mesh))
        clash = np.intersect1d(loaded, dofs)
        if clash.size:
            raise ContractError(f"dofs {clash.tolist()} carry both Dirichlet and Neumann conditions")

    def to_dict(self):
        return {
            "dirichlet": [list(r) for r in self.dirichlet],
            "neumann": [[a, b, list(ta), list(tb)] for a, b, ta, tb in self.neumann],
            "load_schedule": list(self.load_schedule),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("dirichlet", []), d.get("neumann", []), d.get("load_schedule", (0.25, 0.5, 0.75, 1.0)))


@dataclass
class MaterialRealization:
    """One member of a stochastic SEDF: S_bar + sum nu_i S_i."""

    sedf: object
    nu: np.ndarray = None

    def __post_init__(self):
        m = self.sedf.m
        self.nu = np.zeros(m) if self.nu is None else np.asarray(self.nu, dtype=float).reshape(-1)
        if self.nu.size != m:
            raise ContractError(f"expected {m} mode coefficients, got {self.nu.size}")
        self._surface = self.sedf.realization(self.nu)

    def derivs(self, I1, I4, element=None):
        return self._surface.derivs(I1, I4, element=element)


@dataclass
class FEResult:
    displacement: np.ndarray
    cauchy: np.ndarray  # (E, 4, 2, 2) at Gauss points
    von_mises: np.ndarray  # (E,)
    reactions: np.ndarray
    snapshots: dict = field(default_factory=dict)  # load factor -> {"u", "von_mises"}
    log: list = field(default_factory=list)

    def to_dict(self):
        return {
            "displacement": self.displacement.reshape(-1, 2).tolist(),
            "von_mises": self.von_mises.tolist(),
            "element_cauchy_mean": self.cauchy.mean(axis=1).reshape(-1, 4).tolist(),
            "snapshots": {
                f"{lf:.12g}": {"displacement": s["u"].reshape(-1, 2).tolist(), "von_mises": s["von_mises"].tolist()}
                for lf, s in self.snapshots.items()
            },
            "log": self.log,
        }


def rectangle_mesh(nx, ny, width=10.0, height=10.0, fiber_angle=0.0, thickness=THICKNESS):
    """Structured nx-by-ny quad mesh on [0, width] x [0, height]; nodes x-fastest."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (j * (nx + 1) + i).ravel()
    quads = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    return Mesh(nodes, quads, np.full(len(quads), fiber_angle), thickness)


def canonical_problem(n=16, traction=(6.0, 3.0), load_schedule=(0.25, 0.5, 0.75, 1.0)):
    """Square membrane with symmetry rollers on the left/bottom edges.

    The right edge carries an x-traction rising linearly from 0.5*Tx at the
    bottom to Tx at the top; the top edge carries a y-traction rising from
    0.5*Ty at the left to Ty at the right.
    """
    mesh = rectangle_mesh(n, n)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    L = 10.0
    tol = 1e-9
    dirichlet = [(k, 0, 0.0) for k in np.flatnonzero(np.abs(x) < tol)]
    dirichlet += [(k, 1, 0.0) for k in np.flatnonzero(np.abs(y) < tol)]
    tx, ty = traction
    neumann = []
    right = np.flatnonzero(np.abs(x - L) < tol)
    right = right[np.argsort(y[right])]
    for a, b in zip(right[:-1], right[1:]):
        neumann.append((a, b, (tx * (0.5 + 0.5 * y[a] / L), 0.0), (tx * (0.5 + 0.5 * y[b] / L), 0.0)))
    top = np.flatnonzero(np.abs(y - L) < tol)
    top = top[np.argsort(x[top])]
    for a, b in zip(top[:-1], top[1:]):
        neumann.append((a, b, (0.0, ty * (0.5 + 0.5 * x[a] / L)), (0.0, ty * (0.5 + 0.5 * x[b] / L))))
    return mesh, BoundaryConditions(dirichlet, neumann, load_schedule)


def _inv_T(F):
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    G = np.empty_like(F)
    G[..., 0, 0] = F[..., 1, 1]
    G[..., 0, 1] = -F[..., 1, 0]
    G[..., 1, 0] = -F[..., 0, 1]
    G[..., 1, 1] = F[..., 0, 0]
    return G / det[..., None, None], det


def material_state(F, fiber):
    """Invariants (I1, I4) of in-plane F (..., 2, 2) with unit fiber (..., 2)."""
    F = np.asarray(F, dtype=float)
    _, det = _inv_T(F)
    if np.any(~(det > 0)):
        raise DomainError("deformation gradient must have positive determinant")
    FM = np.einsum("...ij,...j->...i", F, fiber)
    return np.einsum("...ij,...ij->...", F, F) + det**-2, np.einsum("...i,...i->...", FM, FM)


def element_stress_tangent(F, material, fiber_angle=0.0, element=None):
    """First-PK stress (..., 2, 2) and tangent dP_iJ/dF_kL (..., 2, 2, 2, 2).

    The stress is P = W1*dI1/dF + W4*dI4/dF; with I1 including the
    thickness stretch this is identical to the pressure-eliminated form.
    """
    F = np.asarray(F, dtype=float)
    ang = np.asarray(fiber_angle, dtype=float)
    M = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    M = np.broadcast_to(M, F.shape[:-1])
    G, det = _inv_T(F)
    if np.any(~(det > 0)):
        raise DomainError("deformation gradient must have positive determinant")
    I1, I4 = material_state(F, M)
    d = material.derivs(I1, I4, element=element) if _takes_element(material) else material.derivs(I1, I4)
    Jm2 = (det**-2)[..., None, None]
    MM = M[..., :, None] * M[..., None, :]
    g1 = 2.0 * F - 2.0 * Jm2 * G
    g4 = 2.0 * F @ MM
    W1 = np.asarray(d.W1)[..., None, None]
    W4 = np.asarray(d.W4)[..., None, None]
    P = W1 * g1 + W4 * g4

    e = lambda a, b: np.einsum("...ij,...kl->...ijkl", a, b)
    I2 = np.eye(2)
    dg1 = (
        2.0 * np.einsum("ik,jl->ijkl", I2, I2)
        + 4.0 * Jm2[..., None, None] * e(G, G)
        + 2.0 * Jm2[..., None, None] * np.einsum("...il,...kj->...ijkl", G, G)
    )
    dg4 = 2.0 * np.einsum("ik,...jl->...ijkl", I2, MM)
    s = lambda x: np.asarray(x)[..., None, None, None, None]
    A = (
        s(d.W11) * e(g1, g1)
        + s(d.W14) * (e(g1, g4) + e(g4, g1))
        + s(d.W44) * e(g4, g4)
        + s(d.W1) * dg1
        + s(d.W4) * dg4
    )
    return P, A


def _takes_element(material):
    import inspect

    try:
        return "element" in inspect.signature(material.derivs).parameters
    except (TypeError, ValueError):
        return False


def von_mises(cauchy):
    """Plane-stress von Mises stress of (..., 2, 2) Cauchy tensors."""
    s = np.asarray(cauchy, dtype=float)
    sxx, syy, sxy = s[..., 0, 0], s[..., 1, 1], 0.5 * (s[..., 0, 1] + s[..., 1, 0])
    return np.sqrt(np.maximum(sxx**2 - sxx * syy + syy**2 + 3.0 * sxy**2, 0.0))


class _Assembler:
    def __init__(self, mesh):
        self.mesh = mesh
        self.G, self.detJ = mesh.shape_gradients()
        self.wdet = self.detJ * mesh.thickness  # unit Gauss weights
        dofs = np.stack([2 * mesh.quads, 2 * mesh.quads + 1], axis=-1).reshape(len(mesh.quads), 8)
        self.dofs = dofs
        self.rows = np.repeat(dofs, 8, axis=1).ravel()
        self.cols = np.tile(dofs, (1, 8)).ravel()
        self.angle = np.repeat(mesh.fiber_angle[:, None], 4, axis=1)
        self.element = np.repeat(np.arange(len(mesh.quads))[:, None], 4, axis=1)

    def deformation(self, u):
        ue = u.reshape(-1, 2)[self.mesh.quads]  # E, a, i
        return np.eye(2) + np.einsum("eai,egaJ->egiJ", ue, self.G)

    def evaluate(self, u, material, tangent=True):
        F = self.deformation(u)
        P, A = element_stress_tangent(F, material, self.angle, element=self.element)
        fe = np.einsum("eg,egiJ,egaJ->eai", self.wdet, P, self.G).reshape(-1, 8)
        f = np.zeros(self.mesh.n_dof)
        np.add.at(f, self.dofs.ravel(), fe.ravel())  # fixed element order
        if not tangent:
            return f, None, F, P
        Ke = np.einsum("eg,egaJ,egiJkL,egbL->eaibk", self.wdet, self.G, A, self.G).reshape(-1, 64)
        K = scipy.sparse.coo_matrix((Ke.ravel(), (self.rows, self.cols)), shape=(self.mesh.n_dof,) * 2).tocsr()
        return f, K, F, P


def _cauchy(F, P):
    # incompressible: sigma = P F^T (J_3d = 1)
    s = P @ np.swapaxes(F, -1, -2)
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def solve_static(mesh, bcs, material, snapshots=None, tol=1e-8, max_iter=30, max_backtracks=12, atol=1e-12):
    """Incremental Newton solve with backtracking line search.

    Converges when the free-dof residual infinity norm falls below
    ``tol`` times the characteristic force max(|f_ext|, |f_int|), or below
    ``atol`` (mN) for loads so small that the relative test sits at
    round-off. Results at
    load factors in ``snapshots`` (each must appear in the load schedule, or
    be 0) are stored in ``FEResult.snapshots``.
    """
    bcs.validate(mesh)
    asm = _Assembler(mesh)
    n = mesh.n_dof
    ddofs, dvals = bcs.dirichlet_dofs()
    free = np.setdiff1d(np.arange(n), ddofs)
    f1 = bcs.external_force(mesh)
    snapshots = () if snapshots is None else tuple(float(s) for s in snapshots)
    schedule = tuple(bcs.load_schedule)
    missing = [s for s in snapshots if s != 0.0 and not np.any(np.isclose(schedule, s, rtol=0, atol=1e-12))]
    if missing:
        raise ContractError(f"snapshot load factors {missing} are not in the load schedule")
    u = np.zeros(n)
    log, snaps = [], {}

    def record(lf, u):
        f, _, F, P = asm.evaluate(u, material, tangent=False)
        vm = von_mises(_cauchy(F, P).mean(axis=1))
        snaps[lf] = {"u": u.copy(), "von_mises": vm}

    if 0.0 in snapshots:
        record(0.0, u)
    for lf in schedule:
        fext = lf * f1
        u[ddofs] = lf * dvals
        residuals = []
        for it in range(max_iter + 1):
            f, K, _, _ = asm.evaluate(u, material)
            r = f - fext
            char = max(np.max(np.abs(fext)), np.max(np.abs(f)), 1e-300)
            rn = np.max(np.abs(r[free])) if free.size else 0.0
            residuals.append(float(rn))
            if rn <= max(tol * char, atol):
                break
            if it == max_iter:
                raise ConvergenceError(f"Newton failed at load factor {lf} (residual {rn:.3e})", residuals)
            Kff = K[free][:, free]
            try:
                du = scipy.sparse.linalg.spsolve(Kff.tocsc(), -r[free])
            except RuntimeError as exc:
                raise NumericalError(f"singular tangent at load factor {lf}") from exc
            if not np.all(np.isfinite(du)):
                raise ConvergenceError(f"non-finite Newton update at load factor {lf}", residuals)
            r0 = np.linalg.norm(r[free])
            alpha, accepted, last_exc = 1.0, False, None
            for _ in range(max_backtracks):
                trial = u.copy()
                trial[free] += alpha * du
                try:
                    ft, _, _, _ = asm.evaluate(trial, material, tangent=False)
                except (ExtrapolationError, DomainError) as exc:
                    last_exc = exc
                    alpha *= 0.5
                    continue
                if np.linalg.norm((ft - fext)[free]) <= (1.0 - 1e-4 * alpha) * r0:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                if isinstance(last_exc, ExtrapolationError):
                    raise last_exc
                raise ConvergenceError(f"line search stalled at load factor {lf}", residuals)
            u = trial
        log.append({"load_factor": lf, "iterations": len(residuals) - 1, "residuals": residuals})
        for s in snapshots:
            if s != 0.0 and np.isclose(lf, s, rtol=0, atol=1e-12):
                record(s, u)
    f, _, F, P = asm.evaluate(u, material, tangent=False)
    cauchy = _cauchy(F, P)
    reactions = np.zeros(n)
    reactions[ddofs] = f[ddofs]
    return FEResult(u, cauchy, von_mises(cauchy.mean(axis=1)), reactions, snaps, log)


def save_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj.to_dict(), fh)


def load_mesh(path):
    with open(path, encoding="utf-8") as fh:
        return Mesh.from_dict(json.load(fh))


def load_bcs(path):
    with open(path, encoding="utf-8") as fh:
        return BoundaryConditions.from_dict(json.load(fh))
