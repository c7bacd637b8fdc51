"""Observation operators for nudging toward coarse-mesh velocity data.

The interpolant ``I_H`` is continuous piecewise-linear on the coarse lattice.
Because coarse nodes are fine-mesh vertices and P2 vertex coefficients are
point values, sampling a velocity is a pure dof extraction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import ConstrainedSystem, MixedSpace, apply_constraints
from .mesh import ObservationNodeSet

MODES = ("off", "penalty", "direct")


class InconsistentDataError(ValueError):
    """Observed value on the boundary disagrees with the boundary condition."""


def mu_min(nu: float, H: float, c_interp: float = 1.0) -> float:
    """Smallest nudging weight covered by the CDA-Picard contraction estimate."""
    return nu / (4.0 * c_interp**2 * H**2)


@dataclass(frozen=True)
class NudgingConfig:
    mode: str = "off"
    mu: float | None = None
    include_boundary: bool = False
    allow_small_mu: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"nudging mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "penalty" and (self.mu is None or not self.mu > 0):
            raise ValueError("penalty nudging needs mu > 0")

    def check(self, nu: float, H: float) -> bool:
        """Validate ``mu`` against ``mu_min(nu, H)``; return True if below it.

        Below-threshold values raise unless ``allow_small_mu`` is set, in which
        case a warning is emitted and True is returned.
        """
        if self.mode != "penalty":
            return False
        lo = mu_min(nu, H)
        if self.mu >= lo:
            return False
        msg = f"mu={self.mu:g} is below nu/(4 H^2)={lo:g}"
        if not self.allow_small_mu:
            raise ValueError(msg + " (set allow_small_mu to override)")
        warnings.warn(msg, stacklevel=2)
        return True


@dataclass(frozen=True)
class ObservationData:
    """Velocity samples of a reference field at the coarse nodes."""

    nodes: ObservationNodeSet
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.nodes), 2):
            raise ValueError(f"values must have shape ({len(self.nodes)}, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def H(self) -> float:
        return self.nodes.H

    def stacked(self) -> np.ndarray:
        """Values as ``[ux(all nodes), uy(all nodes)]`` matching the sampling rows."""
        return np.concatenate([self.values[:, 0], self.values[:, 1]])

    def to_text(self) -> str:
        lines = [f"H {self.H:.17g}"]
        for idx, (ux, uy) in zip(self.nodes.fine_vertex_indices.tolist(), self.values.tolist()):
            lines.append(f"{idx} {ux:.17g} {uy:.17g}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str, nodes: ObservationNodeSet) -> "ObservationData":
        rows = [ln.split() for ln in text.strip().splitlines()]
        if not rows or rows[0][0] != "H":
            raise ValueError("missing 'H <value>' header")
        H = float(rows[0][1])
        if H != nodes.H:
            raise ValueError(f"file spacing H={H} does not match node set H={nodes.H}")
        idx = np.array([int(r[0]) for r in rows[1:]])
        if not np.array_equal(idx, nodes.fine_vertex_indices):
            raise ValueError("node indices in file do not match the node set")
        values = np.array([[float(r[1]), float(r[2])] for r in rows[1:]])
        return cls(nodes, values)

    @classmethod
    def load(cls, path, nodes: ObservationNodeSet) -> "ObservationData":
        with open(path) as fh:
            return cls.from_text(fh.read(), nodes)


def build_sampling_operator(space: MixedSpace, nodes: ObservationNodeSet) -> sp.csr_matrix:
    """Rows ``[x-component of each node, y-component of each node]``."""
    idx = np.asarray(nodes.fine_vertex_indices)
    if idx.max(initial=-1) >= space.mesh.n_vertices or idx.min(initial=0) < 0:
        raise ValueError("observation node is not a fine-mesh vertex")
    k = len(idx)
    cols = np.concatenate([idx, space.n_nodes + idx])
    return sp.csr_matrix((np.ones(2 * k), (np.arange(2 * k), cols)),
                         shape=(2 * k, space.velocity_dof_count))


def sample(space: MixedSpace, nodes: ObservationNodeSet, velocity) -> ObservationData:
    S = build_sampling_operator(space, nodes)
    v = S @ np.asarray(velocity)
    k = len(nodes)
    return ObservationData(nodes, np.column_stack([v[:k], v[k:]]))


def build_coarse_mass(nodes: ObservationNodeSet) -> sp.csr_matrix:
    """Scalar P1 mass matrix on the coarse triangulation."""
    p = nodes.coordinates[nodes.coarse_triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    loc = area[:, None, None] * ref[None]
    tri = nodes.coarse_triangles
    rows = np.repeat(tri[:, :, None], 3, axis=2)
    cols = np.repeat(tri[:, None, :], 3, axis=1)
    k = len(nodes)
    return sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())), shape=(k, k)).tocsr()


def coarse_mass_blocks(M_H) -> sp.csr_matrix:
    return sp.block_diag([M_H, M_H], format="csr")


def nudging_contribution(S, M_H, mu: float, data: ObservationData):
    """Return ``(mu S^T M S, mu S^T M g)`` for the penalty form of nudging.

    ``M_H`` may be the scalar coarse mass (it is then applied per component).
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    M = M_H if M_H.shape[0] == S.shape[0] else coarse_mass_blocks(M_H)
    SM = (S.T @ M).tocsr()
    matrix = (mu * (SM @ S)).tocsr()
    rhs = mu * (SM @ data.stacked())
    return matrix, rhs


def direct_constraints(space: MixedSpace, data: ObservationData, lid_speed: float,
                       include_boundary: bool = False, atol: float = 1e-10):
    """Velocity dofs fixed by direct enforcement and their observed values.

    Boundary observation nodes are skipped; with ``include_boundary`` their
    values are checked against the boundary data (which always wins).
    """
    nodes = data.nodes
    idx = np.asarray(nodes.fine_vertex_indices)
    on_bnd = np.asarray(nodes.on_boundary)
    if include_boundary and on_bnd.any():
        bdofs, bvals = space.dirichlet_values(lid_speed)
        lookup = dict(zip(bdofs.tolist(), bvals.tolist()))
        for k in np.flatnonzero(on_bnd):
            for c in range(2):
                dof = int(idx[k] + c * space.n_nodes)
                if abs(data.values[k, c] - lookup[dof]) > atol:
                    raise InconsistentDataError(
                        f"observation at vertex {idx[k]} component {c} is {data.values[k, c]!r}, "
                        f"boundary value is {lookup[dof]!r}"
                    )
    keep = ~on_bnd
    dofs = np.concatenate([idx[keep], space.n_nodes + idx[keep]])
    values = np.concatenate([data.values[keep, 0], data.values[keep, 1]])
    return dofs, values


def apply_direct_enforcement(system: ConstrainedSystem, space: MixedSpace, data: ObservationData,
                             lid_speed: float = 1.0, include_boundary: bool = False) -> ConstrainedSystem:
    """Add observation constraints to an already boundary-constrained system."""
    dofs, values = direct_constraints(space, data, lid_speed, include_boundary)
    new = ~np.isin(dofs, system.dofs)
    out = apply_constraints(system.matrix, system.rhs, dofs[new], values[new])
    all_dofs = np.concatenate([system.dofs, dofs[new]])
    all_vals = np.concatenate([system.values, values[new]])
    order = np.argsort(all_dofs, kind="stable")
    return ConstrainedSystem(out.matrix, out.rhs, all_dofs[order], all_vals[order], out.free & system.free)


def coarse_prolongation(space: MixedSpace, nodes: ObservationNodeSet) -> sp.csr_matrix:
    """Scalar map from coarse nodal values to fine P2 nodal values of ``I_H v``.

    The coarse P1 interpolant is linear on every fine triangle, so its P2
    coefficients are its values at the fine P2 nodes.
    """
    n_H = nodes.n_H
    H = nodes.H
    xy = space.node_coordinates
    i = np.minimum(np.floor(xy[:, 0] * n_H + 1e-12).astype(int), n_H - 1)
    j = np.minimum(np.floor(xy[:, 1] * n_H + 1e-12).astype(int), n_H - 1)
    s = xy[:, 0] / H - i
    t = xy[:, 1] / H - j
    a = j * (n_H + 1) + i
    b, c, d = a + 1, a + n_H + 2, a + n_H + 1
    lower = s >= t  # cell split along s == t
    rows = np.repeat(np.arange(len(xy)), 3)
    cols = np.where(lower[:, None], np.column_stack([a, b, c]), np.column_stack([a, c, d]))
    w = np.where(lower[:, None], np.column_stack([1 - s, s - t, t]), np.column_stack([1 - t, s, t - s]))
    P = sp.coo_matrix((w.ravel(), (rows, cols.ravel())), shape=(len(xy), len(nodes))).tocsr()
    P.eliminate_zeros()
    return P
