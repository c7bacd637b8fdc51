"""Taylor-Hood (P2/P1) spaces and operator assembly on a triangulated square.

Velocity unknowns are ordered ``[ux(nodes), uy(nodes)]`` where the P2 nodes are
the mesh vertices followed by the edge midpoints.  Pressure unknowns are the
vertex values.  A full state vector is ``[velocity, pressure]``.

The convection operator uses the skew-symmetric form

    b(u, w, v) = 1/2 ((u.grad) w, v) - 1/2 ((u.grad) v, w)

so that ``b(u, v, v) == 0`` holds discretely for any ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import INTERIOR, LID, Mesh

# 7-point degree-5 rule on the reference triangle, barycentric points,
# weights normalized to sum to one.
_S15 = np.sqrt(15.0)
_A1 = (6.0 - _S15) / 21.0
_A2 = (6.0 + _S15) / 21.0
_W1 = (155.0 - _S15) / 1200.0
_W2 = (155.0 + _S15) / 1200.0
QUAD_POINTS = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _A1, 1 - 2 * _A1],
        [_A1, 1 - 2 * _A1, _A1],
        [1 - 2 * _A1, _A1, _A1],
        [_A2, _A2, 1 - 2 * _A2],
        [_A2, 1 - 2 * _A2, _A2],
        [1 - 2 * _A2, _A2, _A2],
    ]
)
QUAD_WEIGHTS = np.array([9 / 40, _W1, _W1, _W1, _W2, _W2, _W2])

# local P2 nodes: vertices 0,1,2 then midpoints of (0,1), (1,2), (2,0)
_MID = ((0, 1), (1, 2), (2, 0))


def p2_values(lam):
    """P2 shape functions at barycentric points ``lam`` (..., 3) -> (..., 6)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ],
        axis=-1,
    )


def p2_barycentric_derivatives(lam):
    """d(phi_i)/d(lambda_a) at ``lam`` (..., 3) -> (..., 6, 3)."""
    out = np.zeros(lam.shape[:-1] + (6, 3))
    for a in range(3):
        out[..., a, a] = 4 * lam[..., a] - 1
    for k, (a, b) in enumerate(_MID):
        out[..., 3 + k, a] = 4 * lam[..., b]
        out[..., 3 + k, b] = 4 * lam[..., a]
    return out


@dataclass(frozen=True)
class ElementGeometry:
    """Per-element data evaluated at the quadrature points of a rule.

    ``dx[t, q]`` is the quadrature weight times the element area, ``phi[q, i]``
    the P2 values, ``grad[t, q, i, :]`` the physical P2 gradients and
    ``lam[q, a]`` the P1 (barycentric) values.
    """

    area: np.ndarray
    grad_lambda: np.ndarray
    dx: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    points: np.ndarray


def element_geometry(mesh: Mesh, points=QUAD_POINTS, weights=QUAD_WEIGHTS) -> ElementGeometry:
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    # rows of the inverse Jacobian are grad(lambda1), grad(lambda2)
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    g0 = -g1 - g2
    grad_lambda = np.stack([g0, g1, g2], axis=1)  # (T, 3, 2)

    lam = np.asarray(points, dtype=float)
    phi = p2_values(lam)
    dphi = p2_barycentric_derivatives(lam)  # (Q, 6, 3)
    grad = np.einsum("qia,tad->tqid", dphi, grad_lambda)
    dx = area[:, None] * np.asarray(weights)[None, :]
    xq = np.einsum("qa,tad->tqd", lam, p)
    return ElementGeometry(area, grad_lambda, dx, lam, phi, grad, xq)


def _scatter(rows, cols, vals, shape):
    m = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    return m.tocsr()


class MixedSpace:
    """Taylor-Hood P2 velocity / P1 pressure degrees of freedom over a mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.n_nodes = mesh.n_vertices + mesh.n_edges
        self.velocity_dof_count = 2 * self.n_nodes
        self.pressure_dof_count = mesh.n_vertices
        self.n_dofs = self.velocity_dof_count + self.pressure_dof_count
        dofs = np.empty((mesh.n_triangles, 6), dtype=np.int64)
        dofs[:, :3] = mesh.triangles
        dofs[:, 3:] = mesh.n_vertices + mesh.tri_edges
        dofs.setflags(write=False)
        self.element_dofs = dofs

        tags = np.concatenate([mesh.vertex_tags, mesh.edge_tags])
        boundary_nodes = np.flatnonzero(tags != INTERIOR)
        self.node_tags = tags
        self.node_coordinates = np.vstack([mesh.vertices, mesh.edge_midpoints()])
        self.boundary_nodes = boundary_nodes
        self.lid_nodes = np.flatnonzero(tags == LID)

    @cached_property
    def geometry(self) -> ElementGeometry:
        return element_geometry(self.mesh)

    @property
    def constrained_velocity_dofs(self) -> np.ndarray:
        return np.concatenate([self.boundary_nodes, self.n_nodes + self.boundary_nodes])

    def dirichlet_values(self, lid_speed: float):
        """Constrained velocity dofs and their values for the driven cavity."""
        dofs = self.constrained_velocity_dofs
        values = np.zeros(len(dofs))
        values[: len(self.boundary_nodes)][self.node_tags[self.boundary_nodes] == LID] = lid_speed
        return dofs, values

    def interpolate(self, fun) -> np.ndarray:
        """Nodal P2 interpolant of ``fun(x, y) -> (ux, uy)`` as a velocity vector."""
        x, y = self.node_coordinates[:, 0], self.node_coordinates[:, 1]
        ux, uy = fun(x, y)
        out = np.empty(self.velocity_dof_count)
        out[: self.n_nodes] = ux
        out[self.n_nodes :] = uy
        return out

    def split(self, velocity):
        return velocity[: self.n_nodes], velocity[self.n_nodes :]

    def zero_state(self) -> "State":
        return State(np.zeros(self.velocity_dof_count), np.zeros(self.pressure_dof_count))

    def __repr__(self):
        return f"MixedSpace(n={self.mesh.n}, velocity={self.velocity_dof_count}, pressure={self.pressure_dof_count})"


@dataclass(frozen=True)
class State:
    velocity: np.ndarray
    pressure: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.velocity)) and np.all(np.isfinite(self.pressure))):
            raise ValueError("state contains non-finite entries")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.pressure])

    @classmethod
    def from_vector(cls, space: MixedSpace, x) -> "State":
        nv = space.velocity_dof_count
        return cls(np.array(x[:nv]), np.array(x[nv:]))


@dataclass(frozen=True)
class LinearBlocks:
    """Parameter-independent operators of the Stokes part of the problem.

    ``A = nu*K1`` (velocity), ``B`` (pressure rows x velocity columns) holds
    ``-(q, div v)``, ``Mv`` / ``Mp`` are mass matrices and ``K1`` the unscaled
    vector stiffness.
    """

    nu: float
    A: sp.csr_matrix
    B: sp.csr_matrix
    Mv: sp.csr_matrix
    Mp: sp.csr_matrix
    K1: sp.csr_matrix


def _scalar_matrices(space: MixedSpace, geo: ElementGeometry):
    dofs = space.element_dofs
    nn = space.n_nodes
    rows = np.repeat(dofs[:, :, None], 6, axis=2)
    cols = np.repeat(dofs[:, None, :], 6, axis=1)
    k_loc = np.einsum("tq,tqid,tqjd->tij", geo.dx, geo.grad, geo.grad)
    m_loc = np.einsum("tq,qi,qj->tij", geo.dx, geo.phi, geo.phi)
    return _scatter(rows, cols, k_loc, (nn, nn)), _scatter(rows, cols, m_loc, (nn, nn))


def assemble_linear_blocks(space: MixedSpace, nu: float) -> LinearBlocks:
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    geo = space.geometry
    mesh = space.mesh
    nn = space.n_nodes
    K, M = _scalar_matrices(space, geo)
    K1 = sp.block_diag([K, K], format="csr")
    Mv = sp.block_diag([M, M], format="csr")

    tris = mesh.triangles
    prow = np.repeat(tris[:, :, None], 6, axis=2)
    vcol = np.repeat(space.element_dofs[:, None, :], 3, axis=1)
    bx = -np.einsum("tq,qa,tqj->taj", geo.dx, geo.lam, geo.grad[..., 0])
    by = -np.einsum("tq,qa,tqj->taj", geo.dx, geo.lam, geo.grad[..., 1])
    shape = (space.pressure_dof_count, space.velocity_dof_count)
    B = _scatter(
        np.concatenate([prow, prow], axis=2),
        np.concatenate([vcol, vcol + nn], axis=2),
        np.concatenate([bx, by], axis=2),
        shape,
    )

    prow3 = np.repeat(tris[:, :, None], 3, axis=2)
    pcol3 = np.repeat(tris[:, None, :], 3, axis=1)
    mp_loc = np.einsum("tq,qa,qb->tab", geo.dx, geo.lam, geo.lam)
    Mp = _scatter(prow3, pcol3, mp_loc, (mesh.n_vertices,) * 2)
    return LinearBlocks(nu=nu, A=(nu * K1).tocsr(), B=B, Mv=Mv, Mp=Mp, K1=K1)


def _values_at_quad(space, geo, scalar_coeffs):
    c = scalar_coeffs[space.element_dofs]  # (T, 6)
    val = np.einsum("qi,ti->tq", geo.phi, c)
    grad = np.einsum("tqid,ti->tqd", geo.grad, c)
    return val, grad


def assemble_convection(space: MixedSpace, w, mode: str = "picard", geometry=None) -> sp.csr_matrix:
    """Matrix of the skew-symmetric convection form linearized about ``w``.

    ``mode="picard"`` gives ``N[i, j] = b(w, phi_j, phi_i)``;
    ``mode="newton_extra"`` gives ``N'[i, j] = b(phi_j, w, phi_i)``.
    ``w`` is a velocity vector or a :class:`State`.
    """
    if isinstance(w, State):
        w = w.velocity
    w = np.asarray(w, dtype=float)
    if w.shape != (space.velocity_dof_count,):
        raise ValueError(f"velocity has shape {w.shape}, expected ({space.velocity_dof_count},)")
    geo = geometry if geometry is not None else space.geometry
    nn = space.n_nodes
    dofs = space.element_dofs
    wx, wy = space.split(w)
    wxq, gwx = _values_at_quad(space, geo, wx)
    wyq, gwy = _values_at_quad(space, geo, wy)
    W = np.stack([wxq, wyq], axis=-1)  # (T, Q, 2)
    rows = np.repeat(dofs[:, :, None], 6, axis=2)
    cols = np.repeat(dofs[:, None, :], 6, axis=1)
    shape = (space.velocity_dof_count,) * 2

    if mode == "picard":
        adv = np.einsum("tqd,tqjd->tqj", W, geo.grad)  # (w.grad) phi_j
        half = 0.5 * np.einsum("tq,tqj,qi->tij", geo.dx, adv, geo.phi)
        loc = half - half.transpose(0, 2, 1)
        C = _scatter(rows, cols, loc, (nn, nn))
        return sp.block_diag([C, C], format="csr")
    if mode == "newton_extra":
        # block (c, d): 1/2 (phi_j d_d w_c, phi_i) - 1/2 (phi_j w_c, d_d phi_i)
        gw = (gwx, gwy)
        blocks_r, blocks_c, blocks_v = [], [], []
        mass_like = np.einsum("qi,qj->qij", geo.phi, geo.phi)
        for c in range(2):
            for d in range(2):
                t1 = np.einsum("tq,tq,qij->tij", geo.dx, gw[c][..., d], mass_like)
                t2 = np.einsum("tq,tq,tqi,qj->tij", geo.dx, W[..., c], geo.grad[..., d], geo.phi)
                blocks_r.append(rows + c * nn)
                blocks_c.append(cols + d * nn)
                blocks_v.append(0.5 * (t1 - t2))
        return _scatter(np.stack(blocks_r), np.stack(blocks_c), np.stack(blocks_v), shape)
    raise ValueError(f"unknown convection mode {mode!r}")


def assemble_load(space: MixedSpace, fun) -> np.ndarray:
    """Velocity load vector ``(f, phi_i)`` for ``fun(x, y) -> (fx, fy)``."""
    geo = space.geometry
    x, y = geo.points[..., 0], geo.points[..., 1]
    fx, fy = fun(x, y)
    out = np.zeros(space.velocity_dof_count)
    dofs = space.element_dofs
    for c, fc in enumerate((fx, fy)):
        loc = np.einsum("tq,tq,qi->ti", geo.dx, np.broadcast_to(fc, x.shape), geo.phi)
        np.add.at(out, dofs + c * space.n_nodes, loc)
    return out


def saddle_matrix(blocks: LinearBlocks, velocity_block) -> sp.csr_matrix:
    return sp.bmat([[velocity_block, blocks.B.T], [blocks.B, None]], format="csr")


@dataclass
class ConstrainedSystem:
    """Square system with constrained rows/columns replaced by identity."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofs: np.ndarray
    values: np.ndarray
    free: np.ndarray = field(repr=False)


def apply_constraints(matrix, rhs, dofs, values) -> ConstrainedSystem:
    """Symmetric elimination of ``x[dofs] = values`` from ``matrix x = rhs``."""
    matrix = sp.csr_matrix(matrix)
    n = matrix.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    xc = np.zeros(n)
    xc[dofs] = values
    free = np.ones(n, dtype=bool)
    free[dofs] = False
    Df = sp.diags(free.astype(float))
    Dc = sp.diags((~free).astype(float))
    K = (Df @ matrix @ Df + Dc).tocsr()
    K.eliminate_zeros()
    b = np.where(free, np.asarray(rhs, dtype=float) - matrix @ xc, xc)
    return ConstrainedSystem(K, b, dofs, values, free)


def apply_dirichlet(matrix, rhs, space: MixedSpace, lid_speed: float,
                    extra_dofs=None, extra_values=None) -> ConstrainedSystem:
    """Impose cavity boundary values and pin pressure dof 0 to zero.

    ``extra_dofs``/``extra_values`` are appended to the constraint set (used
    for direct enforcement of observations).
    """
    dofs, values = space.dirichlet_values(lid_speed)
    dofs = [dofs, [space.velocity_dof_count]]
    values = [values, [0.0]]
    if extra_dofs is not None and len(extra_dofs):
        dofs.append(extra_dofs)
        values.append(extra_values)
    return apply_constraints(matrix, rhs, np.concatenate(dofs), np.concatenate(values))


def zero_mean_pressure(blocks: LinearBlocks, pressure) -> np.ndarray:
    ones = np.ones(len(pressure))
    mean = ones @ (blocks.Mp @ pressure) / (ones @ (blocks.Mp @ ones))
    return pressure - mean


def free_velocity_mask(space: MixedSpace) -> np.ndarray:
    mask = np.ones(space.velocity_dof_count, dtype=bool)
    mask[space.constrained_velocity_dofs] = False
    return mask


def nonlinear_residual(space: MixedSpace, blocks: LinearBlocks, s: State, lid_speed: float,
                       forcing=None, N=None) -> float:
    """Euclidean norm of the algebraic residual of the discrete steady NSE.

    Momentum rows of constrained (boundary) velocity dofs are replaced by the
    boundary-value mismatch, and all divergence rows are included.
    """
    u, p = s.velocity, s.pressure
    f = np.zeros_like(u) if forcing is None else forcing
    if N is None:
        N = assemble_convection(space, u, "picard")
    mom = blocks.A @ u + N @ u + blocks.B.T @ p - f
    dofs, values = space.dirichlet_values(lid_speed)
    mom[dofs] = u[dofs] - values
    div = blocks.B @ u
    return float(np.sqrt(mom @ mom + div @ div))


def restrict(matrix, mask):
    idx = np.flatnonzero(mask)
    return sp.csr_matrix(matrix)[idx][:, idx]


def discrete_dual_norm(f, K1) -> float:
    """``sqrt(f^T K1^{-1} f)`` for ``f`` and ``K1`` already restricted to free dofs."""
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        return 0.0
    try:
        lu = spla.splu(sp.csc_matrix(K1))
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"stiffness is singular on the free dofs: {exc}") from exc
    g = lu.solve(f)
    return float(np.sqrt(max(f @ g, 0.0)))
