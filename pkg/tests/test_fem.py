import dataclasses
import math

import numpy as np
import pytest
import scipy.sparse as sp
import sympy as sy
from hypothesis import given, settings, strategies as st

from cdanse.fem import (
    QUAD_POINTS,
    QUAD_WEIGHTS,
    MixedSpace,
    State,
    apply_constraints,
    apply_dirichlet,
    assemble_convection,
    assemble_linear_blocks,
    assemble_load,
    discrete_dual_norm,
    free_velocity_mask,
    restrict,
    saddle_matrix,
)
from cdanse.linsolve import linear_solve
from cdanse.mesh import build_uniform_triangulation
from cdanse.solvers import SolverConfig, solve_nonlinear


# -- independent oracle: monomial P2 basis + collapsed Gauss-Legendre rule ----

def _duffy_rule(order=8):
    g, w = np.polynomial.legendre.leggauss(order)
    g, w = 0.5 * (g + 1), 0.5 * w
    u, v = np.meshgrid(g, g, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    x = u * (1 - v)
    y = v
    return np.column_stack([x.ravel(), y.ravel()]), (wu * wv * (1 - v)).ravel()


REF_PTS, REF_WTS = _duffy_rule()


class OracleElement:
    """P2 basis on one physical triangle built from monomials."""

    def __init__(self, xy):
        self.xy = np.asarray(xy, float)
        mids = [(self.xy[0] + self.xy[1]) / 2, (self.xy[1] + self.xy[2]) / 2, (self.xy[2] + self.xy[0]) / 2]
        nodes = np.vstack([self.xy, mids])
        V = np.array([self._mono(x, y) for x, y in nodes])
        self.C = np.linalg.inv(V)  # column i: coefficients of basis i
        e1, e2 = self.xy[1] - self.xy[0], self.xy[2] - self.xy[0]
        self.jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
        self.pts = self.xy[0] + REF_PTS[:, :1] * e1 + REF_PTS[:, 1:] * e2
        self.wts = REF_WTS * self.jac
        x, y = self.pts.T
        mono = np.array([self._mono(a, b) for a, b in zip(x, y)])
        dx = np.array([[0, 1, 0, 2 * a, b, 0] for a, b in zip(x, y)])
        dy = np.array([[0, 0, 1, 0, a, 2 * b] for a, b in zip(x, y)])
        self.phi = mono @ self.C
        self.dphi = np.stack([dx @ self.C, dy @ self.C], axis=-1)  # (Q, 6, 2)
        P1 = np.linalg.inv(np.column_stack([np.ones(3), self.xy]))
        self.psi = np.column_stack([np.ones(len(x)), x, y]) @ P1

    @staticmethod
    def _mono(x, y):
        return np.array([1.0, x, y, x * x, x * y, y * y])


def oracle_assembly(space, w):
    nn, nv = space.n_nodes, space.velocity_dof_count
    K = np.zeros((nn, nn))
    M = np.zeros((nn, nn))
    B = np.zeros((space.pressure_dof_count, nv))
    N = np.zeros((nv, nv))
    Nx = np.zeros((nv, nv))
    for tri, dofs in zip(space.mesh.triangles, space.element_dofs):
        el = OracleElement(space.mesh.vertices[tri])
        W = np.stack([el.phi @ w[dofs], el.phi @ w[dofs + nn]], axis=-1)
        gW = np.stack([np.einsum("qjd,j->qd", el.dphi, w[dofs]), np.einsum("qjd,j->qd", el.dphi, w[dofs + nn])], 1)
        K[np.ix_(dofs, dofs)] += np.einsum("q,qid,qjd->ij", el.wts, el.dphi, el.dphi)
        M[np.ix_(dofs, dofs)] += np.einsum("q,qi,qj->ij", el.wts, el.phi, el.phi)
        for c in range(2):
            B[np.ix_(tri, dofs + c * nn)] -= np.einsum("q,qa,qj->aj", el.wts, el.psi, el.dphi[..., c])
        adv = np.einsum("qd,qjd->qj", W, el.dphi)
        loc = 0.5 * np.einsum("q,qj,qi->ij", el.wts, adv, el.phi)
        loc = loc - loc.T
        for c in range(2):
            N[np.ix_(dofs + c * nn, dofs + c * nn)] += loc
            for d in range(2):
                t1 = np.einsum("q,q,qi,qj->ij", el.wts, gW[:, c, d], el.phi, el.phi)
                t2 = np.einsum("q,q,qi,qj->ij", el.wts, W[:, c], el.dphi[:, :, d], el.phi)
                Nx[np.ix_(dofs + c * nn, dofs + d * nn)] += 0.5 * (t1 - t2)
    return K, M, B, N, Nx


def test_quadrature_exact_to_degree_five():
    x, y = QUAD_POINTS[:, 1], QUAD_POINTS[:, 2]
    assert abs(QUAD_WEIGHTS.sum() - 1) < 1e-15
    for a in range(6):
        for b in range(6 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert abs(0.5 * QUAD_WEIGHTS @ (x**a * y**b) - exact) < 1e-15


@pytest.mark.parametrize("n", [1, 2])
def test_operators_match_oracle(n):
    space = MixedSpace(build_uniform_triangulation(n))
    rng = np.random.default_rng(n)
    w = rng.standard_normal(space.velocity_dof_count)
    K, M, B, N, Nx = oracle_assembly(space, w)
    blocks = assemble_linear_blocks(space, 1.0)
    nn = space.n_nodes
    np.testing.assert_allclose(blocks.K1[:nn, :nn].toarray(), K, atol=1e-12)
    np.testing.assert_allclose(blocks.Mv[:nn, :nn].toarray(), M, atol=1e-14)
    np.testing.assert_allclose(blocks.B.toarray(), B, atol=1e-13)
    np.testing.assert_allclose(assemble_convection(space, w).toarray(), N, atol=1e-12)
    np.testing.assert_allclose(assemble_convection(space, w, "newton_extra").toarray(), Nx, atol=1e-12)


def test_mass_and_pressure_mass_totals(space8):
    blocks = assemble_linear_blocks(space8, 0.5)
    one = np.ones(space8.n_nodes)
    assert abs(one @ (blocks.Mv[: space8.n_nodes, : space8.n_nodes] @ one) - 1) < 1e-13
    one_p = np.ones(space8.pressure_dof_count)
    assert abs(one_p @ (blocks.Mp @ one_p) - 1) < 1e-13
    # constants have no gradient, and A scales with nu
    assert np.abs(blocks.K1[: space8.n_nodes, : space8.n_nodes] @ one).max() < 1e-12
    assert abs(blocks.A - 0.5 * blocks.K1).max() == 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_convection_skew_symmetric(seed):
    space = _SPACE4
    rng = np.random.default_rng(seed)
    w, v = rng.standard_normal((2, space.velocity_dof_count))
    N = assemble_convection(space, w)
    assert abs(v @ (N @ v)) <= 1e-12 * (v @ v) * np.abs(w).max()
    assert abs(N + N.T).max() < 1e-13


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_newton_term_is_derivative_partner(seed):
    # sum_j b(phi_j, w, phi_i) v_j == b(v, w, phi_i)
    space = _SPACE4
    rng = np.random.default_rng(seed)
    w, v = rng.standard_normal((2, space.velocity_dof_count))
    lhs = assemble_convection(space, w, "newton_extra") @ v
    rhs = assemble_convection(space, v, "picard") @ w
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(rhs).max())


_SPACE4 = MixedSpace(build_uniform_triangulation(4))


def test_convection_input_validation(space8):
    with pytest.raises(ValueError):
        assemble_convection(space8, np.zeros(3))
    with pytest.raises(ValueError):
        assemble_convection(space8, np.zeros(space8.velocity_dof_count), "oseen")
    assert assemble_convection(space8, space8.zero_state()).nnz == 0 or \
        abs(assemble_convection(space8, space8.zero_state())).max() == 0


def test_assembly_deterministic_and_order_independent():
    mesh = build_uniform_triangulation(6)
    space = MixedSpace(mesh)
    w = np.random.default_rng(0).standard_normal(space.velocity_dof_count)
    a = assemble_convection(space, w)
    b = assemble_convection(MixedSpace(mesh), w)
    assert (a != b).nnz == 0
    perm = np.random.default_rng(1).permutation(mesh.n_triangles)
    shuffled = dataclasses.replace(mesh, triangles=mesh.triangles[perm], tri_edges=mesh.tri_edges[perm])
    sp2 = MixedSpace(shuffled)
    assert abs(assemble_convection(sp2, w) - a).max() < 1e-13
    assert abs(assemble_linear_blocks(sp2, 1.0).K1 - assemble_linear_blocks(space, 1.0).K1).max() < 1e-13


def test_constraints_symmetric_and_exact():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((6, 6))
    A = A + A.T + 12 * np.eye(6)
    x = rng.standard_normal(6)
    b = A @ x
    cs = apply_constraints(A, b, [1, 4], x[[1, 4]])
    assert abs(cs.matrix - cs.matrix.T).max() == 0
    np.testing.assert_allclose(np.linalg.solve(cs.matrix.toarray(), cs.rhs), x, rtol=1e-12)
    assert list(np.flatnonzero(~cs.free)) == [1, 4]


def test_state_validation(space8):
    nv, npr = space8.velocity_dof_count, space8.pressure_dof_count
    with pytest.raises(ValueError):
        State(np.full(nv, np.nan), np.zeros(npr))
    x = np.arange(space8.n_dofs, dtype=float)
    s = State.from_vector(space8, x)
    assert np.array_equal(s.vector(), x)


# -- manufactured Stokes solution ---------------------------------------------

def _manufactured():
    x, y = sy.symbols("x y")
    psi = x**2 * (1 - x) ** 2 * y**2 * (1 - y) ** 2
    u = (sy.diff(psi, y), -sy.diff(psi, x))
    p = sy.sin(sy.pi * x) * sy.cos(sy.pi * y)
    f = tuple(-sy.diff(c, x, 2) - sy.diff(c, y, 2) for c in u)
    f = (f[0] + sy.diff(p, x), f[1] + sy.diff(p, y))
    grads = [sy.diff(c, v) for c in u for v in (x, y)]
    lam = lambda e: sy.lambdify((x, y), e, "numpy")  # noqa: E731
    fx, fy = lam(f[0]), lam(f[1])
    return (lambda X, Y: (fx(X, Y), fy(X, Y))), [lam(g) for g in grads], (lam(u[0]), lam(u[1]))


def _stokes_h1_error(n, mms):
    load, grads, _ = mms
    space = MixedSpace(build_uniform_triangulation(n))
    blocks = assemble_linear_blocks(space, 1.0)
    K = saddle_matrix(blocks, blocks.A)
    rhs = np.concatenate([assemble_load(space, load), np.zeros(space.pressure_dof_count)])
    cs = apply_dirichlet(K, rhs, space, 0.0)
    x = linear_solve(cs.matrix, cs.rhs)
    u = x[: space.velocity_dof_count]
    geo = space.geometry
    X, Y = geo.points[..., 0], geo.points[..., 1]
    err2 = 0.0
    for c, comp in enumerate(space.split(u)):
        gh = np.einsum("tqid,ti->tqd", geo.grad, comp[space.element_dofs])
        for d in range(2):
            ge = np.broadcast_to(grads[2 * c + d](X, Y), X.shape)
            err2 += np.sum(geo.dx * (gh[..., d] - ge) ** 2)
    return math.sqrt(err2), blocks.B @ u


def test_stokes_manufactured_h1_order():
    mms = _manufactured()
    errs = []
    for n in (8, 16, 32):
        e, div = _stokes_h1_error(n, mms)
        assert np.abs(div).max() < 1e-10
        errs.append(e)
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(1.8 <= o <= 2.2 for o in orders), orders


def test_dirichlet_values_lid(space8):
    dofs, vals = space8.dirichlet_values(2.5)
    lid = space8.lid_nodes
    assert np.all(vals[np.isin(dofs, lid)] == 2.5)
    assert np.all(vals[~np.isin(dofs, lid)] == 0)
    assert len(dofs) == 2 * len(space8.boundary_nodes)


# -- stability bounds ---------------------------------------------------------

def _forcing(scale):
    return lambda x, y: (scale * np.sin(2 * np.pi * y) * x, scale * np.cos(np.pi * x) * (1 - y))


def _dual_norm(space, blocks, f):
    free = free_velocity_mask(space)
    return discrete_dual_norm(f[free], restrict(blocks.K1, free))


def test_picard_iterates_obey_energy_bound(space8):
    nu = 0.02
    f = assemble_load(space8, _forcing(40.0))
    blocks = assemble_linear_blocks(space8, nu)
    bound = _dual_norm(space8, blocks, f) / nu
    cfg = SolverConfig(method="picard", nu=nu, lid_speed=0.0, tol=1e-10, max_iters=60)
    tr = solve_nonlinear(space8, cfg, forcing=f, keep_iterates=True)
    assert tr.iterations > 3
    for s in tr.iterates:
        assert math.sqrt(s.velocity @ (blocks.K1 @ s.velocity)) <= bound + 1e-8


def test_newton_iterates_bounded_in_small_data_regime(space8):
    nu = 0.1
    blocks = assemble_linear_blocks(space8, nu)
    K1 = blocks.K1
    rng = np.random.default_rng(7)
    free = free_velocity_mask(space8)
    # measured lower estimate of the trilinear-form constant
    M_hat = 0.0
    for _ in range(60):
        u, v, w = (np.where(free, rng.standard_normal(len(free)), 0.0) for _ in range(3))
        hn = [math.sqrt(z @ (K1 @ z)) for z in (u, v, w)]
        M_hat = max(M_hat, abs(w @ (assemble_convection(space8, u) @ v)) / np.prod(hn))
    f = assemble_load(space8, _forcing(1.0))
    fn = _dual_norm(space8, blocks, f)
    f *= nu**2 / (8 * M_hat * fn)  # alpha = M_hat nu^-2 ||f|| = 1/8
    fn = _dual_norm(space8, blocks, f)
    assert 8 * M_hat * fn / nu**2 <= 1 + 1e-12
    cfg = SolverConfig(method="newton", nu=nu, lid_speed=0.0, tol=1e-12, max_iters=20)
    tr = solve_nonlinear(space8, cfg, forcing=f, keep_iterates=True)
    assert tr.converged
    for s in tr.iterates:
        assert math.sqrt(s.velocity @ (K1 @ s.velocity)) <= 2 * fn / nu


def test_converged_state_is_discretely_divergence_free(space16):
    cfg = SolverConfig(method="picard", nu=0.01, tol=1e-10)
    tr = solve_nonlinear(space16, cfg)
    assert tr.converged
    blocks = assemble_linear_blocks(space16, 0.01)
    assert np.abs(blocks.B @ tr.final_state.velocity).max() <= 1e-9
    assert tr.records[-1].residual <= 1e-8
    assert abs(np.ones(space16.pressure_dof_count) @ (blocks.Mp @ tr.final_state.pressure)) < 1e-12


def test_saddle_matrix_symmetric(space8):
    blocks = assemble_linear_blocks(space8, 0.3)
    K = saddle_matrix(blocks, blocks.A)
    assert abs(K - K.T).max() < 1e-14
    assert sp.issparse(K)
