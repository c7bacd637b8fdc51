"""Picard and Newton iterations for the steady cavity, with optional nudging.

Every step solves one linearized saddle-point system

    [ A + N + P   B^T ] [u]   [ f + r + q ]
    [ B           0   ] [p] = [ 0         ]

where ``N`` is the Picard convection matrix (plus the Newton extra term for
Newton), ``P``/``q`` the penalty nudging addend and ``r`` the Newton right-hand
side correction.  Boundary values, the pressure pin and (in direct mode) the
observed vertex values are imposed by symmetric elimination.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .anderson import AndersonConfig, AndersonHistory, aa_update, choose_inner_product
from .cda import (
    NudgingConfig,
    ObservationData,
    build_coarse_mass,
    build_sampling_operator,
    direct_constraints,
    nudging_contribution,
)
from .fem import (
    LinearBlocks,
    MixedSpace,
    State,
    apply_constraints,
    assemble_convection,
    assemble_linear_blocks,
    nonlinear_residual,
    saddle_matrix,
    zero_mean_pressure,
)
from .linsolve import LinearSolveError, LinearSolver

log = logging.getLogger(__name__)

METHODS = ("picard", "newton")
CONVERGED, MAX_ITERS, DIVERGED = "converged", "max_iters", "diverged"
CSV_HEADER = ["k", "update_h1", "residual", "err_l2", "err_h1", "err_star", "aa_gain", "wall_ms"]


@dataclass(frozen=True)
class SolverConfig:
    method: str = "picard"
    nudging: NudgingConfig = field(default_factory=NudgingConfig)
    nu: float = 0.01
    lid_speed: float = 1.0
    tol: float = 1e-8
    max_iters: int = 200
    divergence_threshold: float = 1e6
    anderson: AndersonConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not 0 < self.tol < self.divergence_threshold:
            raise ValueError("need 0 < tol < divergence_threshold")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def Re(self) -> float:
        return 1.0 / self.nu

    def echo(self) -> dict:
        d = {
            "method": self.method,
            "Re": repr(self.Re),
            "nu": repr(self.nu),
            "lid_speed": repr(self.lid_speed),
            "tol": repr(self.tol),
            "max_iters": str(self.max_iters),
            "divergence_threshold": repr(self.divergence_threshold),
            "cda": self.nudging.mode,
            "mu": "" if self.nudging.mu is None else repr(self.nudging.mu),
            "include_boundary": str(self.nudging.include_boundary),
        }
        if self.anderson is not None:
            d.update(aa_depth=str(self.anderson.depth), aa_beta=repr(self.anderson.beta),
                     aa_inner=self.anderson.inner_product)
        return d


@dataclass
class IterationRecord:
    k: int
    update_h1: float
    residual: float
    err_l2: float = math.nan
    err_h1: float = math.nan
    err_star: float = math.nan
    aa_gain: float = math.nan
    wall_ms: float = 0.0


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)
    status: str = MAX_ITERS
    reason: str = ""
    H: float | None = None
    meta: dict = field(default_factory=dict)
    final_state: State | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def rows(self):
        for r in self.records:
            yield [r.k] + [getattr(r, c) for c in CSV_HEADER[1:]]

    def write_csv(self, path, timings: bool = True) -> None:
        """Write the trace; ``timings=False`` leaves wall_ms blank so reruns are byte-identical."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in self.rows():
                if not timings:
                    row[-1] = math.nan
                w.writerow([row[0]] + ["" if isinstance(v, float) and math.isnan(v) else repr(float(v))
                                       for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "IterationTrace":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            recs = []
            for row in reader:
                vals = {k: (math.nan if row[k] == "" else float(row[k])) for k in CSV_HEADER[1:]}
                recs.append(IterationRecord(k=int(row["k"]), **vals))
        return cls(records=recs)

    def write_metadata(self, path, extra=None) -> None:
        meta = dict(self.meta)
        meta.update(status=self.status, reason=self.reason, iterations=str(self.iterations))
        if extra:
            meta.update(extra)
        with open(path, "w") as fh:
            for k, v in meta.items():
                fh.write(f"{k}={v}\n")


class Divergence(Exception):
    pass


class CavityProblem:
    """Discrete cavity problem plus the constraint and nudging setup of one solve."""

    def __init__(self, space: MixedSpace, config: SolverConfig, data: ObservationData | None = None,
                 forcing=None, blocks: LinearBlocks | None = None):
        mode = config.nudging.mode
        if (data is None) != (mode == "off"):
            raise ValueError("observation data must be given iff nudging is enabled")
        self.space = space
        self.config = config
        self.data = data
        if blocks is None or blocks.nu != config.nu:
            blocks = assemble_linear_blocks(space, config.nu)
        self.blocks = blocks
        nv = space.velocity_dof_count
        self.forcing = np.zeros(nv) if forcing is None else np.asarray(forcing, dtype=float)
        self.small_mu = False

        bdofs, bvals = space.dirichlet_values(config.lid_speed)
        dofs = [bdofs, np.array([nv])]
        vals = [bvals, np.array([0.0])]
        self.penalty_matrix = None
        self.penalty_rhs = np.zeros(nv)
        if mode == "direct":
            odofs, ovals = direct_constraints(space, data, config.lid_speed, config.nudging.include_boundary)
            dofs.append(odofs)
            vals.append(ovals)
        elif mode == "penalty":
            self.small_mu = config.nudging.check(config.nu, data.H)
            S = build_sampling_operator(space, data.nodes)
            M_H = build_coarse_mass(data.nodes)
            self.penalty_matrix, self.penalty_rhs = nudging_contribution(S, M_H, config.nudging.mu, data)
        self.constrained_dofs = np.concatenate(dofs)
        self.constrained_values = np.concatenate(vals)
        free = np.ones(space.n_dofs, dtype=bool)
        free[self.constrained_dofs] = False
        self.free_velocity = free[:nv]
        self.solver = LinearSolver()

    @property
    def H(self):
        return None if self.data is None else self.data.H

    def h1(self, v) -> float:
        return float(np.sqrt(max(v @ (self.blocks.K1 @ v), 0.0)))

    def l2(self, v) -> float:
        return float(np.sqrt(max(v @ (self.blocks.Mv @ v), 0.0)))

    def constrained_velocity(self, velocity):
        """Copy of ``velocity`` with all constrained velocity dofs set."""
        v = np.array(velocity, dtype=float)
        nv = len(v)
        mask = self.constrained_dofs < nv
        v[self.constrained_dofs[mask]] = self.constrained_values[mask]
        return v

    def _solve(self, velocity_block, rhs_velocity) -> State:
        if self.penalty_matrix is not None:
            velocity_block = velocity_block + self.penalty_matrix
            rhs_velocity = rhs_velocity + self.penalty_rhs
        K = saddle_matrix(self.blocks, velocity_block)
        rhs = np.concatenate([rhs_velocity, np.zeros(self.space.pressure_dof_count)])
        cs = apply_constraints(K, rhs, self.constrained_dofs, self.constrained_values)
        x = self.solver.solve(cs.matrix, cs.rhs)
        s = State.from_vector(self.space, x)
        return State(s.velocity, zero_mean_pressure(self.blocks, s.pressure))

    def picard_step(self, u_k, N=None) -> State:
        u = u_k.velocity if isinstance(u_k, State) else np.asarray(u_k)
        if N is None:
            N = assemble_convection(self.space, u, "picard")
        return self._solve(self.blocks.A + N, self.forcing)

    def newton_step(self, u_k, N=None) -> State:
        u = u_k.velocity if isinstance(u_k, State) else np.asarray(u_k)
        if N is None:
            N = assemble_convection(self.space, u, "picard")
        Nx = assemble_convection(self.space, u, "newton_extra")
        return self._solve(self.blocks.A + N + Nx, self.forcing + N @ u)

    def step(self, u_k, N=None) -> State:
        if self.config.method == "picard":
            return self.picard_step(u_k, N)
        return self.newton_step(u_k, N)

    def residual(self, s: State, N=None) -> float:
        return nonlinear_residual(self.space, self.blocks, s, self.config.lid_speed, self.forcing, N)


def picard_step(problem: CavityProblem, u_k) -> State:
    return problem.picard_step(u_k)


def newton_step(problem: CavityProblem, u_k) -> State:
    return problem.newton_step(u_k)


def _star(err_h1, err_l2, H):
    if H is None:
        return math.nan
    return math.sqrt(err_h1**2 + err_l2**2 / (2.0 * H * H))


def solve_nonlinear(space: MixedSpace, config: SolverConfig, data: ObservationData | None = None,
                    reference: State | None = None, u0=None, forcing=None,
                    blocks: LinearBlocks | None = None, problem: CavityProblem | None = None,
                    keep_iterates: bool = False) -> IterationTrace:
    """Iterate from ``u0`` (default zero) until the H1 update drops below ``tol``.

    Breakdowns and blow-ups end the run with ``status == "diverged"``; they
    never raise.
    """
    if problem is None:
        problem = CavityProblem(space, config, data, forcing, blocks)
    trace = IterationTrace(H=problem.H, meta=config.echo())
    trace.meta["n"] = str(space.mesh.n)
    trace.meta["n_H"] = "" if data is None else str(data.nodes.n_H)
    if problem.small_mu:
        trace.meta["warning"] = "mu_below_threshold"
    iterates = [] if keep_iterates else None

    u = np.zeros(space.velocity_dof_count) if u0 is None else np.array(
        u0.velocity if isinstance(u0, State) else u0, dtype=float)
    state = State(u, np.zeros(space.pressure_dof_count))
    aa = None
    if config.anderson is not None:
        ip = choose_inner_product(config.anderson.inner_product,
                                  _restrict(problem.blocks.K1, problem.free_velocity))
        aa = AndersonHistory(config.anderson, ip)
        free = problem.free_velocity

    N = None
    for k in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        gain = math.nan
        try:
            g = problem.step(state, N)
            if aa is None:
                new_state = g
            else:
                x_next, gain = aa_update(aa, state.velocity[free], g.velocity[free])
                new_vel = problem.constrained_velocity(g.velocity)
                new_vel[free] = x_next
                new_state = State(new_vel, g.pressure)
            d = new_state.velocity - state.velocity
            update = problem.h1(d)
            size = problem.h1(new_state.velocity)
            if not (math.isfinite(update) and size <= config.divergence_threshold):
                raise Divergence(f"|u_k|_H1={size:.3e} exceeds divergence threshold")
            # convection at the new iterate serves the residual and the next step
            N = assemble_convection(space, new_state.velocity, "picard")
            res = problem.residual(new_state, N)
        except (LinearSolveError, Divergence, ValueError, FloatingPointError) as exc:
            trace.status = DIVERGED
            trace.reason = f"k={k}: {exc}"
            log.info("diverged: %s", trace.reason)
            break
        rec = IterationRecord(k=k, update_h1=update, residual=res, aa_gain=gain)
        if reference is not None:
            e = reference.velocity - new_state.velocity
            rec.err_l2 = problem.l2(e)
            rec.err_h1 = problem.h1(e)
            rec.err_star = _star(rec.err_h1, rec.err_l2, problem.H)
        rec.wall_ms = 1000.0 * (time.perf_counter() - t0)
        trace.records.append(rec)
        state = new_state
        if iterates is not None:
            iterates.append(state)
        log.debug("k=%d update=%.3e residual=%.3e", k, update, res)
        if update <= config.tol:
            trace.status = CONVERGED
            break
    else:
        trace.status = MAX_ITERS
        trace.reason = f"no convergence in {config.max_iters} iterations"
    trace.final_state = state
    if iterates is not None:
        trace.iterates = iterates
    problem.solver.close()
    return trace


def _restrict(M, mask):
    idx = np.flatnonzero(mask)
    return M[idx][:, idx].tocsr()


DEFAULT_LADDER = (200.0, 400.0, 700.0, 1000.0, 1400.0, 2000.0, 2800.0, 4000.0, 5600.0, 8000.0)


def continuation_schedule(Re: float, ladder=DEFAULT_LADDER) -> list:
    """Reynolds numbers of the continuation stages ending at ``Re``."""
    return [r for r in ladder if r < Re] + [float(Re)]


class ContinuationError(RuntimeError):
    def __init__(self, Re, trace):
        super().__init__(f"Newton continuation failed at Re={Re:g} ({trace.status}: {trace.reason})")
        self.Re = Re
        self.trace = trace


def reference_solution(nu: float, space: MixedSpace, continuation_steps=None, lid_speed: float = 1.0,
                       tol: float = 1e-11, max_iters: int = 40) -> State:
    """Converged discrete cavity solution via Newton with Reynolds continuation.

    ``continuation_steps`` is a sequence of Reynolds numbers ending at ``1/nu``
    (default :func:`continuation_schedule`).
    """
    Re = 1.0 / nu
    steps = list(continuation_steps) if continuation_steps is not None else continuation_schedule(Re)
    if not math.isclose(steps[-1], Re, rel_tol=1e-12):
        raise ValueError(f"continuation schedule must end at Re={Re:g}")
    state = None
    for i, r in enumerate(steps):
        stage_nu = nu if i == len(steps) - 1 else 1.0 / r
        cfg = SolverConfig(method="newton", nu=stage_nu, lid_speed=lid_speed, tol=tol, max_iters=max_iters)
        tr = solve_nonlinear(space, cfg, u0=state)
        if not tr.converged:
            raise ContinuationError(r, tr)
        state = tr.final_state
        log.info("continuation Re=%g converged in %d iterations", r, tr.iterations)
    return state
