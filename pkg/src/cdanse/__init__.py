"""Finite element solvers for the steady driven cavity with data nudging.

Taylor-Hood P2/P1 discretization on uniform triangulations, Picard and
Newton iterations with optional nudging toward coarse velocity observations,
Anderson acceleration, and the experiment suites that exercise them.
"""

from .anderson import AndersonConfig, AndersonHistory, aa_update, choose_inner_product
from .cda import (
    InconsistentDataError,
    NudgingConfig,
    ObservationData,
    apply_direct_enforcement,
    build_coarse_mass,
    build_sampling_operator,
    mu_min,
    nudging_contribution,
    sample,
)
from .fem import MixedSpace, State, assemble_convection, assemble_linear_blocks
from .linsolve import LinearSolveError, linear_solve
from .mesh import Mesh, ObservationNodeSet, build_uniform_triangulation, observation_nodes
from .metrics import fit_linear_rate, h_scaling_exponent, quadratic_constant, star_norm
from .solvers import IterationTrace, SolverConfig, newton_step, picard_step, reference_solution, solve_nonlinear

__version__ = "0.1.0"
