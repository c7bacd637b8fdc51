"""Sparse direct solves for the saddle-point systems.

MKL Pardiso (through ``pypardiso``) is used when it can be loaded; its
symbolic analysis is cached and reused while the sparsity pattern is
unchanged, which is the common case inside a nonlinear iteration.  SuperLU
with a COLAMD ordering is the fallback.
"""

from __future__ import annotations

import glob
import logging
import os
import sys

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

# normwise backward error accepted without re-analysis, and the number of
# iterative refinement sweeps tried before falling back to a fresh analysis
BACKWARD_TOL = 1e-14
REFINE_STEPS = 3

# 1-based Pardiso iparm entries.  Weighted matching and scaling (iparm 11/13)
# are off: on the zero pressure block they produced factors with O(1)
# backward error in MKL 2026.1, while static pivoting with perturbation
# followed by refinement is accurate.
PARDISO_IPARM = {1: 1, 2: 2, 8: 4, 10: 13, 11: 0, 13: 0}

# ||K|| ||x|| / ||rhs|| bounds cond(K) from below; past this the system is
# singular to working precision (pivot perturbation hides exact zeros)
SINGULAR_GROWTH = 0.01 / np.finfo(float).eps


class LinearSolveError(RuntimeError):
    """Structural or numerical singularity of a linear system."""


def _find_mkl_rt():
    dirs = [os.path.join(sys.prefix, "lib"), "/usr/local/lib", "/usr/lib", "/usr/lib/x86_64-linux-gnu"]
    for d in dirs:
        hits = sorted(glob.glob(os.path.join(d, "libmkl_rt.so*")))
        if hits:
            return hits[0]
    return None


def _load_pardiso():
    if os.environ.get("CDANSE_SOLVER", "").lower() == "superlu":
        return None
    if "PYPARDISO_MKL_RT" not in os.environ:
        path = _find_mkl_rt()
        if path:
            os.environ["PYPARDISO_MKL_RT"] = path
    try:
        import pypardiso  # noqa: F401
        from pypardiso import PyPardisoSolver
    except Exception as exc:  # ImportError, or pypardiso failing to find MKL
        log.debug("pardiso unavailable: %s", exc)
        return None
    return PyPardisoSolver


_PARDISO = _load_pardiso()


def backend_name() -> str:
    return "pardiso" if _PARDISO is not None else "superlu"


class LinearSolver:
    """Reusable direct solver; one instance per nonlinear solve."""

    def __init__(self, backend: str | None = None):
        self.backend = backend or backend_name()
        if self.backend == "pardiso" and _PARDISO is None:
            raise LinearSolveError("pardiso backend requested but not available")
        self._pattern = None
        self._pardiso = None
        self.stale_analyses = 0
        self.fallbacks = 0

    def _analyse(self, K, pattern):
        self.close()
        self._pardiso = _PARDISO()
        for k, v in PARDISO_IPARM.items():
            self._pardiso.iparm[k - 1] = v
        self._pardiso.set_phase(11)
        self._pardiso._call_pardiso(K, np.zeros((K.shape[0], 1)))
        self._pattern = pattern

    def _factor_solve(self, K, rhs):
        self._pardiso.set_phase(23)
        x = self._pardiso._call_pardiso(K, rhs.reshape(-1, 1)).ravel()
        for _ in range(REFINE_STEPS):
            if backward_error(K, x, rhs) <= BACKWARD_TOL:
                break
            self._pardiso.set_phase(33)
            x = x + self._pardiso._call_pardiso(K, (rhs - K @ x).reshape(-1, 1)).ravel()
        return x

    def _pardiso_solve(self, K, rhs):
        pattern = (K.shape, K.indptr.tobytes(), K.indices.tobytes())
        fresh = self._pardiso is None or pattern != self._pattern
        if fresh:
            self._analyse(K, pattern)
        x = self._factor_solve(K, rhs)
        if not fresh and backward_error(K, x, rhs) > BACKWARD_TOL:
            # the pivot order of the cached analysis went stale
            self.stale_analyses += 1
            self._analyse(K, pattern)
            x = self._factor_solve(K, rhs)
        return x

    def solve(self, K, rhs) -> np.ndarray:
        K = sp.csr_matrix(K)
        K.sort_indices()
        rhs = np.ascontiguousarray(rhs, dtype=float)
        if K.shape[0] != K.shape[1] or K.shape[0] != rhs.shape[0]:
            raise LinearSolveError(f"system shape {K.shape} incompatible with rhs {rhs.shape}")
        x = None
        if self.backend == "pardiso":
            try:
                x = self._pardiso_solve(K, rhs)
            except Exception as exc:
                log.debug("pardiso failed: %s", exc)
            if x is not None and (not np.all(np.isfinite(x)) or backward_error(K, x, rhs) > BACKWARD_TOL):
                x = None
            if x is None:
                self.fallbacks += 1
                log.info("pardiso solve inaccurate; falling back to SuperLU")
        if x is None:
            x = _superlu_solve(K, rhs)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("non-finite solution (singular system)")
        g = growth(K, x, rhs)
        if g > SINGULAR_GROWTH:
            raise LinearSolveError(f"numerically singular system: condition number at least {g:.2e}")
        if not residual_ok(K, x, rhs):
            raise LinearSolveError("near-singular system: residual check failed")
        return x

    def close(self):
        if getattr(self, "_pardiso", None) is not None:
            try:
                self._pardiso.free_memory(everything=True)
            except Exception:
                pass
            self._pardiso = None
            self._pattern = None

    def __del__(self):
        self.close()


def _superlu_solve(K, rhs):
    try:
        return spla.splu(K.tocsc(), permc_spec="COLAMD", diag_pivot_thresh=0.1).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveError(f"factorization failed: {exc}") from exc


def linear_solve(system, rhs) -> np.ndarray:
    """One-shot direct solve of ``system x = rhs``."""
    return LinearSolver().solve(system, rhs)


def backward_error(K, x, rhs) -> float:
    """``||K x - rhs||_inf / (||K||_inf ||x||_inf + ||rhs||_inf)``."""
    r = np.abs(K @ x - rhs).max(initial=0.0)
    knorm = float(abs(K).sum(axis=1).max()) if K.nnz else 0.0
    den = knorm * np.abs(x).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    return float(r / den) if den > 0 else float(r)


def growth(K, x, rhs) -> float:
    """``||K||_inf ||x||_inf / ||rhs||_inf``, a lower bound on the condition number."""
    b = np.abs(rhs).max(initial=0.0)
    if b == 0.0:
        return 0.0
    knorm = float(abs(K).sum(axis=1).max()) if K.nnz else 0.0
    return float(knorm * np.abs(x).max(initial=0.0) / b)


def residual_ok(K, x, rhs, rtol=1e-10) -> bool:
    """``||K x - rhs|| <= rtol (||K||_F ||x|| + ||rhs||)``."""
    r = np.linalg.norm(K @ x - rhs)
    return bool(r <= rtol * (spla.norm(K) * np.linalg.norm(x) + np.linalg.norm(rhs)))
