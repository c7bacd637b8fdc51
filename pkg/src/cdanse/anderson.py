"""Anderson acceleration for fixed-point maps ``x -> g(x)``.

With residuals ``y_k = g(x_{k-1}) - x_{k-1}``, iterate differences in ``E`` and
residual differences in ``F``, one step is

    gamma = argmin ||F gamma - y||,   x+ = x + beta*y - (E + beta*F) gamma

where the norm may be weighted by an SPD matrix (the H1 stiffness for
velocity fields).  The least-squares problem is solved with a modified
Gram-Schmidt QR in the weighted inner product.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

RANK_TOL = 1e-12


@dataclass(frozen=True)
class AndersonConfig:
    depth: int = 5
    beta: float = 1.0
    inner_product: str = "h1"

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.inner_product not in ("h1", "euclidean"):
            raise ValueError(f"unknown inner product {self.inner_product!r}")


def choose_inner_product(mode: str, K1=None):
    """Return ``ip(a, b)`` for the requested least-squares inner product."""
    if mode == "euclidean":
        return lambda a, b: float(a @ b)
    if mode == "h1":
        if K1 is None:
            raise ValueError("h1 inner product needs the stiffness matrix")
        return lambda a, b: float(a @ (K1 @ b))
    raise ValueError(f"unknown inner product {mode!r}")


def weighted_lstsq(F, y, ip, rank_tol=RANK_TOL):
    """Solve ``min ||F gamma - y||`` with columns of ``F`` ordered newest first.

    Oldest columns are dropped until the weighted QR is numerically full rank.
    Returns ``(gamma, n_used)``; ``gamma`` has ``n_used`` entries matching the
    leading columns.
    """
    m = F.shape[1]
    while m > 0:
        Q = np.empty((F.shape[0], m))
        R = np.zeros((m, m))
        ok = True
        for j in range(m):
            v = F[:, j].copy()
            norm0 = np.sqrt(ip(v, v))
            # two Gram-Schmidt passes keep Q orthonormal to working precision
            for _ in range(2):
                for i in range(j):
                    r = ip(Q[:, i], v)
                    R[i, j] += r
                    v -= r * Q[:, i]
            rjj = np.sqrt(max(ip(v, v), 0.0))
            if norm0 == 0.0 or rjj <= rank_tol * norm0:
                ok = False
                break
            R[j, j] = rjj
            Q[:, j] = v / rjj
        if ok:
            qty = np.array([ip(Q[:, i], y) for i in range(m)])
            return np.linalg.solve(np.triu(R), qty), m
        m -= 1
    return np.zeros(0), 0


class AndersonHistory:
    """Sliding window of iterate and residual differences."""

    def __init__(self, config: AndersonConfig, ip=None):
        self.config = config
        self.ip = ip if ip is not None else choose_inner_product("euclidean")
        self.E = deque(maxlen=max(config.depth, 1))
        self.F = deque(maxlen=max(config.depth, 1))
        self.x_prev = None
        self.y_prev = None
        self.k = 0

    @property
    def columns(self) -> int:
        return 0 if self.config.depth == 0 else len(self.F)

    def norm(self, v) -> float:
        # rescale first so tiny vectors do not underflow to a zero norm
        s = float(np.max(np.abs(v), initial=0.0))
        if s == 0.0 or not np.isfinite(s):
            return s
        w = v / s
        return s * float(np.sqrt(max(self.ip(w, w), 0.0)))


def aa_update(history: AndersonHistory, x_k, g_of_x_k, beta=None):
    """One accelerated step.  Returns ``(x_next, gain)``.

    ``gain`` is ``||F gamma - y|| / ||y||`` and is ``nan`` when the residual
    vanishes (``x_k`` is then returned unchanged).
    """
    beta = history.config.beta if beta is None else beta
    x_k = np.asarray(x_k, dtype=float)
    g = np.asarray(g_of_x_k, dtype=float)
    y = g - x_k
    if history.x_prev is not None and history.config.depth > 0:
        history.E.appendleft(x_k - history.x_prev)
        history.F.appendleft(y - history.y_prev)
    history.x_prev = x_k
    history.y_prev = y
    history.k += 1

    if not np.any(y):
        return x_k.copy(), float("nan")

    # (1-beta) x + beta g is exactly g when beta == 1
    x_next = (1.0 - beta) * x_k + beta * g
    m = history.columns
    if m == 0:
        return x_next, 1.0
    F = np.column_stack(list(history.F))
    E = np.column_stack(list(history.E))
    gamma, used = weighted_lstsq(F, y, history.ip)
    if used == 0:
        return x_next, 1.0
    Fg = F[:, :used] @ gamma
    x_next = x_next - (E[:, :used] @ gamma + beta * Fg)
    gain = history.norm(Fg - y) / history.norm(y)
    return x_next, gain
