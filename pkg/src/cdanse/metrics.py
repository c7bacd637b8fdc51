"""Norms, convergence-rate fits and summary tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

ERROR_FLOOR = 1e-10
# RMS misfit (natural log) above which a log-linear fit is not called linear decay
GOODNESS_TOL = 0.5

_COLUMNS = {"star": "err_star", "h1": "err_h1", "l2": "err_l2", "residual": "residual", "update": "update_h1"}


def h1_seminorm(v, K1) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(v @ (K1 @ v), 0.0)))


def l2_norm(v, Mv) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(v @ (Mv @ v), 0.0)))


def star_norm(v, H: float, K1, Mv) -> float:
    """``sqrt(|v|_1^2 + ||v||_0^2 / (2 H^2))``; the weight vanishes as ``H -> inf``."""
    if not H > 0:
        raise ValueError("H must be positive")
    a = h1_seminorm(v, K1)
    if math.isinf(H):
        return a
    b = l2_norm(v, Mv)
    return math.sqrt(a * a + b * b / (2.0 * H * H))


def _errors(trace, norm):
    """Return ``(k, e)`` from a trace or from a plain sequence indexed from 1."""
    if hasattr(trace, "column"):
        if norm not in _COLUMNS:
            raise ValueError(f"unknown norm {norm!r}")
        e = np.asarray(trace.column(_COLUMNS[norm]), dtype=float)
        k = np.asarray(trace.column("k"), dtype=float)
    else:
        e = np.asarray(trace, dtype=float)
        k = np.arange(1, len(e) + 1, dtype=float)
    return k, e


@dataclass(frozen=True)
class RateFit:
    rate: float
    k_start: int
    k_end: int
    goodness: float
    n_points: int
    flag: str = ""

    @property
    def ok(self) -> bool:
        return not self.flag

    @property
    def linear(self) -> bool:
        return self.ok and self.goodness <= GOODNESS_TOL


def fit_linear_rate(trace, norm: str = "star", floor: float = ERROR_FLOOR, min_points: int = 4) -> RateFit:
    """Log-linear least-squares rate over the usable window.

    The first iteration and every entry below ``floor`` (or non-finite) are
    dropped.  With fewer than ``min_points`` left the fit is flagged and
    ``rate`` is nan.  ``goodness`` is the RMS residual of the log fit.
    """
    k, e = _errors(trace, norm)
    keep = (k > 1) & np.isfinite(e) & (e >= floor)
    kk, ee = k[keep], e[keep]
    if len(kk) < min_points:
        return RateFit(math.nan, 0, 0, math.nan, len(kk), flag="too_few_points")
    y = np.log(ee)
    slope, icept = np.polyfit(kk, y, 1)
    resid = y - (slope * kk + icept)
    goodness = float(np.sqrt(np.mean(resid**2)))
    flag = "" if goodness <= GOODNESS_TOL else "nonlinear_decay"
    return RateFit(float(np.exp(slope)), int(kk[0]), int(kk[-1]), goodness, len(kk), flag)


def h_scaling_exponent(rates) -> list:
    """Exponents ``log(rho_H / rho_2H) / log(1/2)`` for successive halvings of H."""
    pairs = [(float(H), float(r)) for H, r in rates]
    if len(pairs) < 2:
        raise ValueError("need at least two (H, rate) pairs")
    out = []
    for (H0, r0), (H1, r1) in zip(pairs, pairs[1:]):
        if not math.isclose(H1, 0.5 * H0, rel_tol=1e-12):
            raise ValueError(f"H sequence must halve: {H0} -> {H1}")
        out.append(math.log(r1 / r0) / math.log(0.5))
    return out


@dataclass(frozen=True)
class QuadraticFit:
    constant: float
    spread: float
    k_start: int
    k_end: int
    ratios: tuple


def quadratic_constant(trace, norm: str = "h1", floor: float = ERROR_FLOOR, min_points: int = 3) -> QuadraticFit:
    """Geometric mean of ``e_{k+1} / e_k^2`` over the terminal descent.

    The window is the last run of strictly decreasing errors above ``floor``
    (first iteration excluded).  ``spread`` is max/min of the ratios.
    """
    if getattr(trace, "status", None) == "diverged":
        raise ValueError("diverged trace has no quadratic window")
    k, e = _errors(trace, norm)
    ok = (k > 1) & np.isfinite(e) & (e >= floor)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise ValueError("no iterations above the error floor")
    end = idx[-1]
    start = end
    while start - 1 >= 0 and ok[start - 1] and e[start - 1] > e[start]:
        start -= 1
    if end - start + 1 < min_points:
        raise ValueError(f"quadratic window has {end - start + 1} points, need {min_points}")
    w = e[start : end + 1]
    q = w[1:] / w[:-1] ** 2
    return QuadraticFit(float(np.exp(np.mean(np.log(q)))), float(q.max() / q.min()),
                        int(k[start]), int(k[end]), tuple(float(x) for x in q))


# -- tables -----------------------------------------------------------------

TABLE1_COLUMNS = ("H", "iterations", "rate_star", "scaling_exponent")


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "-"
        return f"{v:.4g}"
    return str(v)


def table_text(columns, rows) -> str:
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def table_csv(columns, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow(["" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v)
                     for v in r])
    return buf.getvalue()


def table1_rows(results):
    """Rows ``(H, iterations, rate_star, exponent)`` from ``[(H, iterations, RateFit)]``.

    The exponent of the first row is nan; later rows use the previous H.
    """
    rows = []
    for i, (H, its, fit) in enumerate(results):
        if i == 0:
            s = math.nan
        else:
            H0, _, f0 = results[i - 1]
            s = h_scaling_exponent([(H0, f0.rate), (H, fit.rate)])[0] if f0.ok and fit.ok else math.nan
        rows.append((float(H), int(its), fit.rate, s))
    return rows
