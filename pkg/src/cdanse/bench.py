"""Scenario definitions and experiment suites for the driven cavity.

Every suite returns a :class:`SuiteReport` holding the per-scenario traces,
fitted rates, emitted tables and a list of named pass/fail checks.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .anderson import AndersonConfig
from .cda import NudgingConfig, mu_min, sample
from .fem import MixedSpace, State
from .mesh import build_uniform_triangulation, observation_nodes
from .metrics import (
    TABLE1_COLUMNS,
    fit_linear_rate,
    quadratic_constant,
    table1_rows,
    table_csv,
    table_text,
)
from .solvers import SolverConfig, reference_solution, solve_nonlinear
from .svgplot import render_log_plot

log = logging.getLogger(__name__)

DESK_SCALE_NOTE = (
    "desk-scale substitution: uniform n<=64 right-triangle mesh with Taylor-Hood P2/P1 elements; "
    "high-Re studies run at reduced Reynolds numbers and check qualitative behaviour only"
)

# iteration counts and *-norm rates the H-scaling study is compared against
TABLE1_TARGET = {4: (16, 0.1814), 8: (13, 0.1211), 16: (11, 0.0705), 32: (9, 0.0371), 64: (8, 0.0231)}
TABLE1_TOL = 1e-10
REFERENCE_TOL = 1e-11


@dataclass(frozen=True)
class Scenario:
    name: str
    Re: float
    n: int = 64
    n_H: int | None = None
    method: str = "picard"
    cda: str = "off"
    mu: float | None = None
    aa_depth: int | None = None
    aa_beta: float = 1.0
    tol: float = 1e-8
    max_iters: int = 200
    lid_speed: float = 1.0

    def __post_init__(self):
        if not self.Re > 0:
            raise ValueError("Re must be positive")
        if self.n_H is not None and self.n % self.n_H:
            raise ValueError(f"n_H={self.n_H} does not divide n={self.n}")
        if (self.cda != "off") and self.n_H is None:
            raise ValueError("nudging needs an observation resolution n_H")

    @property
    def H(self) -> float | None:
        return None if self.n_H is None else 1.0 / self.n_H

    def solver_config(self) -> SolverConfig:
        aa = None if self.aa_depth is None else AndersonConfig(self.aa_depth, self.aa_beta)
        return SolverConfig(method=self.method, nudging=NudgingConfig(self.cda, self.mu, allow_small_mu=True),
                            nu=1.0 / self.Re, lid_speed=self.lid_speed, tol=self.tol,
                            max_iters=self.max_iters, anderson=aa)

    def cli_args(self) -> list:
        """Arguments of ``cdanse solve`` that rerun this scenario."""
        a = ["--re", repr(float(self.Re)), "--n", str(self.n), "--method", self.method, "--cda", self.cda,
             "--tol", repr(self.tol), "--max-iters", str(self.max_iters)]
        if self.n_H is not None:
            a += ["--H", repr(1.0 / self.n_H)]
        if self.mu is not None:
            a += ["--mu", repr(self.mu)]
        if self.aa_depth is not None:
            a += ["--aa-depth", str(self.aa_depth), "--aa-beta", repr(self.aa_beta)]
        if self.lid_speed != 1.0:
            a += ["--lid", repr(self.lid_speed)]
        return a


class ReferenceCache:
    """Converged reference states keyed by ``(Re, n, lid_speed, tol)``.

    With a directory, references persist as ``.npz`` files that carry a
    SHA-256 of their contents; a file whose hash does not match is recomputed.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self._spaces = {}
        self._refs = {}

    def space(self, n: int) -> MixedSpace:
        if n not in self._spaces:
            self._spaces[n] = MixedSpace(build_uniform_triangulation(n))
        return self._spaces[n]

    @staticmethod
    def key(Re, n, lid_speed=1.0, tol=REFERENCE_TOL) -> str:
        return f"Re={float(Re)!r};n={int(n)};lid={float(lid_speed)!r};tol={float(tol)!r}"

    def _path(self, key):
        digest = hashlib.sha256(key.encode()).hexdigest()[:16]
        return os.path.join(self.directory, f"ref_{digest}.npz")

    def get(self, Re, n, lid_speed=1.0, tol=REFERENCE_TOL) -> State:
        key = self.key(Re, n, lid_speed, tol)
        if key in self._refs:
            return self._refs[key]
        space = self.space(n)
        state = None
        if self.directory:
            state = self._load(key, space)
        if state is None:
            log.info("computing reference %s", key)
            state = reference_solution(1.0 / Re, space, lid_speed=lid_speed, tol=tol)
            if self.directory:
                self._save(key, state)
        self._refs[key] = state
        return state

    def _load(self, key, space):
        path = self._path(key)
        if not os.path.exists(path):
            return None
        with np.load(path) as z:
            x = z["x"]
            ok = str(z["key"]) == key and str(z["sha256"]) == hashlib.sha256(x.tobytes()).hexdigest()
        if not ok or x.shape != (space.n_dofs,):
            log.warning("discarding stale reference file %s", path)
            return None
        return State.from_vector(space, x)

    def _save(self, key, state):
        os.makedirs(self.directory, exist_ok=True)
        x = state.vector()
        np.savez(self._path(key), x=x, key=key, sha256=hashlib.sha256(x.tobytes()).hexdigest())


@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: object
    fit: object = None
    quadratic: object = None

    @property
    def converged(self) -> bool:
        return self.trace.converged

    def summary(self) -> dict:
        d = {"name": self.scenario.name, "status": self.trace.status, "iterations": self.trace.iterations}
        if self.fit is not None:
            d["rate"] = self.fit.rate
        if self.quadratic is not None:
            d["quad_constant"] = self.quadratic.constant
            d["quad_spread"] = self.quadratic.spread
        return d


def run_scenario(scenario: Scenario, reference: State | None, space: MixedSpace | None = None) -> ScenarioResult:
    """Sample observations from ``reference`` (if nudged), solve, and fit rates."""
    if space is None:
        space = MixedSpace(build_uniform_triangulation(scenario.n))
    data = None
    if scenario.cda != "off":
        data = sample(space, observation_nodes(space.mesh, scenario.n_H), reference.velocity)
    trace = solve_nonlinear(space, scenario.solver_config(), data, reference=reference)
    trace.meta["name"] = scenario.name
    trace.meta["Re"] = repr(float(scenario.Re))  # exact input value, 1/nu may differ by an ulp
    fit = None
    if reference is not None:
        fit = fit_linear_rate(trace, "star" if scenario.H is not None else "h1")
    quad = None
    if scenario.method == "newton" and trace.converged and reference is not None:
        try:
            quad = quadratic_constant(trace, "h1")
        except ValueError:
            quad = None
    return ScenarioResult(scenario, trace, fit, quad)


def _worker(args):
    return run_scenario(*args)


def run_scenarios(scenarios, cache: ReferenceCache, jobs: int = 1, with_reference: bool = True) -> list:
    """Run scenarios in order; references are computed up front in this process."""
    scenarios = list(scenarios)
    refs = [cache.get(s.Re, s.n, s.lid_speed) if with_reference or s.cda != "off" else None for s in scenarios]
    if jobs > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_worker, [(s, r, None) for s, r in zip(scenarios, refs)]))
    return [run_scenario(s, r, cache.space(s.n)) for s, r in zip(scenarios, refs)]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    name: str
    results: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    plot_norm: str = "err_h1"
    header: str = DESK_SCALE_NOTE

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))

    def result(self, name) -> ScenarioResult:
        for r in self.results:
            if r.scenario.name == name:
                return r
        raise KeyError(name)

    def summary_text(self) -> str:
        lines = [f"suite {self.name}", f"# {self.header}", ""]
        for title, (cols, rows) in self.tables.items():
            lines += [f"[{title}]", table_text(cols, rows)]
        lines.append("[scenarios]")
        for r in self.results:
            s = r.summary()
            extra = "".join(f" {k}={v:.4g}" for k, v in s.items() if isinstance(v, float))
            wall = float(np.sum(r.trace.column("wall_ms"))) / 1000.0
            lines.append(f"{s['name']}: {s['status']} in {s['iterations']}{extra} [{wall:.1f}s]")
            lines.append("  rerun: cdanse solve " + " ".join(r.scenario.cli_args()))
        lines.append("")
        for n in self.notes:
            lines.append(f"note: {n}")
        lines.append("[checks]")
        for c in self.checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f" ({c.detail})" if c.detail else ""))
        return "\n".join(lines) + "\n"

    def plot_svg(self) -> str:
        curves = []
        for r in self.results:
            t = r.trace
            curves.append((r.scenario.name, t.column("k"), t.column(self.plot_norm), t.status == "diverged"))
        return render_log_plot(curves, title=f"{self.name}: {self.plot_norm} vs iteration", ylabel=self.plot_norm)

    def write(self, directory, plot: bool = True) -> None:
        os.makedirs(os.path.join(directory, "traces"), exist_ok=True)
        for r in self.results:
            base = os.path.join(directory, "traces", r.scenario.name)
            r.trace.write_csv(base + ".csv", timings=False)
            r.trace.write_metadata(base + ".meta")
        for title, (cols, rows) in self.tables.items():
            with open(os.path.join(directory, f"{title}.csv"), "w") as fh:
                fh.write(table_csv(cols, rows))
        with open(os.path.join(directory, "summary.txt"), "w") as fh:
            fh.write(self.summary_text())
        if plot and self.results:
            with open(os.path.join(directory, f"{self.name}.svg"), "w") as fh:
                fh.write(self.plot_svg())


def _hname(n_H):
    return f"H1_{n_H}"


# -- suites -----------------------------------------------------------------

def suite_table1(n=64, Re=100.0, n_H_grid=(4, 8, 16, 32, 64), tol=TABLE1_TOL, cache=None, jobs=1,
                 target=TABLE1_TARGET) -> SuiteReport:
    """Direct-enforcement CDA-Picard across observation spacings."""
    cache = cache or ReferenceCache()
    scen = [Scenario(f"table1_{_hname(k)}", Re, n, k, "picard", "direct", tol=tol) for k in n_H_grid]
    rep = SuiteReport("table1", plot_norm="err_star")
    rep.results = run_scenarios(scen, cache, jobs)
    rows = table1_rows([(r.scenario.H, r.trace.iterations, r.fit) for r in rep.results])
    rep.tables["table1"] = (TABLE1_COLUMNS, rows)
    rates = [r.fit.rate for r in rep.results]
    its = [r.trace.iterations for r in rep.results]
    exps = [row[3] for row in rows[1:]]
    rep.check("all runs converged", all(r.converged for r in rep.results))
    rep.check("all rate fits usable", all(r.fit.ok for r in rep.results),
              ", ".join(f"{r.scenario.name}:{r.fit.flag or 'ok'}" for r in rep.results))
    rep.check("rates strictly decreasing in H", all(b < a for a, b in zip(rates, rates[1:])),
              " ".join(f"{x:.4g}" for x in rates))
    rep.check("iterations nonincreasing in H", all(b <= a for a, b in zip(its, its[1:])), str(its))
    rep.check("scaling exponents in [0.3, 1.1]", all(0.3 <= s <= 1.1 for s in exps),
              " ".join(f"{x:.3f}" for x in exps))
    if target:
        dev_it = [(k, i, target[k][0]) for k, i in zip(n_H_grid, its) if k in target]
        rep.check("iterations within 3 of target", all(abs(i - t) <= 3 for _, i, t in dev_it),
                  " ".join(f"1/{k}:{i}vs{t}" for k, i, t in dev_it))
        dev_r = [(k, r, target[k][1]) for k, r in zip(n_H_grid, rates) if k in target]
        rep.check("rates within a factor 2 of target", all(t / 2 <= r <= 2 * t for _, r, t in dev_r),
                  " ".join(f"1/{k}:{r:.4f}vs{t}" for k, r, t in dev_r))
    return rep


def curve_distance(trace_a, trace_b, column="err_h1") -> float:
    """``max_k |a_k - b_k|`` over the iterations both traces share."""
    a, b = trace_a.column(column), trace_b.column(column)
    L = min(len(a), len(b))
    if L == 0:
        return math.nan
    return float(np.max(np.abs(a[:L] - b[:L])))


def suite_mu_sweep(Re=100.0, n=64, n_H=8, mu_grid=(1e2, 1e4, 1e6, 1e8, 1e12), tol=TABLE1_TOL, cache=None,
                   jobs=1, bound=1e-6) -> SuiteReport:
    """Penalty nudging approaching direct enforcement as mu grows."""
    mu_grid = [float(m) for m in mu_grid]
    if any(b <= a for a, b in zip(mu_grid, mu_grid[1:])):
        raise ValueError("mu grid must be ascending")
    cache = cache or ReferenceCache()
    direct = Scenario(f"musweep_direct_{_hname(n_H)}", Re, n, n_H, "picard", "direct", tol=tol)
    scen = [direct] + [Scenario(f"musweep_mu{m:.0e}", Re, n, n_H, "picard", "penalty", m, tol=tol) for m in mu_grid]
    rep = SuiteReport("musweep")
    rep.results = run_scenarios(scen, cache, jobs)
    d = rep.results[0].trace
    lo = mu_min(1.0 / Re, 1.0 / n_H)
    rows, dist = [], []
    for m, r in zip(mu_grid, rep.results[1:]):
        dist.append(curve_distance(r.trace, d))
        rows.append((m, r.trace.iterations, dist[-1], "yes" if m < lo else "no"))
        if m < lo:
            rep.notes.append(f"mu={m:g} is below nu/(4H^2)={lo:g}")
    rep.tables["musweep"] = (("mu", "iterations", "max_k_err_h1_distance", "below_mu_min"), rows)
    rep.data["distances"] = dist
    rep.check("all runs converged", all(r.converged for r in rep.results))
    rep.check("distance to direct nonincreasing in mu", all(b <= a for a, b in zip(dist, dist[1:])),
              " ".join(f"{x:.3g}" for x in dist))
    rep.check(f"distance at largest mu <= {bound:g}", dist[-1] <= bound, f"{dist[-1]:.3g}")
    return rep


def suite_enablement(Re_grid=(2000.0, 3000.0, 3500.0), n=64, n_H_grid=(32, 16, 8, 4), tol=1e-8, max_iters=200,
                     cache=None, jobs=1, full=False) -> SuiteReport:
    """Picard with and without nudging across Reynolds numbers.

    For each Re where plain Picard fails, CDA-Picard runs from the finest
    spacing to the coarsest and stops at the first failure after a success
    (unless ``full``); the frontier is the largest converging H.
    """
    cache = cache or ReferenceCache()
    fine_first = sorted(n_H_grid, reverse=True)
    rep = SuiteReport("enablement")
    rows = []
    enabled = []
    for Re in Re_grid:
        plain = run_scenarios([Scenario(f"enable_Re{Re:g}_plain", Re, n, tol=tol, max_iters=max_iters)],
                              cache, with_reference=False)[0]
        rep.results.append(plain)
        frontier = None
        if not plain.converged or full:
            ok_any = False
            for k in fine_first:
                r = run_scenarios([Scenario(f"enable_Re{Re:g}_cda_{_hname(k)}", Re, n, k, "picard", "direct",
                                            tol=tol, max_iters=max_iters)], cache, jobs)[0]
                rep.results.append(r)
                if r.converged:
                    ok_any = True
                    frontier = 1.0 / k
                    if not plain.converged:
                        enabled.append((Re, 1.0 / k))
                elif ok_any and not full:
                    break
        rows.append((float(Re), plain.trace.status, plain.trace.iterations,
                     math.nan if frontier is None else frontier))
    rep.tables["enablement"] = (("Re", "plain_status", "plain_iterations", "largest_converging_H"), rows)
    rep.data["enabled"] = enabled
    rep.check("nudging enables convergence somewhere", bool(enabled),
              " ".join(f"Re={r:g},H={h:g}" for r, h in enabled) or "no (Re, H) pair found")
    return rep


def suite_newton_basin(Re_grid=(500.0, 1000.0), n=64, n_H_grid=(4, 8, 16), tol=1e-8, max_iters=40, cache=None,
                       jobs=1, spread_bound=5.0) -> SuiteReport:
    """Newton and CDA-Newton from zero; frontier is the largest converging H."""
    cache = cache or ReferenceCache()
    coarse_first = sorted(n_H_grid)
    rep = SuiteReport("newtonbasin")
    rows, frontiers = [], []
    for Re in Re_grid:
        plain = run_scenarios([Scenario(f"newton_Re{Re:g}_plain", Re, n, method="newton", tol=tol,
                                        max_iters=max_iters)], cache)[0]
        rep.results.append(plain)
        frontier = math.inf if plain.converged else None
        if not plain.converged:
            for k in coarse_first:
                r = run_scenarios([Scenario(f"newton_Re{Re:g}_cda_{_hname(k)}", Re, n, k, "newton", "direct",
                                            tol=tol, max_iters=max_iters)], cache, jobs)[0]
                rep.results.append(r)
                if r.converged:
                    frontier = 1.0 / k
                    break
        frontiers.append(frontier)
        rows.append((float(Re), plain.trace.status, math.nan if frontier is None else frontier))
    rep.tables["newtonbasin"] = (("Re", "plain_status", "largest_converging_H"), rows)
    rep.data["frontiers"] = dict(zip([float(r) for r in Re_grid], frontiers))
    f = [-1.0 if x is None else x for x in frontiers]
    rep.check("frontier nonincreasing in Re", all(b <= a for a, b in zip(f, f[1:])),
              " ".join("none" if x is None else f"{x:g}" for x in frontiers))
    quads = [(r.scenario.name, r.quadratic) for r in rep.results if r.converged]
    rep.check(f"quadratic tails with spread <= {spread_bound:g}",
              all(q is not None and q.spread <= spread_bound for _, q in quads),
              " ".join(f"{nm}:{'none' if q is None else f'{q.spread:.2f}'}" for nm, q in quads))
    return rep


def suite_aa(Re=3500.0, n=64, n_H_grid=(32,), depth=5, beta=1.0, tol=1e-8, max_iters=200, cache=None,
             jobs=1) -> SuiteReport:
    """Anderson-accelerated Picard with and without nudging."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    cache = cache or ReferenceCache()
    scen = [Scenario(f"aa_Re{Re:g}_m{depth}", Re, n, None, "picard", "off", None, depth, beta, tol, max_iters)]
    scen += [Scenario(f"aa_Re{Re:g}_m{depth}_cda_{_hname(k)}", Re, n, k, "picard", "direct", None, depth, beta,
                      tol, max_iters) for k in sorted(n_H_grid)]
    rep = SuiteReport("aa")
    rep.results = run_scenarios(scen, cache, jobs)
    aa_only = rep.results[0]
    rows = [(r.scenario.name, r.trace.status, r.trace.iterations, float(np.nanmax(r.trace.column("aa_gain"))))
            for r in rep.results]
    rep.tables["aa"] = (("scenario", "status", "iterations", "max_gain"), rows)
    finest = rep.results[-1]
    better = finest.converged and (not aa_only.converged or finest.trace.iterations <= aa_only.trace.iterations)
    rep.check("nudged AA no slower than AA alone at the smallest H", better,
              f"{finest.trace.iterations} ({finest.trace.status}) vs {aa_only.trace.iterations} ({aa_only.trace.status})")
    gains = np.concatenate([r.trace.column("aa_gain") for r in rep.results])
    gains = gains[np.isfinite(gains)]
    rep.check("all gains <= 1", bool(np.all(gains <= 1.0)), f"max {gains.max():.17g}" if len(gains) else "no gains")
    return rep


SUITES = {
    "table1": suite_table1,
    "musweep": suite_mu_sweep,
    "enablement": suite_enablement,
    "newtonbasin": suite_newton_basin,
    "aa": suite_aa,
}
