"""Command-line entry point: ``cdanse solve`` and ``cdanse suite``."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from . import bench
from .solvers import CONVERGED, DIVERGED, MAX_ITERS, ContinuationError
from .svgplot import render_log_plot

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS, EXIT_DIVERGED, EXIT_CHECKS_FAILED = 0, 1, 2, 3, 4
STATUS_EXIT = {CONVERGED: EXIT_OK, MAX_ITERS: EXIT_MAX_ITERS, DIVERGED: EXIT_DIVERGED}

log = logging.getLogger("cdanse")


class UsageError(Exception):
    pass


def default_out() -> str:
    return os.environ.get("CDANSE_OUT", "cdanse_out")


def emit_plot(traces, path, title="", norm="err_h1") -> str:
    """Write an SVG of ``norm`` against iteration for ``[(label, IterationTrace)]``.

    Falls back to the H1 update norm when the requested column is empty.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to plot")
    curves = []
    for label, tr in traces:
        y = tr.column(norm)
        col = norm
        if not any(math.isfinite(v) and v > 0 for v in y):
            y, col = tr.column("update_h1"), "update_h1"
        curves.append((label, tr.column("k"), y, tr.status == DIVERGED))
    svg = render_log_plot(curves, title=title, ylabel=col)
    with open(path, "w") as fh:
        fh.write(svg)
    return path


def read_metadata(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            meta[k] = v
    return meta


def _apply_metadata(args, meta):
    """Fill solve flags from a metadata file written by a previous run."""
    def num(key, cast=float):
        v = meta.get(key, "")
        return None if v == "" else cast(v)

    args.re = num("Re")
    args.n = num("n", int)
    args.method = meta.get("method", args.method)
    args.cda = meta.get("cda", args.cda)
    n_H = num("n_H", int)
    args.H = None if n_H is None else 1.0 / n_H
    args.mu = num("mu")
    args.tol = num("tol")
    args.max_iters = num("max_iters", int)
    args.lid = num("lid_speed") if "lid_speed" in meta else args.lid
    args.aa_depth = num("aa_depth", int)
    if meta.get("aa_beta"):
        args.aa_beta = float(meta["aa_beta"])
    if args.re is None or args.n is None:
        raise UsageError("metadata file lacks Re or n")


def scenario_from_args(args) -> bench.Scenario:
    if args.re is None or not args.re > 0:
        raise UsageError("--re must be positive")
    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive integer")
    n_H = None
    if args.cda != "off":
        if args.H is None:
            raise UsageError(f"--cda {args.cda} needs --H")
        n_H = round(1.0 / args.H)
        if n_H < 1 or not math.isclose(1.0 / n_H, args.H, rel_tol=1e-9) or args.n % n_H:
            raise UsageError(f"--H {args.H} must be 1/k with k dividing n={args.n}")
        if args.cda == "penalty" and args.mu is None:
            raise UsageError("--cda penalty needs --mu")
    elif args.H is not None or args.mu is not None:
        raise UsageError("--H/--mu given but --cda is off")
    if args.aa_depth is not None and args.aa_depth < 0:
        raise UsageError("--aa-depth must be nonnegative")
    name = f"solve_Re{args.re:g}_n{args.n}_{args.method}_{args.cda}" + (f"_H1_{n_H}" if n_H else "")
    try:
        return bench.Scenario(name, args.re, args.n, n_H, args.method, args.cda, args.mu, args.aa_depth,
                              args.aa_beta, args.tol, args.max_iters, args.lid)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_solve(args) -> int:
    if args.from_metadata:
        _apply_metadata(args, read_metadata(args.from_metadata))
    sc = scenario_from_args(args)
    try:
        sc.solver_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = args.out or default_out()
    trace_path = os.path.join(out, "trace.csv")
    if os.path.exists(trace_path) and not args.force:
        raise UsageError(f"{trace_path} exists; use --force to overwrite")
    os.makedirs(out, exist_ok=True)
    cache = bench.ReferenceCache(os.path.join(out, "references"))
    try:
        ref = cache.get(sc.Re, sc.n, sc.lid_speed)
    except ContinuationError as exc:
        if sc.cda != "off":
            raise UsageError(f"no reference to sample observations from: {exc}") from exc
        # errors against a reference are optional for an un-nudged run
        log.warning("%s; error columns left blank", exc)
        ref = None
    res = bench.run_scenario(sc, ref, cache.space(sc.n))
    tr = res.trace
    tr.write_csv(trace_path)
    tr.write_metadata(os.path.join(out, "trace.meta"))
    if args.plot:
        emit_plot([(sc.name, tr)], os.path.join(out, "trace.svg"), title=sc.name,
                  norm="err_star" if sc.H else "err_h1")
    rate = "" if res.fit is None or not res.fit.ok else f" rate={res.fit.rate:.4g}"
    print(f"{sc.name}: {tr.status} after {tr.iterations} iterations{rate}")
    return STATUS_EXIT[tr.status]


def _suite_kwargs(name, args):
    kw = {"jobs": args.jobs}
    if args.n is not None:
        kw["n"] = args.n
    grid = name in ("enablement", "newtonbasin")
    if args.re_list and not grid:
        raise UsageError(f"suite {name} takes a single --re")
    if grid and (args.re is not None or args.re_list):
        kw["Re_grid"] = tuple(args.re_list or [args.re])
    elif args.re is not None:
        kw["Re"] = args.re
    if args.H_list:
        n_H = tuple(round(1.0 / h) for h in args.H_list)
        if name == "musweep":
            if len(n_H) != 1:
                raise UsageError("musweep takes one --H")
            kw["n_H"] = n_H[0]
        else:
            kw["n_H_grid"] = n_H
    return kw


def cmd_suite(args) -> int:
    name = args.name
    if name not in bench.SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {sorted(bench.SUITES)}")
    out = os.path.join(args.out or default_out(), name)
    if os.path.exists(os.path.join(out, "summary.txt")) and not args.force:
        raise UsageError(f"{out} already holds a report; use --force to overwrite")
    kw = _suite_kwargs(name, args)
    cache = bench.ReferenceCache(os.path.join(args.out or default_out(), "references"))
    report = bench.SUITES[name](cache=cache, **kw)
    report.write(out, plot=args.plot)
    print(report.summary_text(), end="")
    return EXIT_OK if report.passed else EXIT_CHECKS_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdanse", description="Steady cavity flow solvers with data nudging.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run one scenario")
    s.add_argument("--re", type=float)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--method", choices=("picard", "newton"), default="picard")
    s.add_argument("--cda", choices=("off", "penalty", "direct"), default="off")
    s.add_argument("--H", type=float)
    s.add_argument("--mu", type=float)
    s.add_argument("--aa-depth", type=int)
    s.add_argument("--aa-beta", type=float, default=1.0)
    s.add_argument("--lid", type=float, default=1.0, help="lid speed")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iters", type=int, default=200)
    s.add_argument("--out")
    s.add_argument("--plot", action="store_true")
    s.add_argument("--force", action="store_true")
    s.add_argument("--from-metadata", metavar="FILE")
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("suite", help="run an experiment suite")
    t.add_argument("name")
    t.add_argument("--re", type=float)
    t.add_argument("--re-list", type=float, nargs="+")
    t.add_argument("--n", type=int)
    t.add_argument("--H-list", type=float, nargs="+")
    t.add_argument("--out")
    t.add_argument("--plot", action="store_true")
    t.add_argument("--force", action="store_true")
    t.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    t.set_defaults(func=cmd_suite)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cdanse: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # internal failure, reported not raised
        log.debug("internal error", exc_info=True)
        print(f"cdanse: internal error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
