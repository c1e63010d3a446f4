"""Command line front end: ``mkvlab {check,flow,bound,particles}``.

Exit status: 0 when every asserted inequality or identity held, 1 when
one was violated (the offending time and both sides are reported), 2 for
unreadable input or failed hypotheses.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .errors import MkvError
from .fokker_planck import ckp_check, fp_density, gaussian_relative_entropy
from .grid import GridDensity, write_grid_density
from .linalg import is_admissible, is_almost_positively_stable
from .mckean_vlasov import (
    EntropyBoundTrace,
    first_moment,
    mkv_entropy_bound,
    shift,
    solve_law,
)
from .particles import gaussian_fit_entropy, save_checkpoint, simulate, snapshot_header, snapshot_row
from .scenario import parse_scenario

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 1, 2


class Violation:
    def __init__(self, what, t, lhs, rhs):
        self.what, self.t, self.lhs, self.rhs = what, t, lhs, rhs

    def __str__(self):
        return f"VIOLATED {self.what} at t={self.t!r}: lhs={self.lhs!r} rhs={self.rhs!r}"


class Run:
    """Output bookkeeping: files written here are removed if the run fails."""

    def __init__(self, out_dir, quiet):
        self.out_dir = Path(out_dir)
        self.quiet = quiet
        self.created = []
        self.violations = []

    def say(self, text=""):
        if not self.quiet:
            print(text)

    def path(self, name):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / name
        self.created.append(p)
        return p

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])

    def cleanup(self):
        for p in self.created:
            try:
                p.unlink()
            except FileNotFoundError:
                pass

    def violate(self, what, t, lhs, rhs):
        self.violations.append(Violation(what, t, lhs, rhs))


class _Hypothesis(MkvError):
    """A theorem hypothesis needed by the requested run does not hold."""


def _fmt_matrix(a):
    return "[" + ", ".join("[" + ", ".join(f"{v:.10g}" for v in row) + "]" for row in np.atleast_2d(a)) + "]"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def run_check(sc, run):
    """Hypotheses, rates, equilibrium covariance and shift limit."""
    run.say(sc.describe())
    run.say()
    stab = is_almost_positively_stable(sc.C, sc.cluster_tol, sc.rank_tol)
    run.say(f"C almost-positively stable: {'yes' if stab else 'no (' + stab.reason + ')'}")
    report = is_admissible(sc.C + sc.mass * sc.K, sc.D, sc.cluster_tol, sc.rank_tol)
    run.say(f"(C + m0 K, D): {report.describe()}")
    problems = []
    if not stab:
        problems.append(f"C is not almost-positively stable: {stab.reason}")
    if not report:
        problems.append(f"(C + m0 K, D) is {report.describe()}")
    if problems:
        raise _Hypothesis("; ".join(problems))
    model = sc.model()
    eq = model.equilibrium()
    run.say(f"equilibrium covariance: {_fmt_matrix(eq.covariance)}")
    summary = model.spectral()
    run.say(f"mu = {summary.mu!r}, n1 = {summary.n1}")
    run.say(f"nu = {summary.nu!r}, n2 = {summary.n2}")
    s_inf = summary.ker_projection @ model.m1 / model.m0
    if np.all(s_inf == 0):
        run.say("s_inf = 0")
    else:
        run.say(f"s_inf = {[float(v) for v in s_inf]}")
    run.say("hypotheses of the explicit solution and of the decay bound: hold")
    lines = [
        f"admissibility\t{report.describe()}",
        f"almost_positively_stable\t{bool(stab)}",
        f"mu\t{summary.mu!r}",
        f"n1\t{summary.n1}",
        f"nu\t{summary.nu!r}",
        f"n2\t{summary.n2}",
        f"s_inf\t{' '.join(repr(float(v)) for v in s_inf)}",
        f"equilibrium_covariance\t{' '.join(repr(float(v)) for v in eq.covariance.ravel())}",
    ]
    with open(run.path("check.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def run_flow(sc, run):
    """Explicit solution along the time grid.

    Gaussian data: mean, covariance and shift per time, the relative
    entropy to the shifted equilibrium and a CKP check (d <= 2). Asserted:
    the mean equals ``e^{-Ct} m1 / m0`` and the CKP inequality.
    Grid data: mass and first moment of the solution on the initial
    lattice, and the final density as a grid file.
    """
    model = sc.model()
    eq = model.equilibrium()
    times = sc.times()
    d = sc.dim
    try:
        s_inf = model.spectral().ker_projection @ model.m1 / model.m0
    except MkvError:
        s_inf = None
    ref = eq.shifted(s_inf) if s_inf is not None else None
    if sc.gaussian:
        header = ["t"] + [f"shift_{i}" for i in range(d)] + [f"mean_{i}" for i in range(d)]
        header += [f"cov_{i}{j}" for i in range(d) for j in range(i, d)]
        header += ["H", "l1_distance", "sqrt_2H"]
        rows = []
        for t in times:
            law = solve_law(model, sc.initial, t)
            s = shift(model, t)
            moment = first_moment(model, t) / model.m0
            err = float(np.abs(law.mean - moment).max())
            if err > 1e-10 * max(1.0, float(np.abs(moment).max())):
                run.violate("mean = e^{-Ct} m1", t, err, 1e-10)
            h = l1 = bound = math.nan
            if ref is not None:
                h = gaussian_relative_entropy(law, ref)
                if d <= 2 and not law.is_degenerate():
                    res = ckp_check(law, ref)
                    l1, bound = res.l1_distance, math.sqrt(2 * res.entropy)
                    if not res.holds:
                        run.violate("CKP inequality", t, l1, bound)
            cov = law.covariance
            rows.append([t, *s, *law.mean, *[cov[i, j] for i in range(d) for j in range(i, d)], h, l1, bound])
        run.csv("flow.csv", header, rows)
        run.say(f"flow: {len(rows)} times written to {run.out_dir / 'flow.csv'}")
        return
    rho0 = sc.initial
    lat = rho0.lattice
    pts = lat.points()
    header = ["t", "mass"] + [f"first_moment_{i}" for i in range(d)]
    rows = []
    values = rho0.values
    for t in times:
        values = rho0.values if t == 0 else fp_density(model.A, sc.D, rho0, pts - shift(model, t), t)
        dens = GridDensity(lat, values)
        rows.append([t, dens.mass, *dens.first_moment])
        if ref is not None and abs(dens.mass - 1.0) <= 0.01 and sc.mass == 1.0:
            res = ckp_check(dens, ref)
            if not res.holds:
                run.violate("CKP inequality", t, res.l1_distance, math.sqrt(2 * res.entropy))
    run.csv("flow.csv", header, rows)
    write_grid_density(run.path("density_final.txt"), GridDensity(lat, values))
    run.say(f"flow: {len(rows)} times written to {run.out_dir / 'flow.csv'}")


def run_bound(sc, run):
    """Entropy trace against the mean-field decay envelope."""
    if not sc.gaussian:
        raise _Hypothesis("the bound run needs a Gaussian initial law")
    model = sc.model()
    trace = mkv_entropy_bound(model, sc.initial, sc.times())
    run.csv("bound.csv", EntropyBoundTrace.columns, trace.rows())
    run.say(f"fitted constant c = {trace.constant!r} (first half of grid: {trace.half_constant!r})")
    run.say(f"max |decomposition residual| = {float(np.abs(trace.residual).max())!r}")
    env = trace.constant * trace.envelope
    for i, t in enumerate(trace.times):
        if trace.h_total[i] > env[i] * (1 + 1e-12) + 1e-300:
            run.violate("entropy bound", t, trace.h_total[i], env[i])
        if abs(trace.residual[i]) > 1e-8:
            tot = trace.h_total[i]
            run.violate("entropy decomposition", t, tot, tot - trace.residual[i])
        if trace.shift_error[i] > trace.shift_bound[i] * (1 + 1e-9) + 1e-300:
            run.violate("shift convergence", t, trace.shift_error[i], trace.shift_bound[i])
    if not trace.bounded:
        i = int(np.argmax(trace.ratio))
        run.violate("bounded ratio H/E", trace.times[i], trace.constant, trace.half_constant * 1.15)


def run_particles(sc, run):
    """Particle simulation; snapshots on the time grid (rounded to steps).

    Asserted for Gaussian data: the empirical mean stays within
    ``5 sqrt(tr S(t) / N) + 10 dt`` of ``e^{-Ct} m1 / m0``.
    """
    model = sc.model()
    snaps, ens = simulate(model, sc.initial, sc.n, sc.t_end, sc.dt, sc.seed, sc.times(), return_ensemble=True)
    unit = model.unit_mass()
    d = sc.dim
    rows = []
    for snap in snaps:
        moment = first_moment(unit, snap.t)
        if sc.gaussian:
            law = solve_law(model, sc.initial, snap.t)
            tol = 5 * math.sqrt(np.trace(law.covariance) / snap.n) + 10 * sc.dt
            ent = math.nan
            if not law.is_degenerate() and snap.n >= 10 * d * d:
                ent = gaussian_fit_entropy(snap, law)
        else:
            tol = 5 * math.sqrt(np.trace(snap.covariance) / snap.n) + 10 * sc.dt
            ent = math.nan
        err = float(np.linalg.norm(snap.mean - moment, np.inf))
        if err > tol:
            run.violate("particle mean tracks e^{-Ct} m1", snap.t, err, tol)
        rows.append(snapshot_row(snap, ent))
    with open(run.path("particles.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(snapshot_header(d, True))
        w.writerows(rows)
    save_checkpoint(run.path("ensemble.bin"), ens)
    run.say(f"particles: {len(snaps)} snapshots of {sc.n} particles written to {run.out_dir / 'particles.csv'}")


COMMANDS = {"check": run_check, "flow": run_flow, "bound": run_bound, "particles": run_particles}


def build_parser():
    p = argparse.ArgumentParser(prog="mkvlab", description="Linear McKean-Vlasov toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        sp.add_argument("--scenario", required=True, help="scenario document (TOML)")
        sp.add_argument("--out", help="output directory (overrides the scenario)")
        sp.add_argument("--tol-rank", type=float, help="relative singular value cutoff")
        sp.add_argument("--tol-cluster", type=float, help="eigenvalue clustering tolerance")
        sp.add_argument("--quiet", action="store_true", help="suppress the report")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        sc = parse_scenario(args.scenario).with_tolerances(args.tol_rank, args.tol_cluster)
    except MkvError as exc:
        print(f"mkvlab: {exc}", file=sys.stderr)
        return EXIT_INPUT
    run = Run(sc.output_path(args.out), args.quiet)
    try:
        COMMANDS[args.command](sc, run)
    except (MkvError, OSError) as exc:
        run.cleanup()
        print(f"mkvlab: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BaseException:
        run.cleanup()
        raise
    for v in run.violations:
        print(str(v), file=sys.stderr)
    if run.violations:
        return EXIT_VIOLATION
    run.say("all checks passed")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
