"""Scenario documents (TOML).

A minimal document::

    name = "kinetic"

    [matrices.C]
    dim = 2
    data = [0.0, 0.0, 0.0, 1.0]        # row-major

    [matrices.K]
    dim = 2
    data = [0.0, -1.0, 1.0, 0.0]

    [matrices.D]
    dim = 2
    data = [0.0, 0.0, 0.0, 1.0]

    [initial]
    kind = "gaussian"                  # or "grid", with  path = "rho0.txt"
    mean = [1.0, 1.0]
    covariance = { dim = 2, data = [1.0, 0.0, 0.0, 1.0] }

Optional sections, with their defaults: ``mass = 1.0`` (top level),
``[time] t_end = 10.0, samples = 200, spacing = "linear"``,
``[particles] n = 10000, dt = 0.001, seed = 0``,
``[tolerances] rank = 1e-9, cluster = 1e-7`` and
``[output] directory = "mkvlab-out"``. Relative paths are resolved
against the directory holding the document.
"""
from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import MkvError, ScenarioError
from .fokker_planck import GaussianState
from .grid import read_grid_density
from .linalg import CLUSTER_TOL, RANK_TOL

__all__ = ["Scenario", "parse_scenario", "loads_scenario", "dumps_scenario", "time_grid"]

DEFAULTS = {
    "mass": 1.0,
    "t_end": 10.0,
    "samples": 200,
    "spacing": "linear",
    "n": 10_000,
    "dt": 1e-3,
    "seed": 0,
    "rank": RANK_TOL,
    "cluster": CLUSTER_TOL,
    "directory": "mkvlab-out",
}
_GEOMETRIC_START = 1e-4  # first positive time of a geometric grid, relative to t_end


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    C: np.ndarray
    K: np.ndarray
    D: np.ndarray
    initial: object  # GaussianState or GridDensity
    initial_path: str | None = None
    mass: float = DEFAULTS["mass"]
    t_end: float = DEFAULTS["t_end"]
    samples: int = DEFAULTS["samples"]
    spacing: str = DEFAULTS["spacing"]
    n: int = DEFAULTS["n"]
    dt: float = DEFAULTS["dt"]
    seed: int = DEFAULTS["seed"]
    rank_tol: float = DEFAULTS["rank"]
    cluster_tol: float = DEFAULTS["cluster"]
    output_dir: str = DEFAULTS["directory"]
    base_dir: str = "."

    @property
    def dim(self):
        return self.C.shape[0]

    @property
    def gaussian(self):
        return isinstance(self.initial, GaussianState)

    @property
    def m1(self):
        if self.gaussian:
            return self.mass * self.initial.mean
        return self.initial.first_moment

    def times(self):
        return time_grid(self.t_end, self.samples, self.spacing)

    def output_path(self, override=None):
        if override is not None:
            return Path(override)
        p = Path(self.output_dir)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_tolerances(self, rank=None, cluster=None):
        return replace(
            self,
            rank_tol=self.rank_tol if rank is None else float(rank),
            cluster_tol=self.cluster_tol if cluster is None else float(cluster),
        )

    def model(self):
        from .mckean_vlasov import ModelTriple

        return ModelTriple(self.C, self.K, self.D, self.m1, self.mass, self.rank_tol, self.cluster_tol)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        scalars = (
            "name",
            "initial_path",
            "mass",
            "t_end",
            "samples",
            "spacing",
            "n",
            "dt",
            "seed",
            "rank_tol",
            "cluster_tol",
            "output_dir",
        )
        return (
            all(getattr(self, f) == getattr(other, f) for f in scalars)
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in "CKD")
            and self.initial == other.initial
        )

    def describe(self):
        """Every setting, defaults included, one per line."""
        lines = [
            f"scenario: {self.name}",
            f"dimension: {self.dim}",
            f"mass m0: {self.mass!r}",
            f"initial: {'gaussian' if self.gaussian else 'grid ' + str(self.initial_path)}",
            f"time grid: t_end={self.t_end!r}, samples={self.samples}, spacing={self.spacing}",
            f"particles: n={self.n}, dt={self.dt!r}, seed={self.seed}",
            f"tolerances: rank={self.rank_tol!r}, cluster={self.cluster_tol!r}",
            f"output: {self.output_dir}",
        ]
        return "\n".join(lines)


def time_grid(t_end, samples, spacing="linear"):
    """``samples`` times on ``[0, t_end]``. A geometric grid starts at 0 and
    then spaces ``samples - 1`` points logarithmically from
    ``1e-4 * t_end``."""
    if samples < 2:
        raise ScenarioError("need at least two samples", "time.samples")
    if spacing == "linear":
        return np.linspace(0.0, t_end, samples)
    if spacing == "geometric":
        return np.concatenate([[0.0], np.geomspace(_GEOMETRIC_START * t_end, t_end, samples - 1)])
    raise ScenarioError(f"unknown spacing {spacing!r} (use 'linear' or 'geometric')", "time.spacing")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Source:
    """Finds the line of a dotted field in the raw document."""

    def __init__(self, text):
        self.lines = text.splitlines()

    def line_of(self, field):
        parts = field.split(".")
        section = ".".join(parts[:-1])
        current = ""
        for i, line in enumerate(self.lines, 1):
            m = re.match(r"^\s*\[+\s*([^\]]+?)\s*\]+", line)
            if m:
                current = re.sub(r"[\s\"']", "", m.group(1))
                if current == field:
                    return i
                continue
            m = re.match(r"^\s*[\"']?([A-Za-z0-9_\-]+)[\"']?\s*=", line)
            if m and m.group(1) == parts[-1] and current == section:
                return i
        return self.line_of(section) if section else None


class _Reader:
    def __init__(self, doc, source):
        self.doc = doc
        self.source = source

    def error(self, message, field):
        return ScenarioError(message, field, self.source.line_of(field))

    def get(self, field, default=None, required=False):
        node = self.doc
        for part in field.split("."):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise self.error("missing required entry", field)
                return default
            node = node[part]
        return node

    def number(self, field, default=None, required=False, kind=float, positive=False, nonnegative=False):
        raw = self.get(field, default, required)
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise self.error(f"expected a number, got {raw!r}", field)
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise self.error(f"expected an integer, got {raw!r}", field)
            value = int(raw)
        else:
            value = float(raw)
            if not math.isfinite(value):
                raise self.error("value must be finite", field)
        if positive and not value > 0:
            raise self.error(f"must be positive, got {value!r}", field)
        if nonnegative and value < 0:
            raise self.error(f"must be nonnegative, got {value!r}", field)
        return value

    def vector(self, field, required=True):
        raw = self.get(field, required=required)
        if raw is None:
            return None
        if not isinstance(raw, list) or not raw:
            raise self.error("expected a non-empty array of numbers", field)
        try:
            v = np.array([float(x) for x in raw if not isinstance(x, bool)], dtype=float)
        except (TypeError, ValueError):
            raise self.error("array entries must be numbers", field) from None
        if v.size != len(raw) or not np.all(np.isfinite(v)):
            raise self.error("array entries must be finite numbers", field)
        return v

    def matrix(self, field):
        node = self.get(field, required=True)
        if not isinstance(node, dict):
            raise self.error("a matrix is a table with 'dim' and row-major 'data'", field)
        dim = self.number(field + ".dim", required=True, kind=int, positive=True)
        data = self.vector(field + ".data")
        if data.size != dim * dim:
            raise self.error(f"expected {dim * dim} entries for dim = {dim}, got {data.size}", field + ".data")
        return data.reshape(dim, dim)


def loads_scenario(text, base_dir="."):
    """Parse a scenario document given as a string."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"syntax error: {exc}", None, int(m.group(1)) if m else None) from None
    r = _Reader(doc, _Source(text))

    name = r.get("name", "unnamed")
    if not isinstance(name, str):
        raise r.error("name must be a string", "name")
    mats = {k: r.matrix(f"matrices.{k}") for k in "CKD"}
    dims = {k: v.shape[0] for k, v in mats.items()}
    for other in "KD":
        if dims[other] != dims["C"]:
            raise ScenarioError(
                f"dimension mismatch: matrices.C is {dims['C']}x{dims['C']} "
                f"but matrices.{other} is {dims[other]}x{dims[other]}",
                f"matrices.C, matrices.{other}",
                r.source.line_of(f"matrices.{other}.dim"),
            )
    d = dims["C"]

    mass = r.number("mass", DEFAULTS["mass"], positive=True)
    kind = r.get("initial.kind", required=True)
    initial_path = None
    if kind == "gaussian":
        mean = r.vector("initial.mean")
        cov = r.matrix("initial.covariance")
        if mean.size != d:
            raise r.error(f"mean has length {mean.size} but the matrices are {d}x{d}", "initial.mean")
        if cov.shape[0] != d:
            raise r.error(f"covariance is {cov.shape[0]}x{cov.shape[0]} but the matrices are {d}x{d}", "initial.covariance.dim")
        try:
            initial = GaussianState(mean, cov)
        except MkvError as exc:
            raise r.error(str(exc), "initial.covariance") from None
    elif kind == "grid":
        initial_path = r.get("initial.path", required=True)
        if not isinstance(initial_path, str):
            raise r.error("path must be a string", "initial.path")
        path = Path(initial_path)
        if not path.is_absolute():
            path = Path(base_dir) / path
        if not path.is_file():
            raise r.error(f"grid density file not found: {path}", "initial.path")
        try:
            initial = read_grid_density(path, declared_mass=mass)
        except MkvError as exc:
            raise r.error(str(exc), "initial.path") from None
        if initial.dim != d:
            raise r.error(f"grid density is {initial.dim}-dimensional but the matrices are {d}x{d}", "initial.path")
    else:
        raise r.error(f"initial.kind must be 'gaussian' or 'grid', got {kind!r}", "initial.kind")

    t_end = r.number("time.t_end", DEFAULTS["t_end"], positive=True)
    samples = r.number("time.samples", DEFAULTS["samples"], kind=int)
    if samples < 2:
        raise r.error("need at least two samples", "time.samples")
    spacing = r.get("time.spacing", DEFAULTS["spacing"])
    if spacing not in ("linear", "geometric"):
        raise r.error(f"spacing must be 'linear' or 'geometric', got {spacing!r}", "time.spacing")

    n = r.number("particles.n", DEFAULTS["n"], kind=int)
    if n < 2:
        raise r.error("need at least two particles", "particles.n")
    dt = r.number("particles.dt", DEFAULTS["dt"], positive=True)
    seed = r.number("particles.seed", DEFAULTS["seed"], kind=int)
    if not -(1 << 63) <= seed < (1 << 64):
        raise r.error("seed must fit in 64 bits", "particles.seed")

    rank_tol = r.number("tolerances.rank", DEFAULTS["rank"], positive=True)
    cluster_tol = r.number("tolerances.cluster", DEFAULTS["cluster"], positive=True)
    out = r.get("output.directory", DEFAULTS["directory"])
    if not isinstance(out, str):
        raise r.error("directory must be a string", "output.directory")

    return Scenario(
        name,
        mats["C"],
        mats["K"],
        mats["D"],
        initial,
        initial_path,
        mass,
        t_end,
        samples,
        spacing,
        n,
        dt,
        seed,
        rank_tol,
        cluster_tol,
        out,
        str(base_dir),
    )


def parse_scenario(path):
    """Read and validate a scenario document from ``path``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    except UnicodeDecodeError as exc:
        raise ScenarioError(f"scenario is not valid UTF-8: {exc}") from None
    return loads_scenario(text, base_dir=path.parent)


def _matrix_table(a):
    return {"dim": int(a.shape[0]), "data": [float(v) for v in a.ravel()]}


def dumps_scenario(s):
    """Serialize with every default written out explicitly."""
    if s.gaussian:
        initial = {
            "kind": "gaussian",
            "mean": [float(v) for v in s.initial.mean],
            "covariance": _matrix_table(s.initial.covariance),
        }
    else:
        initial = {"kind": "grid", "path": s.initial_path}
    doc = {
        "name": s.name,
        "mass": float(s.mass),
        "matrices": {k: _matrix_table(getattr(s, k)) for k in "CKD"},
        "initial": initial,
        "time": {"t_end": float(s.t_end), "samples": int(s.samples), "spacing": s.spacing},
        "particles": {"n": int(s.n), "dt": float(s.dt), "seed": int(s.seed)},
        "tolerances": {"rank": float(s.rank_tol), "cluster": float(s.cluster_tol)},
        "output": {"directory": s.output_dir},
    }
    return tomli_w.dumps(doc)
