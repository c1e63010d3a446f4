"""Euler-Maruyama simulation of the interacting particle system

    dX_i = -C X_i dt - (1/N) sum_j K (X_i - X_j) dt + sqrt(2D) dW_i.

For a linear interaction the pairwise sum equals ``N K (X_i - mean(X))``,
so one step costs O(N) rather than O(N^2).
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .errors import DegenerateInputError, InvalidInputError, SimulationBlowUpError
from .fokker_planck import GaussianState, gaussian_relative_entropy
from .grid import GridDensity, thread_count
from .linalg import _same_dim, _sym, as_matrix, psd_sqrt

__all__ = [
    "ParticleEnsemble",
    "Snapshot",
    "init_ensemble",
    "em_step",
    "advance",
    "simulate",
    "gaussian_fit_entropy",
    "write_snapshots",
    "save_checkpoint",
    "load_checkpoint",
]

_U64 = 1 << 64


def _seed64(seed):
    try:
        s = int(seed)
    except (TypeError, ValueError):
        raise InvalidInputError(f"seed must be an integer, got {seed!r}") from None
    if not -(1 << 63) <= s < _U64:
        raise InvalidInputError("seed must fit in 64 bits")
    return s % _U64


def _thin_factor(noise_factor, tol=1e-12):
    """``L`` with ``L L^T = S S^T`` and only as many columns as the rank.

    A kinetic model with ``D = diag(0, 1)`` then needs one normal per
    particle and step instead of two; the increments have the same law.
    """
    cov = _sym(noise_factor @ noise_factor.T)
    w, v = np.linalg.eigh(cov)
    keep = w > tol * max(w[-1], 1e-300)
    if not keep.any():
        return np.zeros((cov.shape[0], 0))
    return np.ascontiguousarray(v[:, keep] * np.sqrt(w[keep]))


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``N`` particle positions plus the data needed to continue the run.

    ``noise_factor`` is ``sqrt(2D)``; ``step_count`` counts completed steps
    and selects the random numbers of the next one.
    """

    positions: np.ndarray
    step_count: int
    dt: float
    seed: int
    noise_factor: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim != 2:
            raise InvalidInputError("positions must have shape (N, d)")
        if x.shape[0] < 2:
            raise InvalidInputError("an interacting ensemble needs N >= 2 particles")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("positions must be finite")
        s = as_matrix(self.noise_factor, "noise_factor")
        if s.shape[0] != x.shape[1]:
            raise InvalidInputError("noise factor dimension does not match the positions")
        dt = float(self.dt)
        if not (dt > 0 and math.isfinite(dt)):
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if int(self.step_count) < 0:
            raise InvalidInputError("step_count must be nonnegative")
        x.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "noise_factor", s)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "step_count", int(self.step_count))
        object.__setattr__(self, "seed", _seed64(self.seed))

    @classmethod
    def from_diffusion(cls, positions, D, dt, seed, step_count=0):
        return cls(positions, step_count, dt, seed, psd_sqrt(2.0 * as_matrix(D, "D")))

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def time(self):
        return self.step_count * self.dt

    def mean(self):
        return self.positions.mean(axis=0)

    def covariance(self):
        return np.atleast_2d(np.cov(self.positions, rowvar=False, ddof=1))

    def keys(self):
        return _kernels.particle_keys(np.uint64(self.seed), self.n)

    def replace(self, positions, step_count):
        return ParticleEnsemble(positions, step_count, self.dt, self.seed, self.noise_factor)


def init_ensemble(n, sampler, seed, D, dt):
    """Draw ``n`` i.i.d. initial positions (deterministic given ``seed``).

    Gaussian laws are sampled through a square-root factor of the
    covariance; grid densities by inverse CDF over the flattened lattice
    with a uniform jitter inside the chosen cell.
    """
    n = int(n)
    if n < 2:
        raise InvalidInputError("need n >= 2 particles")
    rng = np.random.default_rng(_seed64(seed))
    if isinstance(sampler, GaussianState):
        if sampler.is_degenerate():
            raise DegenerateInputError("Gaussian sampler has a singular covariance")
        factor = psd_sqrt(sampler.covariance)
        pos = sampler.mean + rng.standard_normal((n, sampler.dim)) @ factor.T
    elif isinstance(sampler, GridDensity):
        lat = sampler.lattice
        p = (lat.weights() * sampler.values).ravel()
        total = p.sum()
        if not total > 0:
            raise DegenerateInputError("grid density has zero mass")
        cdf = np.cumsum(p / total)
        idx = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), p.size - 1)
        h = np.asarray(lat.spacing)
        pos = lat.points()[idx] + (rng.random((n, lat.dim)) - 0.5) * h
    else:
        raise InvalidInputError("sampler must be a GaussianState or GridDensity")
    return ParticleEnsemble.from_diffusion(pos, D, dt, seed)


def _step_matrices(ens, C, K):
    c = as_matrix(C, "C")
    k = as_matrix(K, "K")
    _same_dim(("C", c), ("K", k))
    if c.shape[0] != ens.dim:
        raise InvalidInputError("model dimension does not match the ensemble")
    a = c + k
    limit = 0.1 / max(np.linalg.norm(a, 2), 1e-300)
    if ens.dt > limit:
        warnings.warn(f"dt = {ens.dt:g} exceeds the stability guide 0.1/||C+K|| = {limit:.3g}", stacklevel=3)
    m = np.eye(ens.dim) - ens.dt * a
    noise = _thin_factor(ens.noise_factor) * math.sqrt(ens.dt)
    return np.ascontiguousarray(m), np.ascontiguousarray(ens.dt * k), np.ascontiguousarray(noise)


def _run(ens, C, K, nsteps):
    m, kdt, noise = _step_matrices(ens, C, K)
    x = np.array(ens.positions, order="C")
    keys = ens.keys()
    threads = thread_count()
    if threads > 1:
        if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
            # probe OpenMP before TBB; an outdated TBB only produces a warning
            numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        done = _kernels.em_run_parallel(x, m, kdt, noise, keys, ens.step_count, nsteps, *_kernels.TABLES)
    else:
        done = _kernels.em_run_serial(x, m, kdt, noise, keys, ens.step_count, nsteps, *_kernels.TABLES)
    if done < nsteps or not np.all(np.isfinite(x)):
        raise SimulationBlowUpError(
            f"non-finite positions at step {ens.step_count + done + 1}; reduce dt (currently {ens.dt:g})"
        )
    return ens.replace(x, ens.step_count + nsteps)


def em_step(ens, C, K):
    """One Euler-Maruyama step of the particle system."""
    return _run(ens, C, K, 1)


def advance(ens, C, K, nsteps):
    nsteps = int(nsteps)
    if nsteps < 0:
        raise InvalidInputError("nsteps must be nonnegative")
    if nsteps == 0:
        return ens
    return _run(ens, C, K, nsteps)


@dataclass(frozen=True, eq=False)
class Snapshot:
    t: float
    step: int
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    @classmethod
    def of(cls, ens):
        return cls(ens.time, ens.step_count, ens.mean(), ens.covariance(), ens.n)


def simulate(model, sampler, n, t_end, dt, seed, times=None, return_ensemble=False):
    """Run the particle system for ``model`` (mass normalized to one) and
    record snapshots.

    ``times`` defaults to 201 equispaced points on ``[0, t_end]``; each is
    rounded to the nearest step. Returns the list of snapshots, and the
    final ensemble too when ``return_ensemble`` is set.
    """
    unit = model.unit_mass()
    t_end = float(t_end)
    dt = float(dt)
    if not (t_end >= 0 and math.isfinite(t_end)):
        raise InvalidInputError("t_end must be a nonnegative number")
    if times is None:
        times = np.linspace(0.0, t_end, 201)
    steps = np.unique(np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64))
    if steps.size and steps[0] < 0:
        raise InvalidInputError("snapshot times must be nonnegative")
    ens = init_ensemble(n, sampler, seed, unit.D, dt)
    snaps = []
    for target in steps:
        ens = advance(ens, unit.C, unit.K, int(target) - ens.step_count)
        snaps.append(Snapshot.of(ens))
    if return_ensemble:
        return snaps, ens
    return snaps


def gaussian_fit_entropy(snapshot, reference):
    """Relative entropy of the Gaussian fitted to an ensemble (or snapshot)
    with respect to ``reference``."""
    if isinstance(snapshot, ParticleEnsemble):
        snapshot = Snapshot.of(snapshot)
    d = snapshot.mean.size
    if snapshot.n < 10 * d * d:
        raise InvalidInputError(f"need at least {10 * d * d} particles for a {d}-dimensional fit, got {snapshot.n}")
    fit = GaussianState(snapshot.mean, _sym(snapshot.covariance))
    if fit.is_degenerate(1e-12):
        raise DegenerateInputError("fitted covariance is singular; use more particles")
    return gaussian_relative_entropy(fit, reference)


def snapshot_header(d, with_entropy=False):
    cols = ["t"] + [f"mean_{i}" for i in range(d)]
    cols += [f"cov_{i}{j}" for i in range(d) for j in range(i, d)]
    if with_entropy:
        cols.append("proxy_entropy")
    return cols


def snapshot_row(snap, entropy=None):
    d = snap.mean.size
    row = [snap.t, *snap.mean]
    row += [snap.covariance[i, j] for i in range(d) for j in range(i, d)]
    if entropy is not None:
        row.append(entropy)
    return [repr(float(v)) for v in row]


def write_snapshots(path, snapshots, entropies=None):
    """CSV with ``t``, mean components, covariance upper triangle and an
    optional proxy entropy column."""
    d = snapshots[0].mean.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(snapshot_header(d, entropies is not None))
        for i, s in enumerate(snapshots):
            w.writerow(snapshot_row(s, None if entropies is None else entropies[i]))


def save_checkpoint(path, ens):
    """ASCII header ``N d step seed`` then row-major little-endian binary64."""
    with open(path, "wb") as fh:
        fh.write(f"{ens.n} {ens.dim} {ens.step_count} {ens.seed}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(ens.positions, dtype="<f8").tobytes())


def load_checkpoint(path, D, dt):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(header) != 4:
        raise InvalidInputError(f"{path}: checkpoint header must read 'N d step seed'")
    n, d, step, seed = (int(v) for v in header)
    pos = np.frombuffer(payload, dtype="<f8")
    if pos.size != n * d:
        raise InvalidInputError(f"{path}: expected {n * d} values, found {pos.size}")
    return ParticleEnsemble.from_diffusion(pos.reshape(n, d), D, dt, seed, step)
