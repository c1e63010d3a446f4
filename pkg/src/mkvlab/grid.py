"""Rectangular lattices and densities sampled on them (d <= 2).

File format for a grid density: one header line

    d h1 [h2] n1 [n2] o1 [o2]

(dimension, spacing per axis, node count per axis, origin per axis),
followed by the node values in row-major order, whitespace separated.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import InvalidInputError

__all__ = ["Lattice", "GridDensity", "read_grid_density", "write_grid_density", "thread_count"]


def thread_count():
    """Worker cap from ``MKVLAB_THREADS`` (default 1)."""
    raw = os.environ.get("MKVLAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"MKVLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class Lattice:
    origin: tuple
    spacing: tuple
    counts: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in np.atleast_1d(self.origin))
        spacing = tuple(float(v) for v in np.atleast_1d(self.spacing))
        counts = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(origin) == len(spacing) == len(counts)):
            raise InvalidInputError("origin, spacing and counts must have one entry per axis")
        if not 1 <= len(origin) <= 2:
            raise InvalidInputError(f"lattices support d <= 2, got d = {len(origin)}")
        if any(h <= 0 or not np.isfinite(h) for h in spacing):
            raise InvalidInputError("lattice spacing must be positive and finite")
        if any(n < 2 for n in counts):
            raise InvalidInputError("each lattice axis needs at least two nodes")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def centered(cls, center, half_width, spacing):
        """Lattice covering ``center +- half_width`` per axis."""
        center = np.atleast_1d(np.asarray(center, dtype=float))
        half = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape)
        h = np.broadcast_to(np.asarray(spacing, dtype=float), center.shape)
        counts = np.ceil(2 * half / h).astype(int) + 1
        origin = center - 0.5 * (counts - 1) * h
        return cls(tuple(origin), tuple(h), tuple(counts))

    @property
    def dim(self):
        return len(self.counts)

    @property
    def size(self):
        return int(np.prod(self.counts))

    def axes(self):
        return [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.counts)]

    def points(self):
        """Node coordinates, shape ``(size, d)``, row-major (last axis fastest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def weights(self):
        """Trapezoidal quadrature weights, shaped like the node array."""
        w = np.ones(self.counts)
        for axis, (h, n) in enumerate(zip(self.spacing, self.counts)):
            line = np.full(n, h)
            line[[0, -1]] = 0.5 * h
            shape = [1] * self.dim
            shape[axis] = n
            w = w * line.reshape(shape)
        return w

    def integrate(self, values):
        return float(np.sum(self.weights() * np.asarray(values).reshape(self.counts)))


class GridDensity:
    """A nonnegative density tabulated on a :class:`Lattice`.

    ``declared_mass``, when given, is compared with the trapezoidal mass
    and a warning is emitted if they differ by more than 1%.
    """

    def __init__(self, lattice, values, declared_mass=None):
        values = np.array(values, dtype=float).reshape(lattice.counts)
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("grid density has non-finite values")
        if values.min() < 0:
            raise InvalidInputError(f"grid density has negative values (min {values.min():.3e})")
        values.setflags(write=False)
        self.lattice = lattice
        self.values = values
        if declared_mass is not None and abs(self.mass - declared_mass) > 0.01 * declared_mass:
            warnings.warn(
                f"grid density mass {self.mass:.6g} differs from declared mass {declared_mass:.6g} by more than 1%",
                stacklevel=2,
            )

    @classmethod
    def from_function(cls, lattice, func, declared_mass=None):
        """Tabulate ``func(points)`` where ``points`` has shape ``(size, d)``."""
        return cls(lattice, np.asarray(func(lattice.points())), declared_mass)

    @property
    def dim(self):
        return self.lattice.dim

    @cached_property
    def mass(self):
        return self.lattice.integrate(self.values)

    @cached_property
    def first_moment(self):
        pts = self.lattice.points()
        w = (self.lattice.weights() * self.values).ravel()
        return w @ pts

    @property
    def mean(self):
        return self.first_moment / self.mass

    def covariance(self):
        pts = self.lattice.points() - self.mean
        w = (self.lattice.weights() * self.values).ravel() / self.mass
        return (pts * w[:, None]).T @ pts

    def interpolate(self, x):
        """Multilinear interpolation, zero outside the lattice."""
        interp = RegularGridInterpolator(
            self.lattice.axes(), self.values, method="linear", bounds_error=False, fill_value=0.0
        )
        x = np.asarray(x, dtype=float)
        return interp(x.reshape(-1, self.dim)).reshape(x.shape[:-1])

    def __eq__(self, other):
        if not isinstance(other, GridDensity):
            return NotImplemented
        return self.lattice == other.lattice and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"GridDensity(counts={self.lattice.counts}, mass={self.mass:.6g})"


def write_grid_density(path, density):
    lat = density.lattice
    header = [str(lat.dim)]
    header += [repr(h) for h in lat.spacing]
    header += [str(n) for n in lat.counts]
    header += [repr(o) for o in lat.origin]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(header) + "\n")
        for row in density.values.reshape(lat.counts[0], -1):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid_density(path, declared_mass=None):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        body = fh.read().split()
    if not header:
        raise InvalidInputError(f"{path}: empty grid density file")
    try:
        d = int(header[0])
    except ValueError:
        raise InvalidInputError(f"{path}: first header token must be the dimension") from None
    if d not in (1, 2) or len(header) != 1 + 3 * d:
        raise InvalidInputError(f"{path}: header must read 'd h.. n.. origin..' with d in (1, 2)")
    try:
        spacing = [float(v) for v in header[1 : 1 + d]]
        counts = [int(v) for v in header[1 + d : 1 + 2 * d]]
        origin = [float(v) for v in header[1 + 2 * d :]]
        values = np.array([float(v) for v in body])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: unparseable number ({exc})") from None
    lattice = Lattice(tuple(origin), tuple(spacing), tuple(counts))
    if values.size != lattice.size:
        raise InvalidInputError(f"{path}: expected {lattice.size} values, found {values.size}")
    return GridDensity(lattice, values, declared_mass)
