"""Explicit solution of the linear McKean-Vlasov equation

    d rho/dt = div( C x rho + (int K (x - y) rho(y) dy) rho + D grad rho ).

The solution is the Fokker-Planck solution for the drift ``C + m0 K``
translated by the shift ``s(t) = (e^{-Ct} - e^{-(C + m0 K)t}) m1 / m0``.
Everything below builds on that reduction.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidInputError, NotAdmissibleError
from .fokker_planck import (
    GaussianState,
    equilibrium,
    fp_density,
    gaussian_flow,
    gaussian_relative_entropy,
    relative_entropy_from_deviation,
)
from .grid import GridDensity, Lattice
from .linalg import (
    CLUSTER_TOL,
    RANK_TOL,
    SemigroupBound,
    _same_dim,
    as_matrix,
    default_bound_grid,
    expm,
    is_admissible,
    matrix_semigroup_bound,
    restricted_semigroup_bound,
    spectral_summary,
)

__all__ = [
    "ModelTriple",
    "normalize_mass",
    "first_moment",
    "shift",
    "shift_general",
    "shift_limit",
    "ShiftTrajectory",
    "shift_trajectory",
    "XiBound",
    "xi_bound",
    "solve",
    "solve_law",
    "Decomposition",
    "entropy_decomposition",
    "EntropyBoundTrace",
    "mkv_entropy_bound",
    "pde_residual",
]


def normalize_mass(K, rho0_mass):
    """Effective interaction ``m0 K`` of the unit-mass reformulation."""
    k = as_matrix(K, "K")
    m0 = float(rho0_mass)
    if not math.isfinite(m0) or m0 <= 0:
        raise InvalidInputError(f"mass must be positive, got {rho0_mass}")
    return m0 * k


@dataclass(frozen=True, eq=False)
class ModelTriple:
    """Drift ``C``, interaction ``K``, diffusion ``D``, mass ``m0`` and the
    first moment ``m1 = int x rho0`` of the initial datum.

    Construction checks that ``(C + m0 K, D)`` is an admissible pair.
    """

    C: np.ndarray
    K: np.ndarray
    D: np.ndarray
    m1: np.ndarray
    m0: float = 1.0
    rank_tol: float = RANK_TOL
    cluster_tol: float = CLUSTER_TOL
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        c = as_matrix(self.C, "C")
        k = as_matrix(self.K, "K")
        d_ = as_matrix(self.D, "D")
        _same_dim(("C", c), ("K", k), ("D", d_))
        m1 = np.array(self.m1, dtype=float).reshape(-1)
        if m1.size != c.shape[0]:
            raise InvalidInputError(f"m1 has length {m1.size}, expected {c.shape[0]}")
        if not np.all(np.isfinite(m1)):
            raise InvalidInputError("m1 has non-finite entries")
        m0 = float(self.m0)
        if not math.isfinite(m0) or m0 <= 0:
            raise InvalidInputError(f"mass m0 must be positive, got {self.m0}")
        for name, arr in (("C", c), ("K", k), ("D", d_), ("m1", m1)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "m0", m0)
        if self.check:
            report = is_admissible(self.A, d_, self.cluster_tol, self.rank_tol)
            if not report:
                raise NotAdmissibleError(f"(C + m0 K, D) is {report.describe()}")

    @classmethod
    def from_initial(cls, C, K, D, rho0, m0=1.0, **kw):
        """Take ``m1`` from an initial law (Gaussian of unit mass scaled by
        ``m0``, or a grid density carrying its own mass)."""
        if isinstance(rho0, GaussianState):
            m1 = float(m0) * rho0.mean
        elif isinstance(rho0, GridDensity):
            m1 = rho0.first_moment
        else:
            raise InvalidInputError("rho0 must be a GaussianState or GridDensity")
        return cls(C, K, D, m1, m0, **kw)

    @property
    def dim(self):
        return self.C.shape[0]

    @property
    def A(self):
        """Drift of the associated Fokker-Planck equation, ``C + m0 K``."""
        return self.C + normalize_mass(self.K, self.m0)

    def unit_mass(self):
        """Equivalent unit-mass model: ``K <- m0 K`` and ``m1 <- m1 / m0``."""
        if self.m0 == 1.0:
            return self
        return ModelTriple(
            self.C, self.A - self.C, self.D, self.m1 / self.m0, 1.0, self.rank_tol, self.cluster_tol, check=False
        )

    def spectral(self):
        return spectral_summary(self.C, self.A - self.C, self.cluster_tol, self.rank_tol)

    def equilibrium(self):
        return equilibrium(self.A, self.D, self.cluster_tol, self.rank_tol)


# ---------------------------------------------------------------------------
# Moments and shift
# ---------------------------------------------------------------------------


def _check_time(t):
    t = float(t)
    if not math.isfinite(t):
        raise InvalidInputError("t must be finite")
    if t < 0:
        raise DomainError(f"t must be nonnegative, got {t}")
    return t


def first_moment(model, t):
    """``m1(t) = e^{-Ct} m1``: the interaction does not move the centre of mass."""
    t = _check_time(t)
    return expm(model.C, -t) @ model.m1


def shift(model, t):
    t = _check_time(t)
    return (expm(model.C, -t) - expm(model.A, -t)) @ model.m1 / model.m0


def shift_general(model, s0, t):
    """Solution of ``s' = K e^{-Ct} m1 - (C + m0 K) s`` with ``s(0) = s0``."""
    s0 = np.asarray(s0, dtype=float).reshape(-1)
    if s0.size != model.dim:
        raise InvalidInputError(f"s0 has length {s0.size}, expected {model.dim}")
    t = _check_time(t)
    return shift(model, t) + expm(model.A, -t) @ s0


def shift_rhs(model, s, t):
    """Right-hand side of the shift ODE."""
    return model.K @ (expm(model.C, -t) @ model.m1) - model.A @ np.asarray(s, dtype=float)


def shift_limit(model):
    """``s_inf = P_ker(C) m1 / m0``; needs C almost-positively stable and
    ``C + m0 K`` positively stable."""
    summary = model.spectral()
    return summary.ker_projection @ model.m1 / model.m0


@dataclass(frozen=True, eq=False)
class ShiftTrajectory:
    """``s(t)`` together with its limit and the spectral rates governing it."""

    model: ModelTriple
    s_infinity: np.ndarray
    mu: float
    nu: float
    n1: int
    n2: int
    ker_projection: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return shift(self.model, float(t))
        return np.array([shift(self.model, float(v)) for v in t])

    def error(self, t):
        """``|s(t) - s_inf|`` computed without cancellation against ``s_inf``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        m = self.model
        comp = m.m1 - self.ker_projection @ m.m1
        out = np.empty(t.size)
        for i, v in enumerate(t):
            diff = (expm(m.C, -v) @ comp - expm(m.A, -v) @ m.m1) / m.m0
            out[i] = np.linalg.norm(diff)
        return out


def shift_trajectory(model):
    summary = model.spectral()
    return ShiftTrajectory(
        model,
        summary.ker_projection @ model.m1 / model.m0,
        summary.mu,
        summary.nu,
        summary.n1,
        summary.n2,
        summary.ker_projection,
    )


# ---------------------------------------------------------------------------
# Convergence of xi(t) = e^{-At} - e^{-(A+B)t}
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class XiBound:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    complement: SemigroupBound
    full: SemigroupBound

    @property
    def holds(self):
        return bool(np.all(self.lhs <= self.rhs * (1.0 + 1e-9) + 1e-300))

    def worst(self):
        """Index of the largest ``lhs / rhs``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.rhs > 0, self.lhs / self.rhs, np.where(self.lhs > 0, np.inf, 0.0))
        return int(np.argmax(r))


def xi_bound(A, Bm, t, x, fit_times=None, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Both sides of ``|xi(t) x - P x| <= c_A (1+t^n2) e^{-beta t} |(I-P)x|
    + c_{A+B} (1+t^n1) e^{-alpha t} |x|`` with ``P`` the projection on
    ``ker A``.

    ``t`` may be a scalar or an array. The constants are fitted on
    ``fit_times`` (default: a long dense grid) merged with ``t`` itself, so
    the inequality holds by construction wherever it was fitted and the
    falsifiable content is the rate data.
    """
    a = as_matrix(A, "A")
    b = as_matrix(Bm, "Bm")
    _same_dim(("A", a), ("Bm", b))
    x = np.asarray(x, dtype=float).reshape(-1)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if times.min() < 0:
        raise DomainError("t must be nonnegative")
    summary = spectral_summary(a, b, cluster_tol, rank_tol)
    def grid(rate, power):
        base = default_bound_grid(rate, power) if fit_times is None else np.asarray(fit_times, dtype=float)
        return np.union1d(base, times)

    full = matrix_semigroup_bound(a + b, grid(summary.mu, summary.n1), cluster_tol, rank_tol)
    comp = restricted_semigroup_bound(a, [0.0], cluster_tol, rank_tol)
    if comp.constant > 0:
        comp = restricted_semigroup_bound(a, grid(comp.rate, comp.power), cluster_tol, rank_tol)
    p = summary.ker_projection
    cx = x - p @ x
    lhs = np.empty(times.size)
    for i, v in enumerate(times):
        lhs[i] = np.linalg.norm(expm(a, -v) @ cx - expm(a + b, -v) @ x)
    rhs = comp.envelope(times) * np.linalg.norm(cx) + full.envelope(times) * np.linalg.norm(x)
    return XiBound(times, lhs, rhs, comp, full)


# ---------------------------------------------------------------------------
# Solution
# ---------------------------------------------------------------------------


def _check_initial(model, rho0):
    if isinstance(rho0, GaussianState):
        if rho0.dim != model.dim:
            raise InvalidInputError("initial law dimension does not match the model")
        expected = model.m0 * rho0.mean
        if np.linalg.norm(expected - model.m1) > 1e-8 * max(1.0, np.linalg.norm(model.m1)):
            raise InvalidInputError("model m1 does not match m0 times the initial mean")
    elif isinstance(rho0, GridDensity):
        if rho0.dim != model.dim:
            raise InvalidInputError("initial density dimension does not match the model")
        if abs(rho0.mass - model.m0) > 0.01 * model.m0:
            raise InvalidInputError(f"initial mass {rho0.mass:.6g} does not match m0 = {model.m0:.6g}")
        if np.linalg.norm(rho0.first_moment - model.m1) > 0.01 * (1.0 + np.linalg.norm(model.m1)):
            raise InvalidInputError("model m1 does not match the first moment of the initial density")
    else:
        raise InvalidInputError("rho0 must be a GaussianState or GridDensity")


def solve_law(model, rho0, t):
    """Normalized law of the solution at time ``t`` for Gaussian data:
    mean ``e^{-(C+m0K)t} m_g + s(t)`` and the Fokker-Planck covariance."""
    _check_initial(model, rho0)
    if not isinstance(rho0, GaussianState):
        raise InvalidInputError("solve_law needs a Gaussian initial law")
    t = _check_time(t)
    fp = gaussian_flow(model.A, model.D, rho0, t)
    return fp.shifted(shift(model, t))


def solve(model, rho0, x, t):
    """Density ``rho(x, t) = m0 f_FP(x - s(t), t)`` at points ``x``.

    A Gaussian ``rho0`` is read as the normalized initial law (the density
    is scaled by ``m0``); a grid density carries its own mass.
    """
    _check_initial(model, rho0)
    t = _check_time(t)
    x = np.asarray(x, dtype=float)
    if isinstance(rho0, GaussianState):
        return model.m0 * solve_law(model, rho0, t).pdf(x)
    return fp_density(model.A, model.D, rho0, x - shift(model, t), t)


# ---------------------------------------------------------------------------
# Entropy decomposition and decay bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decomposition:
    total: float
    profile: float
    cross: float
    quadratic: float

    @property
    def residual(self):
        return self.total - (self.profile + self.cross + self.quadratic)

    def __iter__(self):
        return iter((self.total, self.profile, self.cross, self.quadratic))


def _cross_quadratic(kinv, ds, moment, s, s_inf):
    return float(ds @ kinv @ moment), float(-0.5 * ds @ kinv @ (s + s_inf))


def entropy_decomposition(model, rho_t, t, atol=1e-8):
    """Split ``H(rho(t) | rho_inf(. - s_inf))`` into the profile entropy
    ``H(rho(t) | rho_inf(. - s(t)))`` plus a cross and a quadratic term in
    ``s(t) - s_inf``.

    The two entropies are evaluated directly; the cross and quadratic
    terms use ``m1(t) = e^{-Ct} m1``, so the identity also checks that the
    mean of ``rho_t`` is the first moment. Raises ``AssertionError`` when
    the residual exceeds ``atol`` relative to the size of the terms.
    """
    unit = model.unit_mass()
    eq = unit.equilibrium()
    kinv = np.linalg.inv(eq.covariance)
    s = shift(unit, t)
    s_inf = shift_limit(unit)
    total = gaussian_relative_entropy(rho_t, eq.shifted(s_inf))
    profile = gaussian_relative_entropy(rho_t, eq.shifted(s))
    cross, quad = _cross_quadratic(kinv, s - s_inf, first_moment(unit, t), s, s_inf)
    dec = Decomposition(total, profile, cross, quad)
    scale = max(1.0, abs(total), abs(profile), abs(cross), abs(quad))
    if abs(dec.residual) > atol * scale:
        raise AssertionError(
            f"entropy decomposition fails at t={t!r}: total={total!r}, parts sum={total - dec.residual!r}"
        )
    return dec


@dataclass(frozen=True, eq=False)
class EntropyBoundTrace:
    """Entropy trace against the mean-field envelope ``E = term1 + term2``.

    ``constant`` is the single fitted multiplier ``sup H_total / E``;
    ``bounded`` compares it with the supremum over the first half of the
    grid (relative slack ``rtol``).
    """

    times: np.ndarray
    h_total: np.ndarray
    h_profile: np.ndarray
    cross: np.ndarray
    quadratic: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    shift_error: np.ndarray
    shift_bound: np.ndarray
    constant: float
    half_constant: float
    bounded: bool
    residual: np.ndarray
    summary: object
    s_infinity: np.ndarray

    columns = (
        "t",
        "H_total",
        "H_profile",
        "cross_term",
        "quadratic_term",
        "envelope_term1",
        "envelope_term2",
        "shift_error",
    )

    @property
    def envelope(self):
        return self.term1 + self.term2

    @property
    def ratio(self):
        env = self.envelope
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(env > 0, self.h_total / env, np.where(self.h_total > 0, np.inf, 0.0))

    @property
    def holds(self):
        """Single-constant bound, decomposition identity and shift envelope."""
        return bool(
            np.all(self.h_total <= self.constant * self.envelope * (1 + 1e-12) + 1e-300)
            and np.all(np.abs(self.residual) <= 1e-8)
            and np.all(self.shift_error <= self.shift_bound * (1 + 1e-9) + 1e-300)
        )

    def rows(self):
        return zip(
            self.times,
            self.h_total,
            self.h_profile,
            self.cross,
            self.quadratic,
            self.term1,
            self.term2,
            self.shift_error,
        )


def mkv_entropy_bound(model, rho0, t_grid, rtol=0.15, fit_times=None):
    """Evaluate the mean-field decay bound along the exact Gaussian solution.

    The trace is computed in deviation form: the law at time ``t`` differs
    from ``N(s_inf, K)`` by ``e^{-Ct}(I - P) m1`` in the mean and by
    ``e^{-At}(S0 - K)e^{-A^T t}`` in the covariance, so entropies keep
    full relative accuracy deep into the decay.
    """
    _check_initial(model, rho0)
    unit = model.unit_mass()
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or times.size < 2 or times.min() < 0:
        raise InvalidInputError("t_grid must be a 1-D array of at least two nonnegative times")
    summary = unit.spectral()
    eq = unit.equilibrium()
    kcov = eq.covariance
    kinv = np.linalg.inv(kcov)
    p = summary.ker_projection
    m1 = unit.m1
    s_inf = p @ m1
    comp_m1 = m1 - s_inf
    a = unit.A
    mu, nu, n1, n2 = summary.mu, summary.nu, summary.n1, summary.n2

    h0 = gaussian_relative_entropy(rho0, eq)
    dcov0 = rho0.covariance - kcov
    n = times.size
    h_total, h_prof, cross, quad, err = (np.empty(n) for _ in range(5))
    for i, t in enumerate(times):
        fa = expm(a, -t)
        fc = expm(unit.C, -t)
        dcov = fa @ dcov0 @ fa.T
        moment = fc @ m1
        ds = fc @ comp_m1 - fa @ m1
        h_total[i] = relative_entropy_from_deviation(fc @ comp_m1, dcov, kcov)
        h_prof[i] = relative_entropy_from_deviation(fa @ rho0.mean, dcov, kcov)
        s = s_inf + ds
        cross[i], quad[i] = _cross_quadratic(kinv, ds, moment, s, s_inf)
        err[i] = np.linalg.norm(ds)

    pm1 = float(np.linalg.norm(s_inf))
    qm1 = float(np.linalg.norm(comp_m1))
    am1 = float(np.linalg.norm(m1))
    g1 = (1.0 + times**n1) * np.exp(-mu * times)
    g2 = (1.0 + times**n2) * np.exp(-nu * times)
    term1 = h0 * (1.0 + times ** (2 * n1)) * np.exp(-2.0 * mu * times)
    term2 = (g2 * qm1 + g1 * am1) * ((1.0 + g1) * pm1 + g2 * qm1)

    xi = xi_bound(unit.C, a - unit.C, times, m1, fit_times, unit.cluster_tol, unit.rank_tol)
    resid = h_total - (h_prof + cross + quad)

    env = term1 + term2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, h_total / env, np.where(h_total > 0, np.inf, 0.0))
    full = float(ratio.max())
    half_mask = times <= 0.5 * times.max()
    half = float(ratio[half_mask].max())
    bounded = bool(np.isfinite(full) and full <= (1.0 + rtol) * half)
    return EntropyBoundTrace(
        times, h_total, h_prof, cross, quad, term1, term2, err, xi.rhs, full, half, bounded, resid, summary, s_inf
    )


# ---------------------------------------------------------------------------
# PDE residual
# ---------------------------------------------------------------------------


def pde_residual(model, rho0, t, lattice, dt=1e-3, trim=2):
    """Max over the lattice of the finite-difference residual of the
    McKean-Vlasov equation for the assembled Gaussian solution.

    Space derivatives are second-order central differences
    (``numpy.gradient``), the time derivative a centred difference with
    step ``dt``. The nonlocal drift reduces to ``m0 K x - K m1(t)``. The
    outer ``trim`` layers, where one-sided stencils are used, are dropped.
    """
    if not isinstance(rho0, GaussianState):
        raise InvalidInputError("pde_residual needs a Gaussian initial law")
    if not isinstance(lattice, Lattice):
        raise InvalidInputError("lattice must be a Lattice")
    if lattice.dim != model.dim:
        raise InvalidInputError("lattice dimension does not match the model")
    t = _check_time(t)
    if t <= dt:
        raise DomainError(f"t must exceed the time step dt = {dt}")
    law = solve_law(model, rho0, t)
    sigma_min = math.sqrt(max(np.linalg.eigvalsh(law.covariance)[0], 0.0))
    h = max(lattice.spacing)
    if h > sigma_min / 10:
        # leading truncation term of a second-order stencil on a Gaussian
        est = h * h / (6.0 * sigma_min**2) if sigma_min > 0 else math.inf
        warnings.warn(
            f"grid spacing {h:g} under-resolves the density (sigma_min = {sigma_min:.3g}); "
            f"relative truncation error of order {est:.2g}",
            stacklevel=2,
        )
    pts = lattice.points()
    shape = lattice.counts
    d = model.dim

    def density(tt):
        return solve(model, rho0, pts, tt).reshape(shape)

    rho = density(t)
    drho_dt = (density(t + dt) - density(t - dt)) / (2.0 * dt)
    moment = first_moment(model, t)
    drift = pts @ model.A.T - model.K @ moment
    grads = np.gradient(rho, *lattice.spacing) if d > 1 else [np.gradient(rho, lattice.spacing[0])]
    div = np.zeros(shape)
    for i in range(d):
        flux = drift[:, i].reshape(shape) * rho
        for j in range(d):
            flux = flux + model.D[i, j] * grads[j]
        div = div + np.gradient(flux, lattice.spacing[i], axis=i)
    res = drho_dt - div
    inner = tuple(slice(trim, n - trim) for n in shape)
    return float(np.abs(res[inner]).max())
