"""Linear Fokker-Planck layer for ``df/dt = div(A x f + B grad f)``.

Gaussian data stay Gaussian under this flow, so most quantities here are
closed form: the covariance kernel ``Q(t) = 2 int_0^t e^{-As} B e^{-A^T s} ds``,
the equilibrium ``N(0, K)`` with ``A K + K A^T = 2B``, relative entropies
and the decay certificate. General initial data are handled on a lattice
for d <= 2 by quadrature of the Gaussian convolution kernel.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateInputError, DomainError, InvalidInputError, NotAdmissibleError
from .grid import GridDensity, Lattice, thread_count
from .linalg import (
    CLUSTER_TOL,
    RANK_TOL,
    _same_dim,
    _sym,
    as_matrix,
    dominant_decay,
    expm,
    is_admissible,
    solve_lyapunov,
)

__all__ = [
    "GaussianState",
    "gram_kernel",
    "equilibrium",
    "gaussian_flow",
    "fp_density",
    "gaussian_relative_entropy",
    "relative_entropy_from_deviation",
    "CKPResult",
    "ckp_check",
    "DecayCertificate",
    "fp_decay_certificate",
]


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Gaussian law ``N(mean, covariance)``; the covariance may be singular."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(-1)
        s = np.array(self.covariance, dtype=float)
        if s.ndim == 0:
            s = s.reshape(1, 1)
        if s.shape != (m.size, m.size):
            raise InvalidInputError(f"covariance shape {s.shape} does not match mean of length {m.size}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise InvalidInputError("Gaussian state has non-finite entries")
        scale = max(1.0, float(np.abs(s).max()))
        if np.abs(s - s.T).max() > 1e-12 * scale:
            raise InvalidInputError("covariance is not symmetric")
        s = _sym(s)
        if np.linalg.eigvalsh(s)[0] < -1e-12 * max(np.linalg.norm(s, 2), 1e-300):
            raise InvalidInputError("covariance is not positive semi-definite")
        m.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", s)

    @property
    def dim(self):
        return self.mean.size

    @classmethod
    def standard(cls, d):
        return cls(np.zeros(d), np.eye(d))

    def shifted(self, v):
        return GaussianState(self.mean + np.asarray(v, dtype=float), self.covariance)

    def is_degenerate(self, tol=1e-12):
        w = np.linalg.eigvalsh(self.covariance)
        return w[0] <= tol * max(w[-1], 1e-300)

    def pdf(self, x):
        """Density at points ``x`` of shape ``(..., d)``."""
        try:
            L = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise DomainError("Gaussian state is degenerate and has no density") from None
        x = np.asarray(x, dtype=float)
        diff = (x.reshape(-1, self.dim) - self.mean).T
        z = scipy.linalg.solve_triangular(L, diff, lower=True)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        logp = -0.5 * np.sum(z * z, axis=0) - 0.5 * (self.dim * math.log(2 * math.pi) + logdet)
        return np.exp(logp).reshape(x.shape[:-1])

    def allclose(self, other, atol=1e-10):
        return np.allclose(self.mean, other.mean, rtol=0, atol=atol) and np.allclose(
            self.covariance, other.covariance, rtol=0, atol=atol
        )

    def __eq__(self, other):
        if not isinstance(other, GaussianState):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.covariance, other.covariance)

    def __repr__(self):
        return f"GaussianState(mean={self.mean.tolist()}, covariance={self.covariance.tolist()})"


def gram_kernel(A, B, t):
    """Covariance kernel ``Q(t) = 2 int_0^t e^{-As} B e^{-A^T s} ds``.

    A block exponential gives ``Q`` on a short step ``tau`` (the top-right
    block ``G`` of ``exp(tau [[-A, 2B], [0, A^T]])`` satisfies
    ``Q(tau) = G e^{-A^T tau}``), and the semigroup identity
    ``Q(2 tau) = Q(tau) + e^{-A tau} Q(tau) e^{-A^T tau}`` doubles it up to
    ``t``. Taking the block exponential over the full horizon would multiply
    a growing block by a decaying one and lose all accuracy for large t.
    """
    a = as_matrix(A, "A")
    b = as_matrix(B, "B")
    _same_dim(("A", a), ("B", b))
    t = float(t)
    if not math.isfinite(t):
        raise InvalidInputError("t must be finite")
    if t < 0:
        raise DomainError(f"t must be nonnegative, got {t}")
    d = a.shape[0]
    if t == 0.0:
        return np.zeros((d, d))
    norm = float(np.linalg.norm(a, 1))
    halvings = max(0, math.ceil(math.log2(norm * t))) if norm * t > 1 else 0
    tau = t / 2.0**halvings
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = -a
    block[:d, d:] = 2.0 * b
    block[d:, d:] = a.T
    e = scipy.linalg.expm(block * tau)
    f = e[:d, :d]
    q = _sym(e[:d, d:] @ f.T)
    for _ in range(halvings):
        q = _sym(q + f @ q @ f.T)
        f = f @ f
    return q


def equilibrium(A, B, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Stationary law ``N(0, K)`` with ``A K + K A^T = 2B``."""
    report = is_admissible(A, B, cluster_tol, rank_tol)
    if not report:
        raise NotAdmissibleError(report.describe())
    k = solve_lyapunov(A, B)
    try:
        np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        raise NotAdmissibleError("Lyapunov solution is not positive definite") from None
    return GaussianState(np.zeros(k.shape[0]), k)


def gaussian_flow(A, B, initial, t):
    """Exact law at time ``t`` of the flow started from a Gaussian state."""
    a = as_matrix(A, "A")
    if initial.dim != a.shape[0]:
        raise InvalidInputError("initial state dimension does not match A")
    if t == 0:
        return initial
    f = expm(a, -t)
    cov = f @ initial.covariance @ f.T + gram_kernel(a, B, t)
    return GaussianState(f @ initial.mean, _sym(cov))


def _x_minus_log1p(e):
    # e - log(1 + e) without cancellation for small |e|
    e = np.asarray(e, dtype=float)
    out = np.empty_like(e)
    small = np.abs(e) < 1e-2
    es = e[small]
    acc = np.zeros_like(es)
    power = es * es
    for k in range(2, 14):
        acc += power / k
        power = -power * es
    out[small] = acc
    out[~small] = e[~small] - np.log1p(e[~small])
    return out


def relative_entropy_from_deviation(dmean, dcov, cov_ref):
    """``H(N(m_ref + dmean, cov_ref + dcov) | N(m_ref, cov_ref))``.

    Working with the deviations keeps full relative accuracy when the two
    laws are close, which is where decay traces spend most of their time.
    Returns ``inf`` when the first law is degenerate.
    """
    try:
        L = np.linalg.cholesky(cov_ref)
    except np.linalg.LinAlgError:
        raise DomainError("reference covariance is not positive definite") from None
    dcov = np.asarray(dcov, dtype=float)
    half = scipy.linalg.solve_triangular(L, dcov, lower=True)
    e_mat = scipy.linalg.solve_triangular(L, half.T, lower=True)
    e = np.linalg.eigvalsh(_sym(e_mat))
    if e[0] <= -1.0 + 1e-14:
        return math.inf
    z = scipy.linalg.solve_triangular(L, np.asarray(dmean, dtype=float), lower=True)
    h = 0.5 * (float(np.sum(_x_minus_log1p(e))) + float(z @ z))
    return max(h, 0.0)


def gaussian_relative_entropy(f, g):
    """Relative entropy ``H(f | g) = int f log(f / g)`` of two Gaussian states.

    Equal to ``0.5 (tr(S_g^-1 S_f) - d + dm^T S_g^-1 dm + log det S_g / det S_f)``.
    """
    if f.dim != g.dim:
        raise InvalidInputError("states have different dimensions")
    return relative_entropy_from_deviation(f.mean - g.mean, f.covariance - g.covariance, g.covariance)


# ---------------------------------------------------------------------------
# Lattice quadrature of the convolution formula
# ---------------------------------------------------------------------------


def _gaussian_kernel_sum(points, centres, weights, q):
    L = np.linalg.cholesky(q)
    d = q.shape[0]
    norm = 1.0 / (math.sqrt((2 * math.pi) ** d) * float(np.prod(np.diag(L))))
    out = np.empty(points.shape[0])
    chunk = max(1, 2_000_000 // max(1, centres.shape[0]))
    ranges = [(i, min(i + chunk, points.shape[0])) for i in range(0, points.shape[0], chunk)]
    wc = scipy.linalg.solve_triangular(L, centres.T, lower=True)

    def work(span):
        lo, hi = span
        wx = scipy.linalg.solve_triangular(L, points[lo:hi].T, lower=True)
        quad = (wx * wx).sum(0)[:, None] + (wc * wc).sum(0)[None, :] - 2.0 * (wx.T @ wc)
        out[lo:hi] = np.exp(-0.5 * np.maximum(quad, 0.0)) @ weights * norm

    threads = thread_count()
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, ranges))
    else:
        for span in ranges:
            work(span)
    return out


def fp_density(A, B, rho0, x, t):
    """Solution of the Fokker-Planck equation at points ``x`` and time ``t``
    for lattice initial data (d <= 2).

    ``f(x, t) = int N(x; e^{-At} y, Q(t)) rho0(y) dy`` evaluated by
    trapezoidal quadrature over the lattice of ``rho0``. At ``t = 0`` the
    interpolated ``rho0`` is returned. Each evaluation point is independent,
    so chunking across ``MKVLAB_THREADS`` workers does not change results.
    """
    a = as_matrix(A, "A")
    if not isinstance(rho0, GridDensity):
        raise InvalidInputError("fp_density expects a GridDensity initial datum")
    d = a.shape[0]
    if rho0.dim != d:
        raise InvalidInputError("initial density dimension does not match A")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    pts = x.reshape(-1, d)
    t = float(t)
    if t < 0:
        raise DomainError("t must be nonnegative")
    if t == 0.0:
        out = rho0.interpolate(pts)
        return float(out[0]) if scalar else out.reshape(x.shape[:-1])
    mu = float(np.linalg.eigvals(a).real.min())
    if mu > 0 and t < 1e-6 / mu:
        raise DomainError(f"t = {t:.3e} is too close to 0 for a stable kernel inversion; use t >= {1e-6 / mu:.3e}")
    q = gram_kernel(a, B, t)
    if np.linalg.cond(q) > 1e12:
        raise DomainError(f"Q(t) is numerically singular at t = {t:.6g}; use a larger t")
    f = expm(a, -t)
    w = (rho0.lattice.weights() * rho0.values).ravel()
    keep = w > 0
    centres = rho0.lattice.points()[keep] @ f.T
    out = _gaussian_kernel_sum(pts, centres, w[keep], q)
    return float(out[0]) if scalar else out.reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# Csiszar-Kullback-Pinsker check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CKPResult:
    l1_distance: float
    entropy: float
    holds: bool

    @property
    def margin(self):
        """``sqrt(2 H) - ||f - g||_1``; nonnegative when the inequality holds."""
        return math.sqrt(2.0 * self.entropy) - self.l1_distance

    def __iter__(self):
        return iter((self.l1_distance, self.entropy, self.holds))


def _box_lattice(states, span, n):
    lo = np.min([s.mean - span * np.sqrt(np.diag(s.covariance)) for s in states], axis=0)
    hi = np.max([s.mean + span * np.sqrt(np.diag(s.covariance)) for s in states], axis=0)
    h = (hi - lo) / (n - 1)
    return Lattice(tuple(lo), tuple(h), (n,) * lo.size)


def ckp_check(f, g, n=401, span=10.0, slack=1e-6):
    """Evaluate both sides of ``||f - g||_1 <= sqrt(2 H(f | g))``.

    ``f`` may be a Gaussian state or a lattice density of unit mass; ``g``
    is Gaussian. The L1 norm is computed by trapezoidal quadrature (d <= 2)
    on ``n`` nodes per axis; for a lattice ``f`` the mass of ``g`` outside
    the lattice is added. ``slack`` absorbs quadrature noise.
    """
    if not isinstance(g, GaussianState) or g.is_degenerate():
        raise DomainError("reference g must be a nondegenerate Gaussian state")
    if isinstance(f, GaussianState):
        if f.dim != g.dim:
            raise InvalidInputError("states have different dimensions")
        if f.dim > 2:
            raise DomainError("L1 quadrature is implemented for d <= 2")
        h = gaussian_relative_entropy(f, g)
        if f.allclose(g, atol=0.0):
            return CKPResult(0.0, 0.0, True)
        if f.is_degenerate():
            raise DomainError("f is degenerate; its L1 distance needs a density")
        lat = _box_lattice([f, g], span, n)
        pts = lat.points()
        l1 = lat.integrate(np.abs(f.pdf(pts) - g.pdf(pts)))
    elif isinstance(f, GridDensity):
        if f.dim != g.dim:
            raise InvalidInputError("densities have different dimensions")
        if abs(f.mass - 1.0) > 0.01:
            raise InvalidInputError(f"f must have unit mass (got {f.mass:.6g})")
        pts = f.lattice.points()
        fv = f.values.ravel()
        gv = g.pdf(pts)
        pos = fv > 0
        integrand = np.zeros_like(fv)
        integrand[pos] = fv[pos] * (np.log(fv[pos]) - np.log(gv[pos]))
        h = max(f.lattice.integrate(integrand), 0.0)
        outside = max(0.0, 1.0 - f.lattice.integrate(gv))
        l1 = f.lattice.integrate(np.abs(fv - gv)) + outside
    else:
        raise InvalidInputError("f must be a GaussianState or GridDensity")
    return CKPResult(float(l1), float(h), bool(l1 <= math.sqrt(2.0 * h) + slack))


# ---------------------------------------------------------------------------
# Decay certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecayCertificate:
    """Entropy trace along the exact flow against ``(1 + t^2n) e^{-2 rate t}``.

    ``constant`` is the supremum of ``H(t) / (H(0) envelope(t))`` over the
    grid; ``bounded`` records that the supremum over the full grid exceeds
    the one over its first half by at most ``rtol``.
    """

    times: np.ndarray
    entropy: np.ndarray
    envelope: np.ndarray
    ratio: np.ndarray
    rate: float
    power: int
    initial_entropy: float
    constant: float
    half_constant: float
    bounded: bool

    def rows(self):
        return zip(self.times, self.entropy, self.envelope, self.ratio)


def _expanding_sup(times, ratio, rtol):
    finite = np.isfinite(ratio)
    full = float(ratio[finite].max()) if finite.any() else 0.0
    half_mask = finite & (times <= 0.5 * times.max())
    half = float(ratio[half_mask].max()) if half_mask.any() else full
    return full, half, bool(np.all(finite) and full <= (1.0 + rtol) * half)


def fp_decay_certificate(A, B, initial, t_grid, rtol=0.15, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    a = as_matrix(A, "A")
    eq = equilibrium(a, B, cluster_tol, rank_tol)
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or times.size < 2 or times.min() < 0:
        raise InvalidInputError("t_grid must be a 1-D array of at least two nonnegative times")
    h0 = gaussian_relative_entropy(initial, eq)
    if not math.isfinite(h0):
        raise DegenerateInputError("initial state is degenerate; its entropy is infinite")
    if h0 <= 1e-14:
        raise DegenerateInputError("initial state equals the equilibrium; nothing decays")
    rate, power = dominant_decay(a, cluster_tol, rank_tol)
    dcov0 = initial.covariance - eq.covariance
    ent = np.empty_like(times)
    for i, t in enumerate(times):
        f = expm(a, -t)
        ent[i] = relative_entropy_from_deviation(f @ initial.mean, f @ dcov0 @ f.T, eq.covariance)
    env = (1.0 + times ** (2 * power)) * np.exp(-2.0 * rate * times)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = ent / (h0 * env)
    full, half, bounded = _expanding_sup(times, ratio, rtol)
    return DecayCertificate(times, ent, env, ratio, float(rate), int(power), h0, full, half, bounded)
