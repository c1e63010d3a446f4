"""Dense small-dimension matrix machinery.

Matrix exponentials, numerical ranks and kernels, the Lyapunov solve,
Jordan-structure detection and the admissibility tests. Everything here is
written for desk-scale problems (d <= 10) and returns fresh arrays; nothing
is mutated in place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import (
    DomainError,
    InvalidInputError,
    LyapunovError,
    NotAdmissibleError,
    NotAlmostPositivelyStableError,
)

__all__ = [
    "RANK_TOL",
    "CLUSTER_TOL",
    "as_matrix",
    "expm",
    "psd_sqrt",
    "numerical_rank",
    "kernel_basis",
    "range_basis",
    "solve_lyapunov",
    "EigenCluster",
    "jordan_clusters",
    "dominant_decay",
    "AdmissibilityReport",
    "is_admissible",
    "StabilityReport",
    "is_almost_positively_stable",
    "kernel_projection",
    "SpectralSummary",
    "spectral_summary",
    "SemigroupBound",
    "matrix_semigroup_bound",
    "restricted_semigroup_bound",
]

RANK_TOL = 1e-9
CLUSTER_TOL = 1e-7

# Loosest single-linkage radius (relative to ||A||) tried when grouping
# eigenvalues; split Jordan blocks of size <= 4 fall well inside it.
_CLUSTER_START = 1e-3


def as_matrix(A, name="matrix"):
    """Return ``A`` as a finite square float array, or raise."""
    a = np.array(A, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidInputError(f"{name} must be a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def _same_dim(*named):
    dims = {name: m.shape[0] for name, m in named}
    if len(set(dims.values())) > 1:
        detail = ", ".join(f"{k} is {v}x{v}" for k, v in dims.items())
        raise InvalidInputError(f"dimension mismatch: {detail}")


def _sym(a):
    return 0.5 * (a + a.T)


def expm(A, t=1.0):
    """Matrix exponential ``exp(A t)``.

    Backed by scipy's scaling-and-squaring Pade routine.
    """
    a = as_matrix(A, "A")
    t = float(t)
    if not math.isfinite(t):
        raise InvalidInputError("t must be finite")
    return scipy.linalg.expm(a * t)


def psd_sqrt(B, tol=1e-10):
    """Symmetric positive semi-definite square root of ``B``.

    Raises
    ------
    DomainError
        If ``B`` is not symmetric or has an eigenvalue below ``-tol * scale``.
    """
    b = as_matrix(B, "B")
    scale = max(float(np.abs(b).max()), np.finfo(float).tiny)
    asym = float(np.abs(b - b.T).max())
    if asym > tol * scale:
        raise DomainError(f"matrix is not symmetric (max |B - B^T| = {asym:.3e})")
    w, V = np.linalg.eigh(_sym(b))
    if w[0] < -tol * scale:
        raise DomainError(f"matrix is indefinite: eigenvalue {w[0]:.6e} < 0")
    w = np.clip(w, 0.0, None)
    return _sym((V * np.sqrt(w)) @ V.T)


def _threshold(sv, tol, scale):
    return tol * max(float(sv[0]) if sv.size else 0.0, scale)


def numerical_rank(A, tol=RANK_TOL, scale=0.0):
    """Number of singular values above ``tol * max(sigma_max, scale)``.

    ``scale`` supplies an absolute reference so that a matrix made only of
    rounding noise (e.g. ``A - lambda I`` at an exact eigenvalue) reports
    rank zero instead of full rank.
    """
    a = np.asarray(A)
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > _threshold(sv, tol, scale)))


def kernel_basis(A, tol=RANK_TOL):
    """Orthonormal basis of the numerical null space of ``A``.

    Singular values at or below ``tol * sigma_max`` count as zero. The
    result has one basis vector per row, shape ``(k, d)``, so that an
    injective ``A`` gives an empty ``(0, d)`` array.
    """
    a = as_matrix(A, "A")
    _, sv, vh = np.linalg.svd(a)
    if sv[0] == 0.0:
        return np.eye(a.shape[0])
    r = int(np.count_nonzero(sv > tol * sv[0]))
    return vh[r:].copy()


def range_basis(A, tol=RANK_TOL):
    """Orthonormal basis of the numerical range of ``A`` as columns ``(d, r)``."""
    a = as_matrix(A, "A")
    u, sv, _ = np.linalg.svd(a)
    if sv[0] == 0.0:
        return np.zeros((a.shape[0], 0))
    r = int(np.count_nonzero(sv > tol * sv[0]))
    return u[:, :r].copy()


def solve_lyapunov(A, D):
    """Solve ``A X + X A^T = 2 D`` for symmetric ``X``.

    Uses the Kronecker form ``(I kron A + A kron I) vec(X) = 2 vec(D)``; at
    d <= 10 this is at most a 100x100 dense solve.

    Raises
    ------
    LyapunovError
        If ``A`` is not positively stable, in which case the positive
        definite solution does not exist (or is not unique).
    """
    a = as_matrix(A, "A")
    dm = as_matrix(D, "D")
    _same_dim(("A", a), ("D", dm))
    n = a.shape[0]
    lam = np.linalg.eigvals(a)
    norm = max(np.linalg.norm(a, 2), np.finfo(float).tiny)
    if lam.real.min() <= CLUSTER_TOL * norm:
        sums = np.abs(lam[:, None] + lam.conj()[None, :]).min()
        raise LyapunovError(
            f"A is not positively stable (min Re eigenvalue {lam.real.min():.3e}); "
            f"smallest |lambda_i + conj(lambda_j)| = {sums:.3e}"
        )
    eye = np.eye(n)
    op = np.kron(eye, a) + np.kron(a, eye)
    x = np.linalg.solve(op, 2.0 * dm.reshape(-1, order="F"))
    return _sym(x.reshape((n, n), order="F"))


# ---------------------------------------------------------------------------
# Jordan structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenCluster:
    """One numerically distinct eigenvalue and its Jordan data."""

    value: complex
    algebraic: int
    geometric: int
    largest_block: int

    @property
    def defect(self):
        """Size of the largest Jordan block minus one."""
        return self.largest_block - 1


def _nullities(a, centre, m, rank_tol, norm):
    d = a.shape[0]
    shifted = a - centre * np.eye(d)
    power = np.eye(d, dtype=shifted.dtype)
    out = []
    for k in range(1, m + 1):
        power = power @ shifted
        out.append(d - numerical_rank(power, rank_tol, scale=norm**k))
    return out


def _single_linkage(values, tol):
    groups = []
    for i in np.argsort(values.real, kind="stable"):
        for g in groups:
            if any(abs(values[i] - values[j]) <= tol for j in g):
                g.append(int(i))
                break
        else:
            groups.append([int(i)])
    # merge chains that became connected through later members
    merged = True
    while merged:
        merged = False
        for p in range(len(groups)):
            for q in range(p + 1, len(groups)):
                if min(abs(values[i] - values[j]) for i in groups[p] for j in groups[q]) <= tol:
                    groups[p].extend(groups.pop(q))
                    merged = True
                    break
            if merged:
                break
    return groups


def jordan_clusters(A, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Group the eigenvalues of ``A`` and read off their Jordan structure.

    Eigenvalues of a defective block come back from LAPACK scattered on a
    small circle, so they are first grouped at a loose radius. Each group
    is then checked with the nullities of ``(A - c I)^k`` around its mean
    ``c``; a group whose nullity does not reach its size contained distinct
    eigenvalues and is re-split at a tenth of the radius. Splitting stops
    at ``cluster_tol * ||A||``. The largest block size is the power at
    which the nullity stagnates.
    """
    a = as_matrix(A, "A")
    d = a.shape[0]
    norm = float(np.linalg.norm(a, 2))
    if norm == 0.0:
        return [EigenCluster(0j, d, d, 1)]
    lam = np.linalg.eigvals(a).astype(complex)
    floor = cluster_tol * norm
    out = []

    def settle(idx, radius):
        vals = lam[idx]
        for group in _single_linkage(vals, radius):
            members = [idx[g] for g in group]
            m = len(members)
            centre = complex(np.mean(lam[members]))
            if abs(centre.imag) <= floor:
                centre = complex(centre.real, 0.0)
            nul = _nullities(a, centre, m, rank_tol, norm)
            ok = nul[-1] == m and nul[0] >= 1
            if not ok and m > 1 and radius > floor:
                settle(members, max(radius / 10.0, floor))
                continue
            top = nul[-1]
            block = next(k + 1 for k, g in enumerate(nul) if g == top)
            out.append(EigenCluster(centre, m, max(min(nul[0], m), 1), block))

    settle(list(range(d)), max(_CLUSTER_START * norm, floor))
    out.sort(key=lambda c: (c.value.real, c.value.imag))
    return out


def _tie_tol(cluster_tol, norm):
    return max(cluster_tol * norm, 1e-12)


def dominant_decay(A, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Return ``(rate, defect)``: the minimal real part of the spectrum and
    the largest defect among eigenvalues attaining it."""
    a = as_matrix(A, "A")
    clusters = jordan_clusters(a, cluster_tol, rank_tol)
    rate = min(c.value.real for c in clusters)
    tol = _tie_tol(cluster_tol, np.linalg.norm(a, 2))
    defect = max(c.defect for c in clusters if abs(c.value.real - rate) <= tol)
    return rate, defect


# ---------------------------------------------------------------------------
# Admissibility and stability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmissibilityReport:
    """Verdicts for the three admissibility conditions on a pair (A, B).

    Condition ``"A"``: B is symmetric positive semi-definite with rank >= 1.
    Condition ``"B"``: A is positively stable.
    Condition ``"C"``: no A^T-invariant subspace lies inside ker B, tested
    as full rank of the Krylov matrix ``[B, AB, ..., A^(d-1) B]``.
    """

    dim: int
    diffusion_psd: bool
    diffusion_rank: int
    min_eigenvalue_B: float
    positively_stable: bool
    min_real_part: float
    controllability_rank: int

    @property
    def condition_a(self):
        return self.diffusion_psd and self.diffusion_rank >= 1

    @property
    def condition_b(self):
        return self.positively_stable

    @property
    def condition_c(self):
        return self.controllability_rank == self.dim

    @property
    def failed(self):
        flags = (("A", self.condition_a), ("B", self.condition_b), ("C", self.condition_c))
        return tuple(name for name, ok in flags if not ok)

    @property
    def admissible(self):
        return not self.failed

    def __bool__(self):
        return self.admissible

    def describe(self):
        if self.admissible:
            return f"admissible, rank(D)={self.diffusion_rank}"
        reasons = []
        if not self.condition_a:
            if not self.diffusion_psd:
                reasons.append(
                    f"diffusion not positive semi-definite (min eigenvalue {self.min_eigenvalue_B:.3e})"
                )
            else:
                reasons.append("diffusion has rank 0")
        if not self.condition_b:
            reasons.append(f"drift not positively stable (min Re eigenvalue {self.min_real_part:.6g})")
        if not self.condition_c:
            reasons.append(
                f"ker(D) contains a drift^T-invariant subspace "
                f"(Krylov rank {self.controllability_rank} < {self.dim})"
            )
        return "not admissible: " + "; ".join(reasons)


def is_admissible(A, B, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL, psd_tol=1e-10):
    a = as_matrix(A, "A")
    b = as_matrix(B, "B")
    _same_dim(("A", a), ("B", b))
    d = a.shape[0]

    bscale = max(float(np.abs(b).max()), np.finfo(float).tiny)
    symmetric = float(np.abs(b - b.T).max()) <= psd_tol * bscale
    wb = np.linalg.eigvalsh(_sym(b))
    psd = symmetric and wb[0] >= -psd_tol * bscale
    rank_b = numerical_rank(b, rank_tol)

    lam = np.linalg.eigvals(a)
    anorm = float(np.linalg.norm(a, 2))
    min_re = float(lam.real.min())
    stable = min_re > cluster_tol * max(anorm, np.finfo(float).tiny)

    # Krylov powers of the normalised drift span the same spaces and stay O(1).
    ahat = a / anorm if anorm > 0 else a
    blocks = [b]
    for _ in range(d - 1):
        blocks.append(ahat @ blocks[-1])
    krylov_rank = numerical_rank(np.hstack(blocks), rank_tol)

    return AdmissibilityReport(
        dim=d,
        diffusion_psd=bool(psd),
        diffusion_rank=rank_b,
        min_eigenvalue_B=float(wb[0]),
        positively_stable=bool(stable),
        min_real_part=min_re,
        controllability_rank=krylov_rank,
    )


@dataclass(frozen=True)
class StabilityReport:
    """Outcome of the almost-positive-stability test."""

    almost_positively_stable: bool
    zero_algebraic: int
    zero_geometric: int
    min_nonzero_real: float | None
    reason: str

    def __bool__(self):
        return self.almost_positively_stable


def is_almost_positively_stable(A, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Every eigenvalue has positive real part, or is zero and semisimple.

    The zero eigenvalue is semisimple when ``dim ker A`` equals the size of
    the zero cluster.
    """
    a = as_matrix(A, "A")
    d = a.shape[0]
    norm = float(np.linalg.norm(a, 2))
    if norm == 0.0:
        return StabilityReport(True, d, d, None, "zero matrix")
    clusters = jordan_clusters(a, cluster_tol, rank_tol)
    zero_tol = cluster_tol * norm
    zero = [c for c in clusters if abs(c.value) <= zero_tol]
    rest = [c for c in clusters if abs(c.value) > zero_tol]
    alg = sum(c.algebraic for c in zero)
    geo = d - numerical_rank(a, rank_tol) if zero else 0
    min_re = min((c.value.real for c in rest), default=None)
    if min_re is not None and min_re <= zero_tol:
        return StabilityReport(
            False, alg, geo, min_re, f"nonzero eigenvalue with real part {min_re:.6g} <= 0"
        )
    if alg != geo:
        return StabilityReport(
            False,
            alg,
            geo,
            min_re,
            f"zero eigenvalue is defective: algebraic multiplicity {alg}, geometric multiplicity {geo}",
        )
    return StabilityReport(True, alg, geo, min_re, "ok")


def kernel_projection(C, rank_tol=RANK_TOL):
    """Spectral projection onto ``ker C`` along ``range C``.

    Valid when ``C`` is almost-positively stable, which makes the two
    subspaces complementary. Built from orthonormal bases ``U1`` (kernel)
    and ``U2`` (range) as ``U1 @ inv([U1 | U2])[:r]``.
    """
    c = as_matrix(C, "C")
    d = c.shape[0]
    u1 = kernel_basis(c, rank_tol).T
    r = u1.shape[1]
    if r == 0:
        return np.zeros((d, d))
    if r == d:
        return np.eye(d)
    u2 = range_basis(c, rank_tol)
    if u2.shape[1] != d - r:
        raise NotAlmostPositivelyStableError("kernel and range of C have inconsistent numerical dimensions")
    t = np.hstack([u1, u2])
    if np.linalg.cond(t) > 1e8:
        raise NotAlmostPositivelyStableError(
            "ker C and range C are not complementary; the zero eigenvalue of C is defective"
        )
    return u1 @ np.linalg.solve(t, np.eye(d))[:r]


@dataclass(frozen=True, eq=False)
class SpectralSummary:
    """Spectral data driving the decay rates of the mean-field solution.

    ``eigenvalues`` belong to ``C + K``; ``drift_eigenvalues`` to ``C``.
    ``mu``/``n1`` are the rate and defect of ``C + K``; ``nu``/``n2`` the
    smallest nonzero real part of the spectrum of ``C`` and its defect
    (both zero when ``C = 0``).
    """

    eigenvalues: np.ndarray
    drift_eigenvalues: np.ndarray
    mu: float
    nu: float
    n1: int
    n2: int
    ker_projection: np.ndarray
    ker_dimension: int


def spectral_summary(C, K, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    c = as_matrix(C, "C")
    k = as_matrix(K, "K")
    _same_dim(("C", c), ("K", k))
    a = c + k

    stab = is_almost_positively_stable(c, cluster_tol, rank_tol)
    if not stab:
        raise NotAlmostPositivelyStableError(f"C is not almost-positively stable: {stab.reason}")
    clusters_a = jordan_clusters(a, cluster_tol, rank_tol)
    mu = min(cl.value.real for cl in clusters_a)
    anorm = float(np.linalg.norm(a, 2))
    if mu <= cluster_tol * max(anorm, np.finfo(float).tiny):
        raise NotAdmissibleError(f"C + K is not positively stable (min Re eigenvalue {mu:.6g})")
    tol_a = _tie_tol(cluster_tol, anorm)
    n1 = max(cl.defect for cl in clusters_a if abs(cl.value.real - mu) <= tol_a)

    cnorm = float(np.linalg.norm(c, 2))
    nonzero = []
    if cnorm > 0.0:
        nonzero = [cl for cl in jordan_clusters(c, cluster_tol, rank_tol) if abs(cl.value) > cluster_tol * cnorm]
    if nonzero:
        nu = min(cl.value.real for cl in nonzero)
        tol_c = _tie_tol(cluster_tol, cnorm)
        n2 = max(cl.defect for cl in nonzero if abs(cl.value.real - nu) <= tol_c)
    else:
        nu, n2 = 0.0, 0

    proj = kernel_projection(c, rank_tol)
    return SpectralSummary(
        eigenvalues=np.linalg.eigvals(a),
        drift_eigenvalues=np.linalg.eigvals(c),
        mu=float(mu),
        nu=float(nu),
        n1=int(n1),
        n2=int(n2),
        ker_projection=proj,
        ker_dimension=int(round(np.trace(proj))),
    )


# ---------------------------------------------------------------------------
# Semigroup bounds ||exp(-A t)|| <= c (1 + t^n) exp(-alpha t)
# ---------------------------------------------------------------------------


class SemigroupBound(NamedTuple):
    rate: float
    power: int
    constant: float

    def envelope(self, t):
        """``constant * (1 + t**power) * exp(-rate * t)``; accepts arrays."""
        t = np.asarray(t, dtype=float)
        return self.constant * (1.0 + t**self.power) * np.exp(-self.rate * t)


def default_bound_grid(rate, power, n=2001):
    horizon = max(50.0, 40.0 * (power + 1) / rate) if rate > 0 else 50.0
    return np.linspace(0.0, horizon, n)


def _fit_constant(a, rate, power, times, basis=None):
    d = a.shape[0]
    shifted = a - rate * np.eye(d)
    best = 0.0
    for t in np.asarray(times, dtype=float):
        e = scipy.linalg.expm(-shifted * t)
        if basis is not None:
            e = e @ basis
        ratio = np.linalg.norm(e, 2) / (1.0 + t**power)
        best = max(best, float(ratio))
    return best


def matrix_semigroup_bound(A, times=None, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Fit ``||exp(-A t)|| <= c (1 + t^n) exp(-alpha t)``.

    ``alpha`` and ``n`` come from the spectrum; ``c`` is the supremum of the
    ratio over ``times`` (default: a dense grid reaching well past the
    polynomial transient).
    """
    a = as_matrix(A, "A")
    rate, power = dominant_decay(a, cluster_tol, rank_tol)
    if rate <= cluster_tol * max(np.linalg.norm(a, 2), np.finfo(float).tiny):
        raise NotAdmissibleError(f"matrix is not positively stable (min Re eigenvalue {rate:.6g})")
    if times is None:
        times = default_bound_grid(rate, power)
    return SemigroupBound(float(rate), int(power), _fit_constant(a, rate, power, times))


def restricted_semigroup_bound(A, times=None, cluster_tol=CLUSTER_TOL, rank_tol=RANK_TOL):
    """Bound ``exp(-A t)`` restricted to the complement ``range(I - P_ker A)``.

    For an almost-positively stable ``A`` that restriction is positively
    stable with rate equal to the smallest nonzero real part of the
    spectrum. Returns a zero bound when ``A = 0``.
    """
    a = as_matrix(A, "A")
    stab = is_almost_positively_stable(a, cluster_tol, rank_tol)
    if not stab:
        raise NotAlmostPositivelyStableError(f"matrix is not almost-positively stable: {stab.reason}")
    d = a.shape[0]
    proj = kernel_projection(a, rank_tol)
    comp = np.eye(d) - proj
    if numerical_rank(comp, rank_tol, scale=1.0) == 0:
        return SemigroupBound(0.0, 0, 0.0)
    basis = range_basis(comp, rank_tol)
    norm = float(np.linalg.norm(a, 2))
    nonzero = [c for c in jordan_clusters(a, cluster_tol, rank_tol) if abs(c.value) > cluster_tol * norm]
    rate = min(c.value.real for c in nonzero)
    tol = _tie_tol(cluster_tol, norm)
    power = max(c.defect for c in nonzero if abs(c.value.real - rate) <= tol)
    if times is None:
        times = default_bound_grid(rate, power)
    return SemigroupBound(float(rate), int(power), _fit_constant(a, rate, power, times, basis))
