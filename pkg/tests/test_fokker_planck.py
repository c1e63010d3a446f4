import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkvlab.errors import DegenerateInputError, DomainError, InvalidInputError, NotAdmissibleError
from mkvlab.fokker_planck import (
    GaussianState,
    ckp_check,
    equilibrium,
    fp_decay_certificate,
    fp_density,
    gaussian_flow,
    gaussian_relative_entropy,
    gram_kernel,
    relative_entropy_from_deviation,
)
from mkvlab.grid import GridDensity, Lattice
from mkvlab.linalg import expm, solve_lyapunov
from oracles import entropy_quadrature, gram_simpson, l1_equal_covariance, lyapunov_kron, random_admissible


def random_gaussian(rng, d, spread=1.0):
    m = rng.standard_normal((d, d))
    return GaussianState(spread * rng.standard_normal(d), m @ m.T + 0.2 * np.eye(d))


# --- GaussianState -------------------------------------------------------------


def test_gaussian_state_validation():
    with pytest.raises(InvalidInputError):
        GaussianState([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        GaussianState([0.0, 0.0], np.diag([1.0, -1.0]))
    with pytest.raises(InvalidInputError):
        GaussianState([0.0], np.eye(2))
    g = GaussianState([1.0], 2.0)
    assert g.covariance.shape == (1, 1)
    with pytest.raises(ValueError):
        g.mean[0] = 3.0


def test_pdf_matches_scipy(rng):
    from scipy.stats import multivariate_normal

    g = random_gaussian(rng, 3)
    x = rng.standard_normal((20, 3))
    np.testing.assert_allclose(g.pdf(x), multivariate_normal(g.mean, g.covariance).pdf(x), rtol=1e-12)


# --- Gram kernel ---------------------------------------------------------------


def test_gram_kernel_examples():
    assert np.array_equal(gram_kernel(np.eye(2), np.eye(2), 0.0), np.zeros((2, 2)))
    for t in (0.01, 0.5, 3.0, 40.0):
        np.testing.assert_allclose(gram_kernel(np.eye(3), np.eye(3), t), (1 - math.exp(-2 * t)) * np.eye(3), rtol=1e-13)
    with pytest.raises(DomainError):
        gram_kernel(np.eye(2), np.eye(2), -1.0)


def test_gram_kernel_matches_simpson(rng):
    for _ in range(5):
        a, b = random_admissible(rng, 3)
        for t in (0.3, 2.0):
            q = gram_kernel(a, b, t)
            assert np.linalg.norm(q - gram_simpson(a, b, t, 2000)) < 1e-10 * np.linalg.norm(q)


def test_gram_kernel_long_horizon_reaches_equilibrium(rng, kinetic):
    for a, b in [kinetic] + [random_admissible(rng, d) for d in (2, 3, 4)]:
        mu = np.linalg.eigvals(a).real.min()
        big_t = 40.0 / mu
        k = lyapunov_kron(a, b)
        q = gram_kernel(a, b, big_t)
        assert np.linalg.norm(q - k) < 1e-6 * max(1.0, np.linalg.norm(k))
        assert np.linalg.norm(gram_simpson(a, b, big_t) - k) < 1e-6 * max(1.0, np.linalg.norm(k))


def test_gram_kernel_monotone_and_stationary(rng):
    for _ in range(10):
        a, b = random_admissible(rng, 4)
        k = solve_lyapunov(a, b)
        prev = np.zeros_like(k)
        for t in np.linspace(0.0, 20.0, 41)[1:]:
            q = gram_kernel(a, b, t)
            assert np.linalg.eigvalsh(q - prev).min() >= -1e-10 * max(1.0, np.linalg.norm(k))
            f = expm(a, -t)
            assert np.linalg.norm(f @ k @ f.T + q - k) < 1e-8 * max(1.0, np.linalg.norm(k))
            prev = q


# --- equilibrium and flow ---------------------------------------------------------


def test_equilibrium_examples(kinetic):
    assert equilibrium(np.eye(2), np.eye(2)) == GaussianState.standard(2)
    np.testing.assert_allclose(equilibrium(np.diag([1.0, 2.0]), np.eye(2)).covariance, np.diag([1.0, 0.5]))
    eq = equilibrium(*kinetic)
    np.testing.assert_allclose(eq.covariance, lyapunov_kron(*kinetic), atol=1e-14)
    np.linalg.cholesky(eq.covariance)
    with pytest.raises(NotAdmissibleError):
        equilibrium(np.eye(2), np.diag([1.0, 0.0]))


def test_gaussian_flow_examples(rng, kinetic):
    g = random_gaussian(rng, 2)
    assert gaussian_flow(*kinetic, g, 0.0) is g
    eq = equilibrium(*kinetic)
    for t in (0.5, 3.0, 30.0):
        assert np.linalg.norm(gaussian_flow(*kinetic, eq, t).covariance - eq.covariance) < 1e-9
    m0 = np.array([1.0, -2.0])
    tight = GaussianState(m0, 1e-300 * np.eye(2))
    for t in (0.1, 1.0, 5.0):
        out = gaussian_flow(np.eye(2), np.eye(2), tight, t)
        np.testing.assert_allclose(out.mean, math.exp(-t) * m0, rtol=1e-14)
        np.testing.assert_allclose(out.covariance, (1 - math.exp(-2 * t)) * np.eye(2), rtol=1e-13)


def test_entropy_nonincreasing_along_flow(rng):
    for _ in range(10):
        a, b = random_admissible(rng, 3)
        eq = equilibrium(a, b)
        g = random_gaussian(rng, 3)
        h = [gaussian_relative_entropy(gaussian_flow(a, b, g, t), eq) for t in np.linspace(0, 10, 51)]
        assert np.all(np.diff(h) <= 1e-12 * h[0])


# --- relative entropy -----------------------------------------------------------


def test_relative_entropy_examples(rng):
    g = random_gaussian(rng, 3)
    assert gaussian_relative_entropy(g, g) == 0.0
    m = np.array([0.3, -1.2])
    assert gaussian_relative_entropy(GaussianState(m, np.eye(2)), GaussianState.standard(2)) == pytest.approx(
        0.5 * m @ m, rel=1e-14
    )
    with pytest.raises(DomainError):
        gaussian_relative_entropy(g, GaussianState(np.zeros(3), np.diag([1.0, 1.0, 0.0])))
    assert gaussian_relative_entropy(GaussianState(np.zeros(2), np.diag([1.0, 0.0])), GaussianState.standard(2)) == math.inf


def test_relative_entropy_matches_quadrature(rng):
    for _ in range(5):
        f = random_gaussian(rng, 2, 0.5)
        g = random_gaussian(rng, 2, 0.5)
        # keep both laws well inside the quadrature box
        f = GaussianState(f.mean, f.covariance / max(1.0, np.linalg.eigvalsh(f.covariance)[-1]))
        g = GaussianState(g.mean, g.covariance / max(1.0, np.linalg.eigvalsh(g.covariance)[-1]))
        assert abs(gaussian_relative_entropy(f, g) - entropy_quadrature(f.mean, f.covariance, g.mean, g.covariance)) < 1e-4


def test_relative_entropy_textbook_formula(rng):
    for _ in range(20):
        f, g = random_gaussian(rng, 4), random_gaussian(rng, 4)
        gi = np.linalg.inv(g.covariance)
        dm = f.mean - g.mean
        ref = 0.5 * (
            np.trace(gi @ f.covariance) - 4 + dm @ gi @ dm + np.log(np.linalg.det(g.covariance) / np.linalg.det(f.covariance))
        )
        assert gaussian_relative_entropy(f, g) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_deviation_form_keeps_accuracy_near_zero():
    # H(N(0, (1+e) I_1) | N(0, 1)) = (e - log(1+e)) / 2 ~ e^2 / 4
    for e in (1e-3, 1e-6, 1e-9):
        h = relative_entropy_from_deviation([0.0], [[e]], [[1.0]])
        assert h == pytest.approx(0.25 * e * e * (1 - 2 * e / 3), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 5))
def test_relative_entropy_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    f, g = random_gaussian(rng, d), random_gaussian(rng, d)
    assert gaussian_relative_entropy(f, g) >= 0.0


# --- fp_density -------------------------------------------------------------------


def test_fp_density_matches_gaussian_flow(kinetic):
    a, b = kinetic
    g0 = GaussianState([0.5, -0.5], [[0.6, 0.1], [0.1, 0.4]])
    rho0 = GridDensity.from_function(Lattice.centered(g0.mean, 6.0, 0.05), g0.pdf)
    for t in (0.5, 2.0):
        exact = gaussian_flow(a, b, g0, t)
        x = exact.mean + 1.5 * np.random.default_rng(1).standard_normal((40, 2)) @ np.linalg.cholesky(exact.covariance).T
        np.testing.assert_allclose(fp_density(a, b, rho0, x, t), exact.pdf(x), rtol=1e-4)


def test_fp_density_equilibrium_is_stationary(kinetic):
    eq = equilibrium(*kinetic)
    rho0 = GridDensity.from_function(Lattice.centered([0.0, 0.0], 8.0, 0.05), eq.pdf)
    x = np.array([[0.0, 0.0], [1.0, -0.5], [-2.0, 1.0]])
    np.testing.assert_allclose(fp_density(*kinetic, rho0, x, 1.0), eq.pdf(x), rtol=1e-4)


def test_fp_density_conserves_mass(kinetic):
    g0 = GaussianState([1.0, 0.0], 0.5 * np.eye(2))
    rho0 = GridDensity.from_function(Lattice.centered(g0.mean, 5.0, 0.1), g0.pdf)
    lat = Lattice.centered([0.0, 0.0], 7.0, 0.2)
    out = GridDensity(lat, fp_density(*kinetic, rho0, lat.points(), 1.5))
    assert out.mass == pytest.approx(rho0.mass, abs=1e-3)


def test_fp_density_point_mass_limit(kinetic):
    a, b = kinetic
    y0 = np.array([1.0, 2.0])
    sigma = 0.02
    tight = GaussianState(y0, sigma**2 * np.eye(2))
    rho0 = GridDensity.from_function(Lattice.centered(y0, 8 * sigma, sigma / 10), tight.pdf)
    t = 1.0
    kernel = GaussianState(expm(a, -t) @ y0, gram_kernel(a, b, t))
    x = kernel.mean + np.array([[0.0, 0.0], [0.3, -0.2], [-0.5, 0.4]])
    np.testing.assert_allclose(fp_density(a, b, rho0, x, t), kernel.pdf(x), rtol=1e-2)


def test_fp_density_small_and_zero_time(kinetic):
    rho0 = GridDensity(Lattice((0.0, 0.0), (1.0, 1.0), (3, 3)), np.ones((3, 3)))
    assert fp_density(*kinetic, rho0, np.array([0.5, 0.5]), 0.0) == pytest.approx(1.0)
    with pytest.raises(DomainError, match="too close to 0"):
        fp_density(*kinetic, rho0, np.array([0.5, 0.5]), 1e-9)
    with pytest.raises(DomainError):
        fp_density(*kinetic, rho0, np.array([0.5, 0.5]), -1.0)


def test_fp_density_independent_of_threads(kinetic, monkeypatch):
    g0 = GaussianState([0.0, 0.0], np.eye(2))
    rho0 = GridDensity.from_function(Lattice.centered([0.0, 0.0], 4.0, 0.1), g0.pdf)
    x = Lattice.centered([0.0, 0.0], 4.0, 0.1).points()
    monkeypatch.setenv("MKVLAB_THREADS", "1")
    serial = fp_density(*kinetic, rho0, x, 1.0)
    monkeypatch.setenv("MKVLAB_THREADS", "3")
    assert np.array_equal(serial, fp_density(*kinetic, rho0, x, 1.0))


# --- CKP ----------------------------------------------------------------------------


def test_ckp_examples(rng):
    g = random_gaussian(rng, 2)
    assert tuple(ckp_check(g, g)) == (0.0, 0.0, True)
    res = ckp_check(GaussianState([1.0, 0.0], np.eye(2)), GaussianState.standard(2))
    assert res.entropy == pytest.approx(0.5)
    assert res.l1_distance <= 1.0 and res.holds
    # the trapezoid rule sees a kink in |f - g|: second-order error
    exact = l1_equal_covariance([1.0, 0.0], [0.0, 0.0], np.eye(2))
    coarse = abs(res.l1_distance - exact)
    fine = abs(ckp_check(GaussianState([1.0, 0.0], np.eye(2)), GaussianState.standard(2), n=801).l1_distance - exact)
    assert coarse < 5e-4 and 3.0 < coarse / fine < 5.0


def test_ckp_sweep(rng):
    for _ in range(100):
        f, g = random_gaussian(rng, 2), random_gaussian(rng, 2)
        res = ckp_check(f, g, n=201)
        assert res.holds and res.margin >= -1e-6


def test_ckp_grid_density():
    g = GaussianState.standard(2)
    f = GaussianState([0.5, 0.0], np.eye(2))
    dens = GridDensity.from_function(Lattice.centered([0.0, 0.0], 9.0, 0.05), f.pdf)
    res = ckp_check(dens, g)
    assert res.entropy == pytest.approx(0.125, abs=1e-6)
    assert res.l1_distance == pytest.approx(l1_equal_covariance(f.mean, g.mean, np.eye(2)), abs=2e-4)
    assert res.holds
    with pytest.raises(InvalidInputError, match="unit mass"):
        ckp_check(GridDensity(dens.lattice, 2 * dens.values), g)


# --- decay certificate ------------------------------------------------------------------


def test_certificate_ou_ratio_constant():
    m = np.array([1.0, -0.5])
    t = np.linspace(0, 10, 101)
    cert = fp_decay_certificate(np.eye(2), np.eye(2), GaussianState(m, np.eye(2)), t)
    np.testing.assert_allclose(cert.entropy, 0.5 * (m @ m) * np.exp(-2 * t), rtol=1e-12)
    np.testing.assert_allclose(cert.ratio, 0.5, rtol=1e-12)  # envelope (1 + t^0) e^{-2t} = 2 e^{-2t}
    assert cert.bounded and cert.power == 0 and cert.rate == pytest.approx(1.0)


def test_certificate_defective_drift():
    a = np.array([[1.0, 1.0], [0.0, 1.0]])
    t = np.linspace(0, 30, 301)
    cert = fp_decay_certificate(a, np.eye(2), GaussianState([1.0, 1.0], 2 * np.eye(2)), t)
    assert cert.power == 1 and cert.rate == pytest.approx(1.0)
    scaled = cert.entropy * np.exp(2 * t)
    assert scaled[-1] > 10 * scaled[1]  # polynomial growth after removing e^{-2t}
    assert cert.bounded and np.all(np.isfinite(cert.ratio))


def test_certificate_kinetic(kinetic):
    t = np.linspace(0, 40, 401)
    cert = fp_decay_certificate(*kinetic, GaussianState([1.0, 1.0], np.eye(2)), t)
    assert cert.bounded and cert.rate == pytest.approx(0.5) and cert.power == 0


def test_certificate_rejects_equilibrium_and_degenerate(kinetic):
    with pytest.raises(DegenerateInputError):
        fp_decay_certificate(*kinetic, equilibrium(*kinetic), [0.0, 1.0])
    with pytest.raises(DegenerateInputError):
        fp_decay_certificate(*kinetic, GaussianState([1.0, 0.0], np.diag([1.0, 0.0])), [0.0, 1.0])
