import csv
import math

import numpy as np
import pytest
from scipy import stats

from mkvlab import _kernels
from mkvlab.errors import DegenerateInputError, InvalidInputError, SimulationBlowUpError
from mkvlab.fokker_planck import GaussianState, equilibrium
from mkvlab.grid import GridDensity, Lattice
from mkvlab.linalg import expm, psd_sqrt
from mkvlab.mckean_vlasov import ModelTriple, first_moment
from mkvlab.particles import (
    ParticleEnsemble,
    Snapshot,
    _thin_factor,
    advance,
    em_step,
    gaussian_fit_entropy,
    init_ensemble,
    load_checkpoint,
    save_checkpoint,
    simulate,
    write_snapshots,
)

KIN_C = np.diag([0.0, 1.0])
KIN_K = np.array([[0.0, -1.0], [1.0, 0.0]])
KIN_D = np.diag([0.0, 1.0])


def _normals(ens, step, r):
    out = np.empty((ens.n, r))
    _kernels.fill_normals(ens.keys(), step, r, out, *_kernels.TABLES)
    return out


# --- normals -------------------------------------------------------------------------------


def test_counter_normals_are_standard_normal():
    keys = _kernels.particle_keys(np.uint64(12345), 50_000)
    out = np.empty((keys.size, 2))
    _kernels.fill_normals(keys, 3, 2, out, *_kernels.TABLES)
    for col in out.T:
        assert stats.kstest(col, "norm").pvalue > 1e-3
    assert abs(np.corrcoef(out.T)[0, 1]) < 5 / math.sqrt(keys.size)
    nxt = np.empty_like(out)
    _kernels.fill_normals(keys, 4, 2, nxt, *_kernels.TABLES)
    assert abs(np.corrcoef(out[:, 0], nxt[:, 0])[0, 1]) < 5 / math.sqrt(keys.size)
    # tails reach beyond the ziggurat base layer
    assert np.abs(out).max() > _kernels._ZIG_R


def test_particle_keys_distinct_per_seed_and_index():
    a = _kernels.particle_keys(np.uint64(1), 1000)
    b = _kernels.particle_keys(np.uint64(2), 1000)
    assert np.unique(a).size == 1000 and not np.intersect1d(a, b).size


# --- ensembles ---------------------------------------------------------------------------------


def test_ensemble_validation():
    with pytest.raises(InvalidInputError, match="N >= 2"):
        ParticleEnsemble.from_diffusion(np.zeros((1, 2)), np.eye(2), 0.01, 0)
    with pytest.raises(InvalidInputError):
        ParticleEnsemble.from_diffusion(np.array([[0.0, np.inf], [0.0, 0.0]]), np.eye(2), 0.01, 0)
    with pytest.raises(InvalidInputError):
        ParticleEnsemble.from_diffusion(np.zeros((3, 2)), np.eye(2), 0.0, 0)
    ens = ParticleEnsemble.from_diffusion(np.zeros((3, 2)), KIN_D, 0.01, -1)
    assert ens.seed == 2**64 - 1
    np.testing.assert_allclose(ens.noise_factor @ ens.noise_factor.T, 2 * KIN_D, atol=1e-10)


def test_thin_factor_reproduces_covariance(rng):
    g = rng.standard_normal((3, 1))
    s = psd_sqrt(2 * g @ g.T)
    thin = _thin_factor(s)
    assert thin.shape == (3, 1)
    np.testing.assert_allclose(thin @ thin.T, s @ s.T, atol=1e-12)
    assert _thin_factor(np.zeros((2, 2))).shape == (2, 0)


def test_init_gaussian_statistics():
    n = 10_000
    ens = init_ensemble(n, GaussianState.standard(2), 11, np.eye(2), 1e-3)
    assert np.all(np.abs(ens.mean()) < 3 / math.sqrt(n))
    # entrywise standard error of a sample covariance of N(0, I): 1/sqrt(n) off-diagonal, sqrt(2/n) diagonal
    assert np.all(np.abs(ens.covariance() - np.eye(2)) < 5 * math.sqrt(2 / n))


def test_init_deterministic_and_seed_sensitive():
    g = GaussianState([1.0, -1.0], [[2.0, 0.3], [0.3, 0.5]])
    a = init_ensemble(100, g, 5, np.eye(2), 1e-3)
    b = init_ensemble(100, g, 5, np.eye(2), 1e-3)
    c = init_ensemble(100, g, 6, np.eye(2), 1e-3)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_init_grid_density():
    g = GaussianState([0.5, -0.5], [[0.5, 0.1], [0.1, 0.3]])
    dens = GridDensity.from_function(Lattice.centered(g.mean, 4.0, 0.05), g.pdf)
    n = 20_000
    ens = init_ensemble(n, dens, 3, np.eye(2), 1e-3)
    se = np.sqrt(np.diag(g.covariance) / n)
    assert np.all(np.abs(ens.mean() - g.mean) < 5 * se)
    np.testing.assert_allclose(ens.covariance(), g.covariance, atol=0.02)


def test_init_rejects_degenerate_and_small():
    with pytest.raises(DegenerateInputError):
        init_ensemble(10, GaussianState([0.0, 0.0], np.diag([1.0, 0.0])), 0, np.eye(2), 1e-3)
    with pytest.raises(InvalidInputError):
        init_ensemble(1, GaussianState.standard(2), 0, np.eye(2), 1e-3)


# --- stepping ---------------------------------------------------------------------------------------


def test_em_step_matches_pairwise_oracle(rng):
    c = np.array([[1.0, 0.2], [-0.3, 0.5]])
    k = np.array([[0.4, -0.1], [0.2, 0.3]])
    d = np.array([[1.0, 0.3], [0.3, 0.5]])
    ens = ParticleEnsemble.from_diffusion(rng.standard_normal((7, 2)), d, 0.01, 99, step_count=4)
    out = em_step(ens, c, k)
    x = ens.positions
    pair = np.array([sum(k @ (x[i] - x[j]) for j in range(ens.n)) / ens.n for i in range(ens.n)])
    thin = _thin_factor(ens.noise_factor)
    noise = _normals(ens, 4, thin.shape[1]) @ thin.T * math.sqrt(ens.dt)
    expected = x - ens.dt * (x @ c.T + pair) + noise
    np.testing.assert_allclose(out.positions, expected, rtol=1e-12, atol=1e-14)
    assert out.step_count == 5 and out.time == pytest.approx(0.05)


def test_em_step_generic_dimension_matches_oracle(rng):
    c = np.diag([1.0, 0.5, 0.0])
    k = 0.3 * rng.standard_normal((3, 3))
    d = np.diag([1.0, 0.0, 0.5])
    ens = ParticleEnsemble.from_diffusion(rng.standard_normal((5, 3)), d, 0.01, 3)
    out = advance(ens, c, k, 2)
    x = ens.positions
    thin = _thin_factor(ens.noise_factor)
    for step in (0, 1):
        xm = x.mean(axis=0)
        noise = _normals(ens, step, thin.shape[1]) @ thin.T * math.sqrt(ens.dt)
        x = x - ens.dt * (x @ c.T + (x - xm) @ k.T) + noise
    np.testing.assert_allclose(out.positions, x, rtol=1e-12, atol=1e-14)


def test_noise_free_pair_follows_linear_ode():
    c = np.array([[1.0, 1.0], [0.0, 0.5]])
    x0 = np.array([[1.0, 2.0], [-1.0, 0.5]])
    for dt in (1e-2, 5e-3):
        ens = ParticleEnsemble.from_diffusion(x0, 1e-24 * np.eye(2), dt, 0)
        out = advance(ens, c, np.zeros((2, 2)), int(round(2.0 / dt)))
        exact = x0 @ expm(c, -2.0).T
        err = np.abs(out.positions - exact).max()
        assert err < 2.0 * dt
        if dt == 1e-2:
            coarse = err
    assert 1.6 < coarse / err < 2.4  # first order in dt


def test_pair_difference_contracts_like_exponential():
    ens = ParticleEnsemble.from_diffusion(np.array([[1.0, 0.0], [-1.0, 0.0]]), 1e-24 * np.eye(2), 1e-3, 0)
    out = advance(ens, np.zeros((2, 2)), np.eye(2), 1000)
    diff = out.positions[0] - out.positions[1]
    np.testing.assert_allclose(diff, [2.0 * (1 - 1e-3) ** 1000, 0.0], atol=1e-10)
    assert diff[0] == pytest.approx(2.0 * math.exp(-1.0), rel=1e-3)


def test_advance_equals_repeated_steps(rng):
    ens = ParticleEnsemble.from_diffusion(rng.standard_normal((50, 2)), KIN_D, 1e-3, 8)
    many = advance(ens, KIN_C, KIN_K, 5)
    one = ens
    for _ in range(5):
        one = em_step(one, KIN_C, KIN_K)
    assert np.array_equal(many.positions, one.positions)
    assert advance(ens, KIN_C, KIN_K, 0) is ens


def test_dt_warning_and_blow_up():
    ens = ParticleEnsemble.from_diffusion(np.ones((4, 1)), np.eye(1), 1.0, 0)
    with pytest.warns(UserWarning, match="stability guide"):
        with pytest.raises(SimulationBlowUpError, match="reduce dt"):
            advance(ens, 1e3 * np.eye(1), np.zeros((1, 1)), 200)


def test_serial_and_parallel_runs_are_bit_identical(monkeypatch, rng):
    x0 = rng.standard_normal((2000, 2))
    ens = ParticleEnsemble.from_diffusion(x0, KIN_D, 1e-3, 21)
    monkeypatch.setenv("MKVLAB_THREADS", "1")
    serial = advance(ens, KIN_C, KIN_K, 50)
    monkeypatch.setenv("MKVLAB_THREADS", "2")
    parallel = advance(ens, KIN_C, KIN_K, 50)
    assert np.array_equal(serial.positions, parallel.positions)
    ens3 = ParticleEnsemble.from_diffusion(rng.standard_normal((300, 3)), np.eye(3), 1e-3, 4)
    parallel3 = advance(ens3, np.eye(3), 0.1 * np.ones((3, 3)), 20)
    monkeypatch.setenv("MKVLAB_THREADS", "1")
    assert np.array_equal(parallel3.positions, advance(ens3, np.eye(3), 0.1 * np.ones((3, 3)), 20).positions)


# --- simulate --------------------------------------------------------------------------------


def test_simulate_mean_tracks_first_moment():
    model = ModelTriple(KIN_C, KIN_K, KIN_D, [1.0, 1.0])
    n, dt = 5000, 1e-3
    snaps = simulate(model, GaussianState([1.0, 1.0], np.eye(2)), n, 2.0, dt, 17, np.linspace(0, 2, 11))
    assert [s.step for s in snaps] == list(range(0, 2001, 200))
    tol = 5 * math.sqrt(np.trace(equilibrium(model.A, model.D).covariance) / n) + 10 * dt
    for s in snaps:
        assert np.abs(s.mean - first_moment(model, s.t)).max() < tol


def test_simulate_mass_normalized():
    heavy = ModelTriple(KIN_C, KIN_K / 2.0, KIN_D, [2.0, 2.0], m0=2.0)
    unit = ModelTriple(KIN_C, KIN_K, KIN_D, [1.0, 1.0])
    rho0 = GaussianState([1.0, 1.0], np.eye(2))
    a = simulate(heavy, rho0, 200, 0.1, 1e-3, 1, [0.1])
    b = simulate(unit, rho0, 200, 0.1, 1e-3, 1, [0.1])
    np.testing.assert_allclose(a[0].mean, b[0].mean, rtol=1e-13)


def test_simulate_deterministic(tmp_path):
    model = ModelTriple(KIN_C, KIN_K, KIN_D, [1.0, 1.0])
    rho0 = GaussianState([1.0, 1.0], np.eye(2))
    runs = [simulate(model, rho0, 500, 0.5, 1e-3, 3, np.linspace(0, 0.5, 6)) for _ in range(2)]
    for i, snaps in enumerate(runs):
        write_snapshots(tmp_path / f"{i}.csv", snaps)
    assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()


# --- entropy proxy -----------------------------------------------------------------------------


def test_fit_entropy_of_reference_sample_is_small():
    ref = GaussianState([0.5, -0.5], [[1.0, 0.2], [0.2, 0.5]])
    for n in (2_000, 20_000):
        ens = init_ensemble(n, ref, 2, np.eye(2), 1e-3)
        assert gaussian_fit_entropy(ens, ref) < 10 * 4 / (2 * n)


def test_fit_entropy_shifted_reference():
    ref = GaussianState.standard(2)
    v = np.array([1.0, -0.5])
    ens = init_ensemble(20_000, ref.shifted(v), 4, np.eye(2), 1e-3)
    assert gaussian_fit_entropy(ens, ref) == pytest.approx(0.5 * v @ v, rel=0.05)


def test_fit_entropy_exact_and_errors():
    ref = GaussianState([1.0, 0.0], [[1.0, 0.2], [0.2, 0.5]])
    exact = Snapshot(0.0, 0, ref.mean, ref.covariance, 1000)
    assert gaussian_fit_entropy(exact, ref) == 0.0
    with pytest.raises(InvalidInputError, match="at least 40"):
        gaussian_fit_entropy(Snapshot(0.0, 0, ref.mean, ref.covariance, 39), ref)
    with pytest.raises(DegenerateInputError, match="more particles"):
        gaussian_fit_entropy(Snapshot(0.0, 0, ref.mean, np.diag([1.0, 0.0]), 1000), ref)


# --- files ---------------------------------------------------------------------------------------


def test_checkpoint_round_trip_and_resume(tmp_path, rng):
    ens = ParticleEnsemble.from_diffusion(rng.standard_normal((100, 2)), KIN_D, 1e-3, 2**63 + 5)
    ens = advance(ens, KIN_C, KIN_K, 10)
    save_checkpoint(tmp_path / "e.bin", ens)
    assert (tmp_path / "e.bin").read_bytes().split(b"\n", 1)[0] == f"100 2 10 {2**63 + 5}".encode()
    back = load_checkpoint(tmp_path / "e.bin", KIN_D, 1e-3)
    assert np.array_equal(back.positions, ens.positions) and back.step_count == 10 and back.seed == ens.seed
    assert np.array_equal(advance(back, KIN_C, KIN_K, 5).positions, advance(ens, KIN_C, KIN_K, 5).positions)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"3 2 0\n")
    with pytest.raises(InvalidInputError, match="header"):
        load_checkpoint(p, np.eye(2), 1e-3)
    p.write_bytes(b"3 2 0 1\n" + np.zeros(5).tobytes())
    with pytest.raises(InvalidInputError, match="expected 6"):
        load_checkpoint(p, np.eye(2), 1e-3)


def test_snapshot_csv_round_trip(tmp_path, rng):
    ens = ParticleEnsemble.from_diffusion(rng.standard_normal((30, 2)), np.eye(2), 1e-3, 0)
    snap = Snapshot.of(ens)
    write_snapshots(tmp_path / "s.csv", [snap], [0.25])
    with open(tmp_path / "s.csv", newline="") as fh:
        header, row = list(csv.reader(fh))
    assert header == ["t", "mean_0", "mean_1", "cov_00", "cov_01", "cov_11", "proxy_entropy"]
    values = [float(v) for v in row]
    assert values[1:3] == list(snap.mean)
    assert values[3:6] == [snap.covariance[0, 0], snap.covariance[0, 1], snap.covariance[1, 1]]
    assert values[6] == 0.25
