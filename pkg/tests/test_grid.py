import warnings

import numpy as np
import pytest

from mkvlab.errors import InvalidInputError
from mkvlab.fokker_planck import GaussianState
from mkvlab.grid import GridDensity, Lattice, read_grid_density, thread_count, write_grid_density


def test_lattice_centered_covers_box():
    lat = Lattice.centered([0.0, 1.0], 2.0, 0.5)
    assert lat.counts == (9, 9)
    ax = lat.axes()
    assert ax[0][0] == -2.0 and ax[0][-1] == 2.0
    assert ax[1][0] == -1.0 and ax[1][-1] == 3.0
    assert lat.points().shape == (81, 2)


def test_points_are_row_major():
    lat = Lattice((0.0, 0.0), (1.0, 1.0), (2, 3))
    np.testing.assert_array_equal(lat.points()[:4], [[0, 0], [0, 1], [0, 2], [1, 0]])


def test_trapezoid_weights_integrate_polynomials_exactly():
    lat = Lattice((0.0, -1.0), (0.1, 0.25), (11, 9))
    ones = np.ones(lat.counts)
    assert lat.integrate(ones) == pytest.approx(2.0)
    x, y = lat.points().T
    assert lat.integrate(x * y) == pytest.approx(0.0, abs=1e-14)
    assert lat.integrate(x + 2 * y) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize(
    "args",
    [((0.0,), (0.0,), (3,)), ((0.0,), (1.0,), (1,)), ((0.0, 0.0, 0.0), (1.0,) * 3, (2,) * 3), ((0.0,), (1.0, 1.0), (2,))],
)
def test_lattice_validation(args):
    with pytest.raises(InvalidInputError):
        Lattice(*args)


def test_grid_density_moments_of_gaussian():
    g = GaussianState([0.5, -1.0], [[1.0, 0.3], [0.3, 0.5]])
    dens = GridDensity.from_function(Lattice.centered(g.mean, 9.0, 0.05), g.pdf)
    assert dens.mass == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(dens.mean, g.mean, atol=1e-10)
    np.testing.assert_allclose(dens.covariance(), g.covariance, atol=1e-8)


def test_grid_density_rejects_negative_and_is_read_only():
    lat = Lattice((0.0,), (1.0,), (3,))
    with pytest.raises(InvalidInputError):
        GridDensity(lat, [1.0, -1.0, 0.0])
    dens = GridDensity(lat, [0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        dens.values[0] = 2.0


def test_mass_warning():
    lat = Lattice((0.0,), (1.0,), (3,))
    with pytest.warns(UserWarning, match="declared mass"):
        GridDensity(lat, [0.0, 1.0, 0.0], declared_mass=2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        GridDensity(lat, [0.0, 1.0, 0.0], declared_mass=1.005)


def test_interpolate_zero_outside():
    lat = Lattice((0.0,), (1.0,), (3,))
    dens = GridDensity(lat, [0.0, 2.0, 0.0])
    np.testing.assert_allclose(dens.interpolate(np.array([[0.5], [1.0], [5.0]])), [1.0, 2.0, 0.0])


def test_file_round_trip(tmp_path, rng):
    lat = Lattice((-1.0, 0.25), (0.1, 0.3), (7, 5))
    dens = GridDensity(lat, rng.random(lat.counts))
    write_grid_density(tmp_path / "g.txt", dens)
    assert (tmp_path / "g.txt").read_text().splitlines()[0] == "2 0.1 0.3 7 5 -1.0 0.25"
    assert read_grid_density(tmp_path / "g.txt") == dens


def test_read_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 0.5 3 0.0\n1 2\n")
    with pytest.raises(InvalidInputError, match="expected 3 values"):
        read_grid_density(p)
    p.write_text("3 1 1 1 2 2 2 0 0 0\n")
    with pytest.raises(InvalidInputError, match="header"):
        read_grid_density(p)
    p.write_text("1 0.5 3 0.0\n1 x 2\n")
    with pytest.raises(InvalidInputError, match="unparseable"):
        read_grid_density(p)


def test_thread_count(monkeypatch):
    monkeypatch.delenv("MKVLAB_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("MKVLAB_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("MKVLAB_THREADS", "many")
    with pytest.raises(InvalidInputError):
        thread_count()
