import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpctl.poisson_spectral import (deposit_cic, divergence, gradient, gradient_of_solution, laplacian,
                                    load_grid_binary, nodal_values, sample_field, save_grid_binary,
                                    save_grid_csv, solve_poisson)

TWO_PI = 2 * np.pi


def rel_sup(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_uniform_density_gives_zero_potential():
    assert np.abs(solve_poisson(np.full((32, 32), 3.7))).max() <= 1e-15


def test_single_mode_oracle():
    rho = nodal_values(lambda a, b: np.cos(TWO_PI * a), 128)
    exact = -rho / (4 * np.pi ** 2)
    assert rel_sup(solve_poisson(rho), exact) <= 1e-10


def test_two_mode_superposition():
    rho = nodal_values(lambda a, b: np.cos(TWO_PI * a) + np.sin(2 * TWO_PI * b), 128)
    exact = nodal_values(lambda a, b: -np.cos(TWO_PI * a) / (4 * np.pi ** 2)
                         - np.sin(2 * TWO_PI * b) / (16 * np.pi ** 2), 128)
    assert rel_sup(solve_poisson(rho), exact) <= 1e-10


def test_coarse_grid_still_exact_for_resolved_modes():
    rho = nodal_values(lambda a, b: np.cos(TWO_PI * (3 * a - 5 * b)), 32)
    exact = -rho / (4 * np.pi ** 2 * 34)
    assert rel_sup(solve_poisson(rho), exact) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-5, 5), st.floats(-5, 5))
def test_linearity_and_zero_mean(seed, a, b):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.normal(size=(64, 64)), rng.normal(size=(64, 64))
    lhs = solve_poisson(a * r1 + b * r2)
    rhs = a * solve_poisson(r1) + b * solve_poisson(r2)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (1 + abs(a) + abs(b))
    assert abs(lhs.mean()) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_laplacian_inverts_solver(seed):
    rho = np.random.default_rng(seed).normal(size=(32, 32))
    assert np.abs(laplacian(solve_poisson(rho)) - (rho - rho.mean())).max() <= 1e-12


def test_gradient_examples():
    assert np.abs(gradient(np.zeros((16, 16)))).max() == 0.0
    phi = nodal_values(lambda a, b: np.sin(TWO_PI * a), 64)
    g = gradient(phi)
    assert np.abs(g[..., 0] - nodal_values(lambda a, b: TWO_PI * np.cos(TWO_PI * a), 64)).max() <= 1e-12
    assert np.abs(g[..., 1]).max() <= 1e-12


def test_gradient_of_solution_at_quarter():
    rho = nodal_values(lambda a, b: np.cos(TWO_PI * a), 64)
    g = gradient_of_solution(rho)
    assert g[16, 5] == pytest.approx([1 / TWO_PI, 0.0], abs=1e-14)
    assert np.abs(g - gradient(solve_poisson(rho))).max() <= 1e-14


def test_divergence_of_gradient_is_laplacian():
    rng = np.random.default_rng(4)
    phi = solve_poisson(rng.normal(size=(32, 32)))
    # random data has Nyquist content, which the first-derivative operator drops
    smooth = nodal_values(lambda a, b: np.sin(TWO_PI * a) * np.cos(2 * TWO_PI * b), 32)
    assert np.abs(divergence(gradient(smooth)) - laplacian(smooth)).max() <= 1e-10
    assert np.isfinite(divergence(gradient(phi))).all()


def test_sample_field_examples():
    n = 16
    grid = np.random.default_rng(0).normal(size=(n, n))
    assert sample_field(grid, np.array([3 / n, 7 / n])) == pytest.approx(grid[3, 7], abs=1e-14)
    mid = sample_field(grid, np.array([3.5 / n, 7 / n]))
    assert mid == pytest.approx(0.5 * (grid[3, 7] + grid[4, 7]), abs=1e-14)
    wrap_pt = sample_field(grid, np.array([1 - 0.5 / n, 0.0]))
    assert wrap_pt == pytest.approx(0.5 * (grid[n - 1, 0] + grid[0, 0]), abs=1e-14)
    assert sample_field(grid, np.array([1 - 0.5 / n, 0.0])) == pytest.approx(
        sample_field(grid, np.array([-0.5 / n, 1.0])), abs=1e-14)


def test_sample_vector_grid_shape():
    g = np.zeros((8, 8, 2))
    assert sample_field(g, np.zeros((5, 2))).shape == (5, 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_cic_deposit_conserves_mass(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((200, 2)) * 3 - 1
    w = rng.random(200)
    rho = deposit_cic(x, w, 32)
    assert rho.mean() == pytest.approx(w.sum(), rel=1e-12)


def test_grid_binary_round_trip(tmp_path):
    g = np.random.default_rng(2).normal(size=(16, 16, 2))
    save_grid_binary(tmp_path / "g.bin", g)
    assert np.array_equal(load_grid_binary(tmp_path / "g.bin"), g)
    s = np.random.default_rng(3).normal(size=(8, 8))
    save_grid_binary(tmp_path / "s.bin", s)
    assert np.array_equal(load_grid_binary(tmp_path / "s.bin"), s)
    save_grid_csv(tmp_path / "s.csv", s)
    back = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 2].reshape(8, 8), s)


def test_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        solve_poisson(np.zeros((12, 12)))
