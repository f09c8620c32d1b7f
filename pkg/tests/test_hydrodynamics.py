import math

import numpy as np
import pytest

from hydrodynamics import (
    DensityField,
    HydroError,
    SpaceTimePath,
    boundary_flux,
    discrete_stationary,
    face_fluxes,
    solve_hydro,
    solve_stationary,
    space_gradient,
    time_derivative,
    time_grid,
    time_reverse,
)
from model_core import ModelParams, ParameterError, SpaceGrid, get_coefficients
from rate_functional import energy_Q

WASEP = get_coefficients("wasep")


def driven(**kw):
    base = dict(N=64, E=1.0, rho_minus=0.2, rho_plus=0.8, T=0.5)
    base.update(kw)
    return ModelParams(**base)


def bump(grid, params, amplitude=0.1):
    u = grid.nodes
    return DensityField(grid, DensityField.linear(grid, params).values + amplitude * np.sin(math.pi * (u + 1) / 2))


def test_density_field_rejects_out_of_range():
    grid = SpaceGrid(4)
    with pytest.raises(ParameterError):
        DensityField(grid, np.array([0.0, 0.5, 1.2, 0.5, 0.0]))
    with pytest.raises(ParameterError):
        DensityField(grid, np.zeros(3))
    tiny = DensityField(grid, np.array([-1e-9, 0.5, 0.5, 0.5, 1 + 1e-9]))
    assert tiny.values[0] == 0.0 and tiny.values[-1] == 1.0


def test_density_field_helpers():
    grid = SpaceGrid(10)
    params = driven()
    lin = DensityField.linear(grid, params)
    assert lin.values[0] == pytest.approx(0.2) and lin.values[-1] == pytest.approx(0.8)
    assert lin(0.0) == pytest.approx(0.5)
    assert lin.mass() == pytest.approx(1.0)
    assert DensityField.constant(grid, 0.3).mass() == pytest.approx(0.6)


def test_path_requires_uniform_times():
    grid = SpaceGrid(4)
    with pytest.raises(ParameterError):
        SpaceTimePath(np.array([0.0, 0.1, 0.3]), np.full((3, 5), 0.5), grid)
    with pytest.raises(ParameterError):
        SpaceTimePath(np.array([0.0, 0.1]), np.full((2, 4), 0.5), grid)


def test_path_at_interpolates_linearly():
    grid = SpaceGrid(4)
    path = SpaceTimePath.from_function(grid, np.linspace(0.0, 1.0, 5), lambda t, u: 0.2 + 0.5 * t + 0 * u)
    assert np.allclose(path.at(0.1), 0.25)
    assert np.allclose(path.at(-1.0), 0.2)
    assert np.allclose(path.at(5.0), 0.7)
    assert path.T == 1.0 and path.dt == 0.25
    assert np.allclose(time_derivative(path), 0.5)


def test_empty_path():
    empty = SpaceTimePath.empty()
    assert empty.is_empty
    assert empty.T == 0.0


def test_time_grid_lands_on_T():
    times = time_grid(0.1, 0.03)
    assert times[-1] == 0.1
    assert np.ptp(np.diff(times)) < 1e-15
    with pytest.raises(ParameterError):
        time_grid(1.0, 0.0)


def test_time_reverse_and_gradient():
    grid = SpaceGrid(32)
    path = SpaceTimePath.from_function(grid, np.linspace(0, 1, 3), lambda t, u: 0.5 + 0.1 * t * u)
    rev = time_reverse(path)
    assert np.array_equal(rev.values[0], path.values[-1])
    assert np.allclose(space_gradient(path.values, grid)[-1], 0.1)


def test_constant_solution_is_preserved():
    params = ModelParams(N=8, E=0.0, rho_minus=0.5, rho_plus=0.5, T=0.3)
    grid = SpaceGrid(32)
    path = solve_hydro(DensityField.constant(grid, 0.5), params, WASEP, dt=0.01)
    assert np.max(np.abs(path.values - 0.5)) < 1e-14


def test_stationary_profile_is_a_fixed_point():
    params = driven(T=0.5)
    grid = SpaceGrid(512)
    profile = solve_stationary(params, WASEP, grid)
    path = solve_hydro(profile, params, WASEP, dt=0.01)
    assert np.max(np.abs(path.values - profile.values)) < 1e-6


def test_discrete_stationary_is_exact_fixed_point():
    params = driven(T=0.5)
    grid = SpaceGrid(128)
    profile = discrete_stationary(params, WASEP, grid)
    assert profile.info["flux_deviation"] < 1e-6
    path = solve_hydro(profile, params, WASEP, dt=0.01)
    assert np.max(np.abs(path.values - profile.values)) < 1e-6
    faces = face_fluxes(profile.values, params, WASEP, grid)
    assert np.ptp(faces) < 1e-6


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_mass_balance_matches_boundary_fluxes(theta):
    params = driven(T=0.2)
    grid = SpaceGrid(64)
    path = solve_hydro(bump(grid, params), params, WASEP, dt=0.005, theta=theta)
    mass = grid.integrate(path.values)
    for n in range(1, path.times.size):
        left_old, right_old = boundary_flux(path.field(n - 1), params, WASEP)
        left_new, right_new = boundary_flux(path.field(n), params, WASEP)
        expected = theta * (right_new - left_new) + (1 - theta) * (right_old - left_old)
        assert (mass[n] - mass[n - 1]) / path.dt == pytest.approx(expected, abs=1e-6)


def test_dirichlet_values_enforced_and_residual_small():
    params = driven(T=0.1)
    grid = SpaceGrid(64)
    gamma = DensityField.constant(grid, 0.5)
    path = solve_hydro(gamma, params, WASEP, dt=0.005)
    assert np.all(path.values[1:, 0] == 0.2) and np.all(path.values[1:, -1] == 0.8)
    assert path.info["max_residual"] < 1e-8
    assert path.info["picard_max_iter"] <= 50


def test_maximum_principle():
    params = driven(T=0.2)
    grid = SpaceGrid(64)
    gamma = bump(grid, params)
    path = solve_hydro(gamma, params, WASEP, dt=0.001, theta=1.0)
    lo = min(gamma.values.min(), 0.2)
    hi = max(gamma.values.max(), 0.8)
    assert path.values.min() >= lo - 1e-8
    assert path.values.max() <= hi + 1e-8


def test_escape_raises_hydro_error():
    params = ModelParams(N=8, E=0.0, rho_minus=0.5, rho_plus=0.5, T=1.0)
    grid = SpaceGrid(32)
    zigzag = 0.5 + 0.2 * (-1.0) ** np.arange(33)
    zigzag[0] = zigzag[-1] = 0.5
    with pytest.raises(HydroError):
        solve_hydro(DensityField(grid, zigzag), params, WASEP, dt=0.1, theta=0.0)


def test_hydro_energy_finite_under_refinement():
    params = driven(T=0.2)
    energies = []
    for M in (64, 128):
        grid = SpaceGrid(M)
        path = solve_hydro(bump(grid, params), params, WASEP, dt=0.005)
        energies.append(energy_Q(path).value)
    assert all(math.isfinite(q) for q in energies)
    assert energies[1] == pytest.approx(energies[0], rel=1e-2)


def test_stationary_without_field_is_affine():
    params = driven(E=0.0)
    grid = SpaceGrid(64)
    profile = solve_stationary(params, WASEP, grid)
    assert np.max(np.abs(profile.values - DensityField.linear(grid, params).values)) < 1e-10


@pytest.mark.parametrize("E", [0.0, 2.0, -3.0])
def test_stationary_equal_reservoirs_is_constant(E):
    params = driven(E=E, rho_minus=0.35, rho_plus=0.35)
    profile = solve_stationary(params, WASEP, SpaceGrid(32))
    assert np.max(np.abs(profile.values - 0.35)) < 1e-10


def test_stationary_grid_refinement():
    params = driven()
    coarse = solve_stationary(params, WASEP, SpaceGrid(64))
    fine = solve_stationary(params, WASEP, SpaceGrid(1024))
    assert np.max(np.abs(coarse.values - fine.values[::16])) < 1e-4
    assert coarse.values[0] == 0.2 and coarse.values[-1] == 0.8


@pytest.mark.parametrize("name", ["wasep", "porous", "wasep_scaled"])
def test_stationary_flux_is_constant(name):
    coeffs = get_coefficients(name)
    profile = solve_stationary(driven(), coeffs, SpaceGrid(1024))
    assert profile.info["flux_deviation"] < 1e-6
