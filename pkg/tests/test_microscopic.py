import math

import numpy as np
import pytest
from scipy import integrate

from experiments import excursion_path
from hydrodynamics import DensityField, time_grid
from microscopic import (
    LatticeConfig,
    SimulationError,
    TiltSpec,
    apply_event,
    describe_event,
    detailed_balance_defect,
    empirical_density,
    estimate_entropy_rate,
    event_rates,
    log_rn_derivative,
    occupation_profile,
    replica_streams,
    simulate,
    trajectory_snapshots,
)
from model_core import ModelParams, ParameterError, SpaceGrid, get_coefficients, reversible_marginals
from rate_functional import ControlField, rate_I_control, solve_control_H


def small(**kw):
    base = dict(N=8, E=1.0, rho_minus=0.2, rho_plus=0.8, T=0.05)
    base.update(kw)
    return ModelParams(**base)


def steady_control(grid, T, amplitude=0.5):
    return ControlField.from_function(
        grid,
        time_grid(T, T / 4),
        lambda t, u: amplitude * np.sin(math.pi * (u + 1) / 2),
        lambda t, u: amplitude * 0.5 * math.pi * np.cos(math.pi * (u + 1) / 2),
    )


def modulated_control(grid, T, amplitude=0.5):
    return ControlField.from_function(
        grid,
        time_grid(T, T / 4),
        lambda t, u: amplitude * np.cos(2 * math.pi * t / T) * np.sin(math.pi * (u + 1) / 2),
        lambda t, u: amplitude * np.cos(2 * math.pi * t / T) * 0.5 * math.pi * np.cos(math.pi * (u + 1) / 2),
    )


def test_lattice_config_validation():
    with pytest.raises(ParameterError):
        LatticeConfig(np.array([0, 1]))
    with pytest.raises(ParameterError):
        LatticeConfig(np.array([0, 2, 1]))
    cfg = LatticeConfig.full(4)
    assert cfg.N == 4 and cfg.particles == 7
    assert LatticeConfig.empty(3).particles == 0


def test_event_codes():
    assert describe_event(0, 4) == ("exchange", -3)
    assert describe_event(5, 4) == ("exchange", 2)
    assert describe_event(6, 4) == ("flip", -3)
    assert describe_event(7, 4) == ("flip", 3)
    with pytest.raises(ParameterError):
        describe_event(8, 4)
    eta = np.array([1, 0, 0], dtype=np.int8)
    apply_event(eta, 0)
    assert eta.tolist() == [0, 1, 0]
    apply_event(eta, 3)
    assert eta.tolist() == [0, 1, 1]


def test_untilted_rates_without_field():
    params = small(E=0.0)
    cfg = LatticeConfig(np.array([1, 0, 0, 1, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 1]))
    rates = event_rates(cfg, params)
    half_n2 = 0.5 * params.N**2
    s = np.diff(cfg.occupancy.astype(int))
    assert np.allclose(rates[:-2], np.where(s == 0, 0.0, half_n2))
    assert rates[-2] == pytest.approx(half_n2 * (1 - params.rho_minus))
    assert rates[-1] == pytest.approx(half_n2 * (1 - params.rho_plus))


def test_field_biases_jumps_to_the_right():
    params = small(E=2.0)
    cfg = LatticeConfig(np.array([1, 0] * 7 + [1]))
    rates = event_rates(cfg, params)
    right, left = rates[0], rates[1]
    assert right / left == pytest.approx(math.exp(params.E / params.N))


def test_detailed_balance_at_reversible_field():
    base = small(N=10)
    params = base.with_updates(E=base.E0)
    rng = np.random.default_rng(3)
    for _ in range(200):
        cfg = LatticeConfig.sample(np.full(params.n_sites, 0.5), rng)
        assert detailed_balance_defect(cfg, params) < 1e-12
    off = params.with_updates(E=params.E0 + 1.0)
    cfg = LatticeConfig(np.array([1, 0] * 9 + [1]))
    assert detailed_balance_defect(cfg, off) > 1e-3


def test_reversible_marginals_are_logistic():
    params = small()
    p = reversible_marginals(params)
    assert p.size == params.n_sites
    assert np.all(np.diff(p) > 0)
    assert 0.2 < p[0] < p[-1] < 0.8


def test_replica_streams_are_reproducible_and_distinct():
    a = replica_streams(5, 0)[1].random(4)
    b = replica_streams(5, 0)[1].random(4)
    c = replica_streams(5, 1)[1].random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_simulate_is_deterministic_and_ordered():
    params = small()
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(0))
    first = simulate(initial, params, seed=11)
    second = simulate(initial, params, seed=11)
    assert first.n_events > 0 and first.recorded
    assert np.array_equal(first.times, second.times)
    assert np.array_equal(first.events, second.events)
    assert np.all(np.diff(first.times) > 0) and first.times[-1] < params.T
    assert np.array_equal(first.final.occupancy, second.final.occupancy)


def test_bulk_exchanges_conserve_particles():
    params = small()
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(1))
    traj = simulate(initial, params, seed=2)
    counts = np.concatenate(([initial.particles], traj.particle_counts()))
    flips = traj.events >= 2 * params.N - 2
    assert np.all(np.diff(counts)[~flips] == 0)
    assert np.all(np.abs(np.diff(counts)[flips]) == 1)
    assert counts[-1] == traj.final.particles


def test_unrecorded_run_keeps_occupation_times():
    params = small(T=0.2)
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(4))
    traj = simulate(initial, params, seed=4, record=False)
    assert traj.times.size == 0 and traj.n_events > 0
    occ = traj.time_averaged_occupation()
    assert occ.shape == (params.n_sites,)
    assert np.all((occ >= 0) & (occ <= 1))
    with pytest.raises(SimulationError):
        traj.configs_at([0.0])


def test_event_budget_and_overflow():
    params = small(T=0.5)
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(0))
    with pytest.raises(SimulationError, match="budget"):
        simulate(initial, params, seed=0, max_events=3)
    with pytest.raises(SimulationError, match="overflow"):
        simulate(LatticeConfig.full(2), ModelParams(N=2, E=1e5, rho_minus=0.2, rho_plus=0.8, T=0.1))


def test_snapshots_replay_the_record():
    params = small()
    grid = SpaceGrid(16)
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.3), np.random.default_rng(5))
    traj = simulate(initial, params, seed=6)
    times, values = trajectory_snapshots(traj, params, grid, 0.01)
    assert values.shape == (times.size, grid.M + 1)
    assert np.array_equal(traj.configs_at([0.0])[0], initial.occupancy)
    assert np.array_equal(traj.configs_at([params.T])[0], traj.final.occupancy)


def test_empirical_density_of_extremes():
    params = small()
    grid = SpaceGrid(16)
    full = empirical_density(LatticeConfig.full(params.N), params, grid).values
    assert np.allclose(full[1:-1], 1.0)
    # the boundary half-cells reach 1/2N past the outermost sites, where there is no mass
    edge = 1.0 - 1.0 / (params.N * grid.h)
    assert full[0] == pytest.approx(edge, abs=1e-12) and full[-1] == pytest.approx(edge, abs=1e-12)
    assert np.allclose(empirical_density(LatticeConfig.empty(params.N), params, grid).values, 0.0)


def test_empirical_density_edges_fill_as_the_lattice_refines():
    grid = SpaceGrid(8)
    edges = [empirical_density(LatticeConfig.full(n), small(N=n), grid).values[[0, -1]] for n in (8, 32, 128)]
    assert np.allclose(edges[0], 0.5)
    assert np.all(edges[1] < edges[2]) and np.all(edges[2] > 0.95)


def test_associated_configuration_follows_profile():
    params = small(N=400)
    grid = SpaceGrid(8)
    gamma = DensityField.linear(grid, params)
    cfg = LatticeConfig.associated(gamma, params, np.random.default_rng(7))
    assert cfg.particles / params.n_sites == pytest.approx(0.5, abs=0.05)


def test_log_rn_vanishes_for_zero_control():
    params = small()
    grid = SpaceGrid(16)
    tilt = TiltSpec(ControlField.zero(grid, time_grid(params.T, params.T / 4)))
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(8))
    traj = simulate(initial, params, tilt, seed=9)
    assert log_rn_derivative(traj, params, tilt) == 0.0
    with pytest.raises(ParameterError):
        log_rn_derivative(traj, params, None)


def test_log_rn_matches_direct_replay():
    params = small()
    grid = SpaceGrid(32)
    tilt = TiltSpec(steady_control(grid, params.T))
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(10))
    traj = simulate(initial, params, tilt, seed=12)
    assert traj.n_events > 0

    eta = initial.occupancy.copy()
    total, last = 0.0, 0.0
    for t, code in zip(np.append(traj.times, traj.T), np.append(traj.events, -1)):
        cfg = LatticeConfig(eta.copy())
        tilted = event_rates(cfg, params, tilt, t=0.0)
        plain = event_rates(cfg, params)
        total -= (tilted.sum() - plain.sum()) * (t - last)
        if code >= 0:
            total += math.log(tilted[code] / plain[code])
            apply_event(eta, int(code))
        last = t
    assert log_rn_derivative(traj, params, tilt) == pytest.approx(total, rel=1e-9, abs=1e-12)


def test_log_rn_follows_a_time_dependent_control():
    params = small()
    grid = SpaceGrid(32)
    control = modulated_control(grid, params.T)
    tilt = TiltSpec(control)
    initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), np.random.default_rng(14))
    traj = simulate(initial, params, tilt, seed=15)
    assert traj.n_events > 0

    def excess(cfg, s):
        return event_rates(cfg, params, tilt, t=s).sum() - event_rates(cfg, params).sum()

    eta = initial.occupancy.copy()
    total, last = 0.0, 0.0
    for t, code in zip(np.append(traj.times, traj.T), np.append(traj.events, -1)):
        cfg = LatticeConfig(eta.copy())
        kinks = [float(s) for s in control.times if last < s < t]
        total -= integrate.quad(lambda s: excess(cfg, s), last, t, points=kinks or None, epsabs=1e-13, epsrel=1e-12)[0]
        if code >= 0:
            tilted = event_rates(cfg, params, tilt, t=float(t))
            plain = event_rates(cfg, params)
            total += math.log(tilted[code] / plain[code])
            apply_event(eta, int(code))
        last = t
    assert log_rn_derivative(traj, params, tilt) == pytest.approx(total, rel=1e-7, abs=1e-10)


def test_rates_are_mirror_symmetric():
    params = ModelParams(N=6, E=1.5, rho_minus=0.3, rho_plus=0.3, T=1.0)
    mirror = params.with_updates(E=-params.E)
    rng = np.random.default_rng(21)
    for _ in range(20):
        cfg = LatticeConfig.sample(np.full(params.n_sites, 0.5), rng)
        rates = event_rates(cfg, params)
        flipped = event_rates(LatticeConfig(cfg.occupancy[::-1].copy()), mirror)
        assert np.allclose(flipped[:-2], rates[:-2][::-1], rtol=1e-14)
        assert flipped[-2] == pytest.approx(rates[-1], rel=1e-14)
        assert flipped[-1] == pytest.approx(rates[-2], rel=1e-14)


def test_entropy_estimate_validation():
    params = small()
    grid = SpaceGrid(16)
    gamma = DensityField.linear(grid, params)
    with pytest.raises(ParameterError):
        estimate_entropy_rate(params, TiltSpec(), gamma, replicas=8)
    with pytest.raises(ParameterError):
        estimate_entropy_rate(params, TiltSpec(steady_control(grid, params.T)), gamma, replicas=1)


def test_entropy_estimate_shape():
    params = small()
    grid = SpaceGrid(16)
    gamma = DensityField.linear(grid, params)
    est = estimate_entropy_rate(params, TiltSpec(steady_control(grid, params.T)), gamma, replicas=4, seed=3)
    assert est.replicas == 4 and est.log_rn.size == 4
    assert est.se >= 0.0
    assert est.terminal_density.shape == (grid.M + 1,)
    again = estimate_entropy_rate(params, TiltSpec(steady_control(grid, params.T)), gamma, replicas=4, seed=3)
    assert est.estimate == again.estimate


@pytest.mark.slow
def test_equilibrium_occupation_is_flat():
    params = ModelParams(N=8, E=0.0, rho_minus=0.5, rho_plus=0.5, T=1.0)
    mean, se = occupation_profile(params, 0.5, replicas=128, seed=1)
    assert np.all(se > 0)
    assert abs(mean.mean() - 0.5) < 0.05
    assert int(np.sum(np.abs(mean - 0.5) > 3.0 * se)) <= 1


@pytest.mark.slow
def test_entropy_of_tilted_dynamics_approaches_the_rate():
    params = ModelParams(N=32, E=1.0, rho_minus=0.2, rho_plus=0.8, T=0.5)
    coeffs = get_coefficients("wasep")
    gamma = DensityField.linear(SpaceGrid(32), params)
    path = excursion_path(gamma, params, coeffs, 0.01, t_hydro=0.05)
    rate = rate_I_control(path, gamma, params, coeffs).value
    tilt = TiltSpec(solve_control_H(path, params, coeffs))
    est = estimate_entropy_rate(params, tilt, gamma, replicas=256, seed=5)
    assert rate > 0.0 and est.estimate > 0.0
    assert abs(est.estimate - rate) < 4.0 * est.se + 0.3 * rate


def test_generator_examples_for_two_sites():
    params = ModelParams(N=2, E=0.0, rho_minus=0.3, rho_plus=0.7, T=1.0)
    rates = event_rates(LatticeConfig(np.array([1, 0, 0])), params)
    assert rates[0] == pytest.approx(2.0)
    assert rates[1] == 0.0
    rates = event_rates(LatticeConfig(np.array([0, 1, 0])), params)
    assert rates[2] == pytest.approx(0.6)


def test_single_particle_carries_mass_one_over_n():
    params = ModelParams(N=4, E=0.0, rho_minus=0.5, rho_plus=0.5, T=1.0)
    occupancy = np.zeros(params.n_sites, dtype=np.int8)
    occupancy[params.N - 1] = 1
    field = empirical_density(LatticeConfig(occupancy), params, SpaceGrid(8))
    assert field.mass() == pytest.approx(0.25)


@pytest.mark.slow
@pytest.mark.parametrize("make_control", [steady_control, modulated_control])
def test_likelihood_ratio_has_unit_mean(make_control):
    params = small()
    grid = SpaceGrid(32)
    tilt = TiltSpec(make_control(grid, params.T, amplitude=0.2))
    weights = []
    for replica in range(400):
        rng_init, rng_dyn = replica_streams(13, replica)
        initial = LatticeConfig.sample(np.full(params.n_sites, 0.5), rng_init)
        traj = simulate(initial, params, rng=rng_dyn)
        weights.append(math.exp(log_rn_derivative(traj, params, tilt)))
    weights = np.array(weights)
    se = weights.std(ddof=1) / math.sqrt(weights.size)
    assert abs(weights.mean() - 1.0) < 3.0 * se + 1e-3
