#!/usr/bin/env python3
"""
Command-line front door of the WASEP toolkit.

    python app.py stationary --config configs/driven.conf --out results/
    python app.py hydro      --config configs/driven.conf --gamma gamma.csv
    python app.py simulate   --config configs/driven.conf --seed 7
    python app.py entropy    --config configs/entropy.conf --path path.csv --gamma gamma.csv
    python app.py rate       --config configs/driven.conf --path path.csv --gamma gamma.csv --method variational
    python app.py smooth     --config configs/driven.conf --path path.csv --gamma gamma.csv --eps 0.04,0.02
    python app.py experiment configs/experiments/cross_formula.spec

Exit status: 0 success, 2 bad input or config, 3 tolerance or numerical
failure, 4 output could not be written.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from experiments import EXIT_INPUT, EXIT_IO, EXIT_OK, EXIT_TOLERANCE, parse_basis, run_experiment
from hydrodynamics import DensityField, discrete_stationary, solve_hydro, solve_stationary
from microscopic import (
    LatticeConfig,
    TiltSpec,
    empirical_density,
    estimate_entropy_rate,
    replica_streams,
    simulate,
    trajectory_snapshots,
)
from model_core import ConfigError, WasepError, load_config
from path_io import PathFormatError, read_path, read_profile, write_json, write_path, write_profile, write_snapshots
from path_smoothing import density_check, smoothing_chain
from rate_functional import (
    RATE_METHODS,
    TestBasis,
    energy_Q,
    energy_Q_variational,
    hminus1_norm,
    momentum_from_control,
    rate_functional,
    rate_I_control,
    solve_control_H,
)

logger = logging.getLogger("wasep")


def _load_run(args):
    print(f"📥 Loading config {args.config}")
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "replicas", None) is not None:
        changes["replicas"] = args.replicas
    return replace(cfg, **changes) if changes else cfg


def _read_input(reader, source, what: str):
    if source is None:
        raise ConfigError(f"--{what} is required for this command")
    try:
        return reader(source)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {source}: {exc}") from exc


def _gamma(args, cfg) -> DensityField:
    """--gamma file, or the linear profile between the reservoirs."""
    if args.gamma is None:
        return DensityField.linear(cfg.grid, cfg.params)
    gamma = _read_input(read_profile, args.gamma, "gamma")
    if gamma.grid.M != cfg.M:
        raise ConfigError(f"gamma has M={gamma.grid.M}, config has M={cfg.M}")
    return gamma


def _path_and_gamma(args, cfg):
    path = _read_input(read_path, args.path, "path")
    if path.is_empty:
        raise ConfigError(f"path file {args.path} holds no samples")
    gamma = _read_input(read_profile, args.gamma, "gamma") if args.gamma else path.field(0)
    if gamma.grid != path.grid:
        raise ConfigError("path and gamma live on different grids")
    return path, gamma


def cmd_stationary(args, out: Path) -> int:
    cfg = _load_run(args)
    print("🚀 Solving the stationary profile")
    profile = solve_stationary(cfg.params, cfg.coeffs, cfg.grid)
    discrete = discrete_stationary(cfg.params, cfg.coeffs, cfg.grid, initial=profile)
    write_profile(profile, out / "stationary.csv")
    write_profile(discrete, out / "stationary_discrete.csv")
    write_json({"continuum": profile.info, "discrete": discrete.info,
                "max_difference": float(np.max(np.abs(profile.values - discrete.values)))}, out / "stationary.json")
    print(f"✅ J = {profile.info['J']:.12g} after {profile.info['newton_iterations']} Newton steps")
    print(f"💾 Wrote {out / 'stationary.csv'}")
    return EXIT_OK


def cmd_hydro(args, out: Path) -> int:
    cfg = _load_run(args)
    gamma = _gamma(args, cfg)
    print(f"🚀 Solving the hydrodynamic equation to T={cfg.params.T} (dt={cfg.dt}, theta={cfg.theta})")
    path = solve_hydro(gamma, cfg.params, cfg.coeffs, dt=cfg.dt, theta=cfg.theta)
    write_path(path, out / "hydro.csv")
    write_json({"steps": path.times.size - 1, **path.info}, out / "hydro.json")
    print(f"💾 Wrote {out / 'hydro.csv'}")
    return EXIT_OK


def cmd_simulate(args, out: Path) -> int:
    cfg = _load_run(args)
    params = cfg.params
    gamma = _gamma(args, cfg)
    rng_init, rng_dyn = replica_streams(cfg.seed, 0)
    initial = LatticeConfig.associated(gamma, params, rng_init)
    print(f"🚀 Simulating N={params.N} to T={params.T} (seed {cfg.seed})")
    traj = simulate(initial, params, rng=rng_dyn, record=cfg.snapshot_dt > 0)
    summary = {
        "seed": cfg.seed,
        "events": traj.n_events,
        "initial_particles": initial.particles,
        "final_particles": traj.final.particles,
        "time_averaged_occupation": traj.time_averaged_occupation(),
        "final_density": empirical_density(traj.final, params, cfg.grid).values,
    }
    if cfg.snapshot_dt > 0:
        times, values = trajectory_snapshots(traj, params, cfg.grid, cfg.snapshot_dt)
        write_snapshots(times, values, out / "snapshots.csv")
        print(f"💾 Wrote {out / 'snapshots.csv'}")
    write_json(summary, out / "simulate.json")
    print(f"✅ {traj.n_events} events")
    return EXIT_OK


def cmd_entropy(args, out: Path) -> int:
    cfg = _load_run(args)
    path, gamma = _path_and_gamma(args, cfg)
    control = solve_control_H(path, cfg.params, cfg.coeffs)
    target = rate_I_control(path, gamma, cfg.params, cfg.coeffs, control=control)
    print(f"🚀 {cfg.replicas} tilted replicas at N={cfg.params.N} (seed {cfg.seed})")
    est = estimate_entropy_rate(cfg.params, TiltSpec(control), gamma, cfg.replicas, seed=cfg.seed)
    write_json({**est.to_dict(), "rate_control": target.value, "log_rn_per_site": est.log_rn}, out / "entropy.json")
    print(f"✅ entropy/N = {est.estimate:.6g} +- {est.se:.2g} (I_T = {target.value:.6g})")
    return EXIT_OK


def cmd_rate(args, out: Path) -> int:
    cfg = _load_run(args)
    path, gamma = _path_and_gamma(args, cfg)
    K, L = parse_basis(args.basis)
    basis = TestBasis(K, L, path.T)
    if args.op == "energy":
        est = energy_Q_variational(path, basis) if args.method == "variational" else energy_Q(path)
    elif args.op == "hminus1":
        control = solve_control_H(path, cfg.params, cfg.coeffs)
        P = momentum_from_control(path, control, cfg.params, cfg.coeffs)
        value = hminus1_norm(P, path, cfg.coeffs)
        est = None
        write_json({"value": value, "method": "explicit"}, out / "hminus1.json")
        print(f"✅ ||P||^2_(-1,chi) = {value:.12g}")
    else:
        est = rate_functional(path, gamma, cfg.params, cfg.coeffs, method=args.method, basis=basis)
    if est is not None:
        write_json(est.to_dict(), out / f"{args.op}.json")
        print(f"✅ {args.op} ({est.method}) = {est.value:.12g}")
    return EXIT_OK


def cmd_smooth(args, out: Path) -> int:
    cfg = _load_run(args)
    path, gamma = _path_and_gamma(args, cfg)
    try:
        epsilons = [float(x) for x in args.eps.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--eps must be a comma-separated list, got {args.eps!r}") from None
    if not epsilons:
        raise ConfigError("--eps needs at least one value")
    if args.op == "density":
        report = density_check(path, gamma, epsilons, cfg.params, cfg.coeffs)
        write_json(report.to_dict(), out / "density.json")
        print(f"💾 Wrote {out / 'density.json'}")
        return EXIT_OK
    hydro = solve_hydro(gamma, cfg.params, cfg.coeffs, dt=path.dt, T=path.T)
    for eps in epsilons:
        smoothed = smoothing_chain(path, gamma, eps, cfg.params, cfg.coeffs, hydro)
        write_path(smoothed, out / f"smoothed_eps{eps:g}.csv")
        print(f"💾 Wrote {out / f'smoothed_eps{eps:g}.csv'}")
    return EXIT_OK


COMMANDS = {
    "stationary": cmd_stationary,
    "hydro": cmd_hydro,
    "simulate": cmd_simulate,
    "entropy": cmd_entropy,
    "rate": cmd_rate,
    "smooth": cmd_smooth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Boundary-driven WASEP simulator and rate-functional toolkit")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"), type=str.upper)
    sub = parser.add_subparsers(dest="command", required=True)

    def run_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="key = value run config")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default="results", help="output directory")
        return p

    run_command("stationary", "stationary profile by shooting and discrete Newton")
    p = run_command("hydro", "solve the hydrodynamic equation from gamma")
    p.add_argument("--gamma", help="initial profile CSV (u,value); default linear")
    p = run_command("simulate", "one microscopic trajectory")
    p.add_argument("--gamma", help="profile whose product measure starts the chain")
    for name, help_text in (("entropy", "tilted-dynamics entropy estimate"), ("rate", "rate functional of a path"),
                            ("smooth", "smoothing constructions")):
        p = run_command(name, help_text)
        p.add_argument("--path", required=True, help="path CSV (t,u,value)")
        p.add_argument("--gamma", help="initial profile CSV; default the path at t=0")
        p.add_argument("--replicas", type=int, default=None)
        if name == "rate":
            p.add_argument("--method", default="control", choices=RATE_METHODS)
            p.add_argument("--basis", default="32x8", help="test basis KxL")
            p.add_argument("--op", default="rate", choices=("rate", "energy", "hminus1"))
        if name == "smooth":
            p.add_argument("--eps", default="0.04,0.02,0.01", help="comma-separated eps values")
            p.add_argument("--op", default="chain", choices=("chain", "density"))

    p = sub.add_parser("experiment", help="run a named acceptance experiment")
    p.add_argument("spec", help="experiment spec file")
    p.add_argument("--out", default=None, help="overrides the spec output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    logger.debug("command %s with %s", args.command, vars(args))
    if args.command == "experiment":
        return run_experiment(args.spec, out=Path(args.out) if args.out else None)
    out = Path(args.out)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, PathFormatError, ValueError) as exc:
        print(f"❌ {exc}")
        return EXIT_INPUT
    except WasepError as exc:
        print(f"❌ {args.command} failed: {exc}")
        return EXIT_TOLERANCE
    except OSError as exc:
        print(f"❌ could not write to {out}: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
