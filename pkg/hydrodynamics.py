#!/usr/bin/env python3
"""
Deterministic solvers for the hydrodynamic equation

    d_t rho = div(D(rho) grad rho) - (E/2) div chi(rho),   rho(t, +-1) = rho_+-

and for its stationary profile. Fields live on the node grid of
`model_core.SpaceGrid`; the flux D grad rho - (E/2) chi(rho) is discretized
at cell faces so the scheme is conservative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, sparse
from scipy.sparse.linalg import spsolve

from model_core import ModelParams, ParameterError, SpaceGrid, TransportCoeffs, WasepError

logger = logging.getLogger(__name__)

BOUND_TOL = 1e-6
ESCAPE_MARGIN = 1e-3
PICARD_MAX_ITER = 50
PICARD_TOL = 1e-10


class HydroError(WasepError):
    """Picard nonconvergence or values escaping [0, 1]."""


class StationaryError(WasepError):
    """Shooting or Newton nonconvergence for the stationary profile."""


def _checked_density(values: np.ndarray, what: str) -> np.ndarray:
    if values.size and (values.min() < -BOUND_TOL or values.max() > 1.0 + BOUND_TOL):
        raise ParameterError(f"{what}: values outside [0, 1] (range {values.min():.3g}..{values.max():.3g})")
    return np.clip(values, 0.0, 1.0)


@dataclass(frozen=True)
class DensityField:
    """Density profile sampled at the grid nodes."""

    grid: SpaceGrid
    values: np.ndarray
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.M + 1,):
            raise ParameterError(f"field has shape {vals.shape}, grid needs ({self.grid.M + 1},)")
        object.__setattr__(self, "values", _checked_density(vals, "DensityField"))

    @classmethod
    def from_function(cls, grid: SpaceGrid, fn) -> "DensityField":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float) * np.ones(grid.M + 1))

    @classmethod
    def constant(cls, grid: SpaceGrid, value: float) -> "DensityField":
        return cls(grid, np.full(grid.M + 1, float(value)))

    @classmethod
    def linear(cls, grid: SpaceGrid, params: ModelParams) -> "DensityField":
        """rho*(u) = rho_- (1-u)/2 + rho_+ (1+u)/2."""
        u = grid.nodes
        return cls(grid, params.rho_minus * (1 - u) / 2 + params.rho_plus * (1 + u) / 2)

    def __call__(self, u):
        return np.interp(u, self.grid.nodes, self.values)

    def mass(self) -> float:
        return float(self.grid.integrate(self.values))


@dataclass(frozen=True)
class SpaceTimePath:
    """A macroscopic path: one density profile per uniformly spaced time."""

    times: np.ndarray
    values: np.ndarray
    grid: Optional[SpaceGrid]
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        if times.size == 0:
            object.__setattr__(self, "values", vals.reshape(0, 0 if self.grid is None else self.grid.M + 1))
            return
        if self.grid is None:
            raise ParameterError("non-empty path needs a grid")
        if vals.shape != (times.size, self.grid.M + 1):
            raise ParameterError(f"path values have shape {vals.shape}, expected ({times.size}, {self.grid.M + 1})")
        if times.size > 1:
            steps = np.diff(times)
            if steps.min() <= 0 or np.ptp(steps) > 1e-9 * max(1.0, abs(times[-1])):
                raise ParameterError("path times must be increasing with a uniform step")
        object.__setattr__(self, "values", _checked_density(vals, "SpaceTimePath"))

    @classmethod
    def empty(cls) -> "SpaceTimePath":
        return cls(np.empty(0), np.empty((0, 0)), None)

    @classmethod
    def constant(cls, profile: DensityField, times) -> "SpaceTimePath":
        times = np.asarray(times, dtype=float)
        return cls(times, np.tile(profile.values, (times.size, 1)), profile.grid)

    @classmethod
    def from_function(cls, grid: SpaceGrid, times, fn) -> "SpaceTimePath":
        """Sample fn(t, u) on the times x nodes mesh."""
        times = np.asarray(times, dtype=float)
        tt, uu = np.meshgrid(times, grid.nodes, indexing="ij")
        return cls(times, fn(tt, uu) * np.ones_like(tt), grid)

    @property
    def is_empty(self) -> bool:
        return self.times.size == 0

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def T(self) -> float:
        return float(self.times[-1]) if self.times.size else 0.0

    def field(self, k: int) -> DensityField:
        return DensityField(self.grid, self.values[k])

    def at(self, t: float) -> np.ndarray:
        """Profile at time t, linear in time between samples, constant outside."""
        if t <= self.times[0]:
            return self.values[0].copy()
        if t >= self.times[-1]:
            return self.values[-1].copy()
        k = int(min(np.searchsorted(self.times, t, side="right") - 1, self.times.size - 2))
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def with_values(self, values, **info) -> "SpaceTimePath":
        return SpaceTimePath(self.times, values, self.grid, info=info)


def time_grid(T: float, dt: float) -> np.ndarray:
    """Uniform times on [0, T] with step close to dt and landing exactly on T."""
    if dt <= 0 or T <= 0:
        raise ParameterError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    n = max(1, int(round(T / dt)))
    if abs(n * dt - T) > 1e-9 * T:
        n = max(1, math.ceil(T / dt - 1e-9))
    return np.linspace(0.0, T, n + 1)


def space_gradient(values, grid: SpaceGrid) -> np.ndarray:
    """Central differences inside, second-order one-sided at u = +-1."""
    return np.gradient(np.asarray(values, dtype=float), grid.h, axis=-1, edge_order=2)


def time_derivative(path: SpaceTimePath) -> np.ndarray:
    """d_t pi by central differences, one-sided at both ends."""
    if path.times.size < 2:
        return np.zeros_like(path.values)
    order = 2 if path.times.size > 2 else 1
    return np.gradient(path.values, path.dt, axis=0, edge_order=order)


def time_reverse(path: SpaceTimePath) -> SpaceTimePath:
    return SpaceTimePath(path.times, path.values[::-1].copy(), path.grid)


# --- conservative flux discretization ------------------------------------

def face_fluxes(rho: np.ndarray, params: ModelParams, coeffs: TransportCoeffs, grid: SpaceGrid) -> np.ndarray:
    """F_{i+1/2} = D(mid) (rho_{i+1} - rho_i)/h - (E/2) mean(chi) for every face."""
    mid = 0.5 * (rho[1:] + rho[:-1])
    chi = coeffs.chi(rho)
    return coeffs.D(mid) * np.diff(rho) / grid.h - 0.5 * params.E * 0.5 * (chi[1:] + chi[:-1])


def divergence(rho: np.ndarray, params: ModelParams, coeffs: TransportCoeffs, grid: SpaceGrid) -> np.ndarray:
    """Discrete right-hand side at interior nodes."""
    return np.diff(face_fluxes(rho, params, coeffs, grid)) / grid.h


def boundary_flux(profile: DensityField, params: ModelParams, coeffs: TransportCoeffs):
    """Fluxes through the outermost faces: (left, right)."""
    faces = face_fluxes(profile.values, params, coeffs, profile.grid)
    return float(faces[0]), float(faces[-1])


def _diffusion_matrix(d_face: np.ndarray, h: float):
    lower = d_face[1:-1] / h**2
    upper = d_face[1:-1] / h**2
    diag = -(d_face[:-1] + d_face[1:]) / h**2
    return sparse.diags([lower, diag, upper], offsets=[-1, 0, 1], format="csc")


def _picard_step(rho_n, params, coeffs, grid, dt, theta):
    """One theta-step; returns the new profile and the Picard iteration count."""
    h = grid.h
    half_e = 0.5 * params.E
    explicit = rho_n[1:-1] + dt * (1.0 - theta) * divergence(rho_n, params, coeffs, grid)
    iterate = rho_n.copy()
    iterate[0], iterate[-1] = params.rho_minus, params.rho_plus
    eye = sparse.identity(grid.M - 1, format="csc")
    for it in range(1, PICARD_MAX_ITER + 1):
        d_face = coeffs.D(0.5 * (iterate[1:] + iterate[:-1]))
        chi = coeffs.chi(iterate)
        drift = -half_e * np.diff(0.5 * (chi[1:] + chi[:-1])) / h
        bc = np.zeros(grid.M - 1)
        bc[0] += d_face[0] * iterate[0] / h**2
        bc[-1] += d_face[-1] * iterate[-1] / h**2
        matrix = eye - dt * theta * _diffusion_matrix(d_face, h)
        interior = spsolve(matrix, explicit + dt * theta * (drift + bc))
        change = np.max(np.abs(interior - iterate[1:-1]))
        iterate[1:-1] = interior
        if change < PICARD_TOL:
            return iterate, it
        if not np.all(np.isfinite(interior)):
            break
    raise HydroError(f"Picard loop did not converge in {PICARD_MAX_ITER} iterations (dt={dt:.3g})")


def solve_hydro(
    gamma: DensityField,
    params: ModelParams,
    coeffs: TransportCoeffs,
    dt: float,
    theta: float = 0.5,
    T: Optional[float] = None,
) -> SpaceTimePath:
    """Evolve gamma on [0, T] with a theta-weighted (Crank-Nicolson) Picard scheme."""
    horizon = params.T if T is None else T
    times = time_grid(horizon, dt)
    step = times[1] - times[0]
    grid = gamma.grid
    values = np.empty((times.size, grid.M + 1))
    values[0] = gamma.values
    max_iter = 0
    max_residual = 0.0
    for n in range(1, times.size):
        rho_n = values[n - 1]
        rho_next, iters = _picard_step(rho_n, params, coeffs, grid, step, theta)
        lo, hi = rho_next.min(), rho_next.max()
        if lo < -ESCAPE_MARGIN or hi > 1.0 + ESCAPE_MARGIN:
            raise HydroError(
                f"solution escaped [0, 1] at t={times[n]:.4g} (range {lo:.4g}..{hi:.4g}); reduce dt or use theta=1"
            )
        residual = rho_next[1:-1] - rho_n[1:-1] - step * (
            theta * divergence(rho_next, params, coeffs, grid) + (1 - theta) * divergence(rho_n, params, coeffs, grid)
        )
        max_residual = max(max_residual, float(np.max(np.abs(residual))))
        max_iter = max(max_iter, iters)
        values[n] = np.clip(rho_next, 0.0, 1.0)
    logger.debug("hydro solve: %d steps, max Picard iterations %d", times.size - 1, max_iter)
    return SpaceTimePath(times, values, grid, info={"picard_max_iter": max_iter, "max_residual": max_residual})


# --- stationary profile ---------------------------------------------------

def _shoot(J, params, coeffs, want_sensitivity=True, t_eval=None):
    half_e = 0.5 * params.E

    def rhs(u, y):
        rho = y[0]
        d = float(coeffs.D(rho))
        flux = J + half_e * float(coeffs.chi(rho))
        out = [flux / d]
        if want_sensitivity:
            s = y[1]
            ds = (1.0 + half_e * float(coeffs.chi_prime(rho)) * s) / d - flux * float(coeffs.D_prime(rho)) * s / d**2
            out.append(ds)
        return out

    def escaped(u, y):
        return min(y[0] + 0.5, 1.5 - y[0])

    escaped.terminal = True
    y0 = [params.rho_minus, 0.0] if want_sensitivity else [params.rho_minus]
    return integrate.solve_ivp(
        rhs, (-1.0, 1.0), y0, method="DOP853", rtol=1e-12, atol=1e-13, events=escaped, t_eval=t_eval
    )


def solve_stationary(
    params: ModelParams,
    coeffs: TransportCoeffs,
    grid: Optional[SpaceGrid] = None,
    tol: float = 1e-12,
    max_iter: int = 60,
) -> DensityField:
    """Stationary profile by damped Newton shooting on the flux constant J.

    The first integral D(rho) rho' - (E/2) chi(rho) = J turns the boundary
    value problem into a root find for J with rho(1) = rho_+.
    """
    grid = grid or SpaceGrid(256)
    ref = DensityField.linear(grid, params).values
    J = float(np.mean(coeffs.D(ref) * 0.5 * (params.rho_plus - params.rho_minus) - 0.5 * params.E * coeffs.chi(ref)))
    residual = math.inf
    for it in range(max_iter):
        sol = _shoot(J, params, coeffs)
        if sol.status == 1 or not sol.success:
            raise StationaryError(f"shooting failed for initial flux J={J:.6g}")
        residual = sol.y[0, -1] - params.rho_plus
        if abs(residual) < tol:
            break
        slope = sol.y[1, -1]
        step = residual / slope
        damping = 1.0
        while True:
            trial = J - damping * step
            trial_sol = _shoot(trial, params, coeffs, want_sensitivity=False)
            if trial_sol.status == 0 and abs(trial_sol.y[0, -1] - params.rho_plus) < abs(residual):
                J = trial
                break
            damping *= 0.5
            if damping < 1e-8:
                raise StationaryError(f"damped Newton stalled at J={J:.10g}, residual {residual:.3e}")
    else:
        raise StationaryError(f"no convergence in {max_iter} Newton steps (residual {residual:.3e})")

    sol = _shoot(J, params, coeffs, want_sensitivity=False, t_eval=grid.nodes)
    values = np.array(sol.y[0])
    values[0], values[-1] = params.rho_minus, params.rho_plus
    profile = DensityField(grid, values)
    flux = coeffs.D(values) * space_gradient(values, grid) - 0.5 * params.E * coeffs.chi(values)
    profile.info.update({"J": J, "newton_iterations": it, "flux_deviation": float(np.max(np.abs(flux - J)))})
    return profile


def discrete_stationary(
    params: ModelParams,
    coeffs: TransportCoeffs,
    grid: SpaceGrid,
    initial: Optional[DensityField] = None,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> DensityField:
    """Zero of the discrete conservative operator used by `solve_hydro`."""
    start = initial if initial is not None else solve_stationary(params, coeffs, grid)
    rho = start.values.copy()
    h = grid.h
    half_e = 0.5 * params.E
    for it in range(max_iter):
        g = divergence(rho, params, coeffs, grid)
        if np.max(np.abs(g)) * h * h < tol:
            break
        mid = 0.5 * (rho[1:] + rho[:-1])
        grad = np.diff(rho) / h
        d_mid, dd_mid = coeffs.D(mid), coeffs.D_prime(mid)
        dchi = coeffs.chi_prime(rho)
        dF_left = 0.5 * dd_mid * grad - d_mid / h - half_e * 0.5 * dchi[:-1]
        dF_right = 0.5 * dd_mid * grad + d_mid / h - half_e * 0.5 * dchi[1:]
        diag = (dF_left[1:] - dF_right[:-1]) / h
        lower = -dF_left[1:-1] / h
        upper = dF_right[1:-1] / h
        jac = sparse.diags([lower, diag, upper], offsets=[-1, 0, 1], format="csc")
        delta = spsolve(jac, -g)
        damping = 1.0
        base = np.max(np.abs(g))
        while damping > 1e-6:
            trial = rho.copy()
            trial[1:-1] += damping * delta
            if np.all((trial > 0) & (trial < 1)) and np.max(np.abs(divergence(trial, params, coeffs, grid))) < base:
                rho = trial
                break
            damping *= 0.5
        else:
            break
    g = divergence(rho, params, coeffs, grid)
    if np.max(np.abs(g)) * h * h > 1e-9:
        raise StationaryError(f"discrete stationary Newton stalled (residual {np.max(np.abs(g)):.3e})")
    faces = face_fluxes(rho, params, coeffs, grid)
    profile = DensityField(grid, rho)
    profile.info.update({"J": float(np.mean(faces)), "flux_deviation": float(np.ptp(faces)), "newton_iterations": it})
    return profile
