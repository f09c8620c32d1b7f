#!/usr/bin/env python3
"""
Approximation of finite-cost paths by smooth interior paths.

The chain used by `density_check` is

    prepend hydro -> blend with hydro -> insert plateaus -> mollify in time -> resolvent in space

and each step is exposed on its own. Resolvents (I - eps Laplacian)^-1 with
Dirichlet or Neumann conditions are tabulated from their closed-form kernels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from hydrodynamics import DensityField, SpaceTimePath, solve_hydro
from model_core import ModelParams, ParameterError, SpaceGrid, TransportCoeffs, WasepError, chi0_unchecked
from rate_functional import rate_I_control

logger = logging.getLogger(__name__)

MIN_EPSILON = 1e-8
KINDS = ("dirichlet", "neumann")


class ResolventError(WasepError):
    """Resolvent parameter outside the representable range."""


# --- resolvent kernels ----------------------------------------------------

def _kernel_values(kind: str, a: float, u: np.ndarray) -> np.ndarray:
    lo = np.minimum.outer(u, u)
    hi = np.maximum.outer(u, u)
    core = 0.5 * a * np.exp(-a * (hi - lo))
    if kind == "dirichlet":
        left = -np.expm1(-2.0 * a * (1.0 + lo))
        right = -np.expm1(-2.0 * a * (1.0 - hi))
    else:
        left = 1.0 + np.exp(-2.0 * a * (1.0 + lo))
        right = 1.0 + np.exp(-2.0 * a * (1.0 - hi))
    return core * left * right / -math.expm1(-4.0 * a)


def _row_integrals(kind: str, a: float, u: np.ndarray) -> np.ndarray:
    if kind == "neumann":
        return np.ones_like(u)
    # 1 - cosh(a u) / cosh(a) without overflow
    au = a * np.abs(u)
    ratio = np.exp(au - a) * (1.0 + np.exp(-2.0 * au)) / (1.0 + math.exp(-2.0 * a))
    return np.clip(1.0 - ratio, 0.0, 1.0)


@dataclass(frozen=True)
class ResolventKernel:
    """(I - eps Laplacian)^-1 tabulated on a grid; `operator` already carries the quadrature weights."""

    kind: str
    epsilon: float
    grid: SpaceGrid
    values: np.ndarray = field(repr=False)
    operator: np.ndarray = field(repr=False)

    @property
    def lam(self) -> float:
        return 1.0 / self.epsilon

    def raw_row_error(self) -> float:
        """Largest gap between the trapezoid row integrals of the raw kernel and their closed form.

        `operator` has its rows rescaled to the closed form, so this is the
        quadrature error the rescaling hides. It is O(h^2 / eps).
        """
        sums = self.values @ self.grid.weights
        return float(np.max(np.abs(sums - _row_integrals(self.kind, math.sqrt(self.lam), self.grid.nodes))))

    def apply(self, values) -> np.ndarray:
        """Kernel quadrature along the last axis."""
        return np.asarray(values, dtype=float) @ self.operator.T


def resolvent_kernel(kind: str, epsilon: float, grid: SpaceGrid) -> ResolventKernel:
    kind = kind.lower()
    if kind not in KINDS:
        raise ParameterError(f"kernel kind must be one of {KINDS}, got {kind!r}")
    if not (epsilon > 0.0):
        raise ParameterError(f"epsilon must be positive, got {epsilon!r}")
    if epsilon < MIN_EPSILON:
        raise ResolventError(f"epsilon={epsilon:.3g} is below {MIN_EPSILON:g}; use a finer representation")
    a = math.sqrt(1.0 / epsilon)
    u = grid.nodes
    values = _kernel_values(kind, a, u)
    weighted = values * grid.weights[None, :]
    sums = weighted.sum(axis=1)
    target = _row_integrals(kind, a, u)
    scale = np.divide(target, sums, out=np.zeros_like(sums), where=sums > 0.0)
    if epsilon < grid.h**2:
        logger.debug("%s kernel at eps=%.3g is narrower than the grid (h=%.3g); rows are rescaled", kind, epsilon, grid.h)
    return ResolventKernel(kind, float(epsilon), grid, values, weighted * scale[:, None])


def apply_resolvent(profile: DensityField, kernel: ResolventKernel) -> DensityField:
    if profile.grid != kernel.grid:
        raise ParameterError("field and kernel live on different grids")
    return DensityField(profile.grid, np.clip(kernel.apply(profile.values), 0.0, 1.0))


# --- mollifier ------------------------------------------------------------

def bump(s):
    """Unnormalized exp(-1/(s(1-s))) on (0, 1), zero outside."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    safe = np.where(inside, s, 0.5)
    return np.where(inside, np.exp(-1.0 / (safe * (1.0 - safe))), 0.0)


@dataclass(frozen=True)
class MollifierSpec:
    """Bump iota on [0, 1] with unit integral and its switch function j."""

    epsilon: float
    n_table: int = 4097
    n_quad: int = 48

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise ParameterError(f"mollifier width must be positive, got {self.epsilon!r}")

    @cached_property
    def _table(self):
        s = np.linspace(0.0, 1.0, self.n_table)
        raw = bump(s)
        cumulative = integrate.cumulative_trapezoid(raw, s, initial=0.0)
        return s, raw / cumulative[-1], cumulative / cumulative[-1]

    def iota(self, s) -> np.ndarray:
        grid, density, _ = self._table
        return np.interp(s, grid, density, left=0.0, right=0.0)

    def j(self, s) -> np.ndarray:
        """0 on (-inf, 0], 1 on [1, inf), nondecreasing in between."""
        grid, _, switch = self._table
        return np.interp(s, grid, switch, left=0.0, right=1.0)

    def beta(self, t, a: float) -> np.ndarray:
        """beta_eps(t) = eps j((t - a)/eps)."""
        return self.epsilon * self.j((np.asarray(t) - a) / self.epsilon)

    def quadrature(self):
        """Nodes r in (0, 1) and weights summing to 1 for int iota(r) f(r) dr."""
        x, w = special.roots_legendre(self.n_quad)
        r = 0.5 * (x + 1.0)
        weights = 0.5 * w * bump(r)
        return r, weights / weights.sum()


# --- path constructions ---------------------------------------------------

def _resample(path: SpaceTimePath, source: SpaceTimePath) -> np.ndarray:
    return np.array([source.at(t) for t in path.times])


def prepend_hydro(
    path: SpaceTimePath,
    gamma: DensityField,
    epsilon: float,
    params: ModelParams,
    coeffs: TransportCoeffs,
    theta: float = 0.5,
) -> SpaceTimePath:
    """Hydro from gamma on [0, eps], the same segment reversed on [eps, 2 eps], then pi(t - 2 eps)."""
    if not (0.0 < 2.0 * epsilon < path.T):
        raise ParameterError(f"need 0 < 2 eps < T, got eps={epsilon}, T={path.T}")
    hydro = solve_hydro(gamma, params, coeffs, dt=path.dt, theta=theta, T=epsilon)
    out = np.empty_like(path.values)
    for k, t in enumerate(path.times):
        if t <= epsilon:
            out[k] = hydro.at(t)
        elif t <= 2.0 * epsilon:
            out[k] = hydro.at(2.0 * epsilon - t)
        else:
            out[k] = path.at(t - 2.0 * epsilon)
    return path.with_values(out)


def blend_with_hydro(path: SpaceTimePath, hydro: SpaceTimePath, epsilon: float) -> SpaceTimePath:
    """(1 - eps) pi + eps rho."""
    if not (0.0 <= epsilon <= 1.0):
        raise ParameterError(f"blend weight must lie in [0, 1], got {epsilon}")
    if hydro.grid != path.grid:
        raise ParameterError("path and hydro solution live on different grids")
    rho = hydro.values if np.array_equal(hydro.times, path.times) else _resample(path, hydro)
    return path.with_values((1.0 - epsilon) * path.values + epsilon * rho)


def insert_plateaus(path: SpaceTimePath, t0: float, epsilon: float, t_end: Optional[float] = None) -> SpaceTimePath:
    """pi up to t0, pi(t0) for a time eps, pi(t - eps) up to t_end + eps, then pi(t_end)."""
    t_end = path.T - epsilon if t_end is None else t_end
    if not (0.0 <= t0 <= t_end and t_end + epsilon <= path.T + 1e-12):
        raise ParameterError(f"plateau times out of range: t0={t0}, eps={epsilon}, t_end={t_end}, T={path.T}")
    out = np.empty_like(path.values)
    for k, t in enumerate(path.times):
        if t <= t0:
            out[k] = path.values[k]
        elif t <= t0 + epsilon:
            out[k] = path.at(t0)
        elif t <= t_end + epsilon:
            out[k] = path.at(t - epsilon)
        else:
            out[k] = path.at(t_end)
    return path.with_values(out)


def time_mollify(path: SpaceTimePath, spec: MollifierSpec, b: float) -> SpaceTimePath:
    """int iota_eps(s) pi(t + s) ds for t > b, pi extended constant past T."""
    if not (spec.epsilon < path.T - b):
        raise ParameterError(f"need eps < T - b, got eps={spec.epsilon}, b={b}, T={path.T}")
    r, w = spec.quadrature()
    out = path.values.copy()
    for k, t in enumerate(path.times):
        if t > b:
            out[k] = sum(wq * path.at(t + spec.epsilon * rq) for rq, wq in zip(r, w))
    return path.with_values(out)


def linear_profile(grid: SpaceGrid, params: ModelParams) -> np.ndarray:
    u = grid.nodes
    return params.rho_minus * (1 - u) / 2 + params.rho_plus * (1 + u) / 2


def resolvent_smooth(
    path: SpaceTimePath,
    epsilon: float,
    a: float,
    spec: MollifierSpec,
    params: ModelParams,
) -> SpaceTimePath:
    """rho* + R^D_{beta(t)} (pi_t - rho*) for t > a; beta below the grid resolution acts as the identity."""
    grid = path.grid
    base = linear_profile(grid, params)
    betas = epsilon * spec.j((path.times - a) / epsilon)
    floor = grid.h**2 / 16.0
    out = path.values.copy()
    for k, t in enumerate(path.times):
        if t <= a or betas[k] <= floor:
            continue
        kernel = resolvent_kernel("dirichlet", float(betas[k]), grid)
        out[k] = base + kernel.apply(path.values[k] - base)
    out[:, 0] = np.where(path.times > a, params.rho_minus, out[:, 0])
    out[:, -1] = np.where(path.times > a, params.rho_plus, out[:, -1])
    return path.with_values(np.clip(out, 0.0, 1.0))


def interiority_ratio(path: SpaceTimePath, smoothed: SpaceTimePath, epsilon: float, a: float) -> float:
    """max over t > a of chi0(R^N_{beta(t)} pi) / chi0(smoothed) at interior nodes."""
    spec = MollifierSpec(epsilon)
    grid = path.grid
    worst = 0.0
    for k, t in enumerate(path.times):
        beta = float(spec.beta(t, a))
        if t <= a or beta <= grid.h**2 / 16.0:
            continue
        smoothed_n = resolvent_kernel("neumann", beta, grid).apply(path.values[k])
        ratio = chi0_unchecked(smoothed_n[1:-1]) / np.maximum(chi0_unchecked(smoothed.values[k, 1:-1]), 1e-300)
        worst = max(worst, float(ratio.max()))
    return worst


# --- density check --------------------------------------------------------

@dataclass
class DensityReport:
    target: float
    rows: list = field(default_factory=list)
    monotone: bool = True

    def to_dict(self) -> dict:
        return {"target": self.target, "monotone_l1": self.monotone, "rows": self.rows}


def smoothing_chain(
    path: SpaceTimePath,
    gamma: DensityField,
    epsilon: float,
    params: ModelParams,
    coeffs: TransportCoeffs,
    hydro: Optional[SpaceTimePath] = None,
) -> SpaceTimePath:
    """All five constructions with schedules tied to the master eps."""
    hydro = hydro if hydro is not None else solve_hydro(gamma, params, coeffs, dt=path.dt, T=path.T)
    t0 = 0.5 * epsilon
    step = prepend_hydro(path, gamma, 0.5 * epsilon, params, coeffs)
    step = blend_with_hydro(step, hydro, 0.25 * epsilon)
    step = insert_plateaus(step, t0, 0.5 * epsilon)
    step = time_mollify(step, MollifierSpec(0.25 * epsilon), b=t0)
    return resolvent_smooth(step, 0.125 * epsilon, t0, MollifierSpec(0.125 * epsilon), params)


def density_check(
    path: SpaceTimePath,
    gamma: DensityField,
    epsilons: Sequence[float],
    params: ModelParams,
    coeffs: TransportCoeffs,
) -> DensityReport:
    """L1 distance to pi and I_T of the smoothed path for every eps, largest eps first."""
    target = rate_I_control(path, gamma, params, coeffs)
    if target.infinite:
        raise ParameterError("density check needs a path of finite cost")
    hydro = solve_hydro(gamma, params, coeffs, dt=path.dt, T=path.T)
    report = DensityReport(target=target.value)
    weights_t = np.full(path.times.size, path.dt)
    weights_t[[0, -1]] *= 0.5
    for eps in sorted(epsilons, reverse=True):
        smoothed = smoothing_chain(path, gamma, eps, params, coeffs, hydro)
        l1 = float(weights_t @ path.grid.integrate(np.abs(smoothed.values - path.values)))
        rate = rate_I_control(smoothed, gamma, params, coeffs, check=False)
        report.rows.append({"epsilon": eps, "l1_distance": l1, "rate": rate.value})
        logger.info("eps=%.4g  L1=%.3e  I=%.6g (target %.6g)", eps, l1, rate.value, target.value)
    l1s = [row["l1_distance"] for row in report.rows]
    report.monotone = all(b <= a for a, b in zip(l1s, l1s[1:]))
    if not report.monotone:
        logger.warning("L1 distance is not monotone in eps: %s", l1s)
    return report
