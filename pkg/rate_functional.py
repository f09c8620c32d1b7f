#!/usr/bin/env python3
"""
Energy, the functional J_H and the dynamical rate functional I_T(pi|gamma).

The rate functional is evaluated three ways that check one another:

* ``control``     - solve the elliptic control equation for H and integrate
                    1/2 <chi(pi), (grad H)^2>;
* ``explicit413`` - the momentum-field formula with the R_t correction;
* ``variational`` - exact maximum of the concave quadratic J_H over the span
                    of a finite TestBasis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate, linalg

from hydrodynamics import DensityField, SpaceTimePath, space_gradient, time_derivative
from model_core import ModelParams, SpaceGrid, TransportCoeffs, WasepError, chi0_unchecked, get_coefficients

logger = logging.getLogger(__name__)

DELTA_FLOOR = 1e-12
RIDGE = 1e-12
BOUNDARY_TOL = 1e-9


class RateFunctionalError(WasepError):
    """Invalid control field, non-interior path or failed cross-check."""


@dataclass
class RateEstimate:
    """A value of Q or I_T together with how it was obtained."""

    value: float
    method: str
    infinite: bool = False
    residuals: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __float__(self) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "method": self.method,
            "infinite": self.infinite,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "flags": list(self.flags),
        }


def time_weights(times) -> np.ndarray:
    """Trapezoid weights of a uniform time grid."""
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        return np.zeros(times.size)
    w = np.full(times.size, times[1] - times[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def space_time_integral(values, grid: SpaceGrid, times) -> float:
    """Trapezoid rule in u then in t."""
    return float(time_weights(times) @ grid.integrate(values))


def _capped_inverse(values):
    """1/values with the integrand capped at 1/DELTA_FLOOR; returns (inverse, overflowed)."""
    arr = np.asarray(values, dtype=float)
    small = arr < DELTA_FLOOR
    return 1.0 / np.maximum(arr, DELTA_FLOOR), bool(small.any())


# --- field types ----------------------------------------------------------

@dataclass(frozen=True)
class ControlField:
    """H(t, u) on the path grid with H(t, +-1) = 0."""

    times: np.ndarray
    grid: SpaceGrid
    values: np.ndarray
    grad: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        if vals.shape != (self.times.size, self.grid.M + 1):
            raise RateFunctionalError(f"control field shape {vals.shape} does not match the path grid")
        edge = max(np.max(np.abs(vals[:, 0])), np.max(np.abs(vals[:, -1]))) if vals.size else 0.0
        if edge > BOUNDARY_TOL * max(1.0, float(np.max(np.abs(vals)))):
            raise RateFunctionalError(f"control field must vanish at u = +-1 (boundary value {edge:.3e})")
        object.__setattr__(self, "values", vals)
        if self.grad is None:
            object.__setattr__(self, "grad", space_gradient(vals, self.grid))
        else:
            object.__setattr__(self, "grad", np.asarray(self.grad, dtype=float))

    @classmethod
    def zero(cls, grid: SpaceGrid, times) -> "ControlField":
        times = np.asarray(times, dtype=float)
        return cls(times, grid, np.zeros((times.size, grid.M + 1)))

    @classmethod
    def from_function(cls, grid: SpaceGrid, times, fn, grad_fn=None) -> "ControlField":
        times = np.asarray(times, dtype=float)
        tt, uu = np.meshgrid(times, grid.nodes, indexing="ij")
        grad = None if grad_fn is None else grad_fn(tt, uu) * np.ones_like(tt)
        return cls(times, grid, fn(tt, uu) * np.ones_like(tt), grad)

    def scaled(self, factor: float) -> "ControlField":
        return ControlField(self.times, self.grid, factor * self.values, factor * self.grad)


def _time_gradient(values, times) -> np.ndarray:
    if times.size < 2:
        return np.zeros_like(values)
    return np.gradient(values, times[1] - times[0], axis=0, edge_order=2 if times.size > 2 else 1)


@dataclass(frozen=True)
class MomentumField:
    """P(t, u) with <<pi, d_t H>> = <<P, grad H>>; `mean` is the chi^-1 weighted mean per time."""

    times: np.ndarray
    grid: SpaceGrid
    values: np.ndarray
    mean: Optional[np.ndarray] = None

    def normalized(self, chi_values: np.ndarray) -> "MomentumField":
        """Shift every time slice so that <P chi^-1> = 0."""
        inv, _ = _capped_inverse(chi_values)
        weight = self.grid.integrate(inv)
        m = self.grid.integrate(self.values * inv) / weight
        return MomentumField(self.times, self.grid, self.values - m[:, None], m)

    def shifted(self, offsets) -> "MomentumField":
        offsets = np.broadcast_to(np.asarray(offsets, dtype=float), self.times.shape)
        return MomentumField(self.times, self.grid, self.values + offsets[:, None])


@dataclass(frozen=True)
class TestBasis:
    """Separable test functions phi_k(u) x tau_l(t), k = 1..K, l = 0..L-1.

    Space modes are sin(k pi (u+1)/2) or the Legendre differences
    P_(k+1) - P_(k-1); both vanish at u = +-1. The Legendre modes span the
    polynomials with zero boundary values, so they converge fast on targets
    that do not vanish at the boundary (the energy maximizer is one).
    """

    K: int
    L: int
    T: float
    time_modes: str = "cos"
    space_modes: str = "sine"

    __test__ = False

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise RateFunctionalError("basis needs K >= 1 and L >= 1")
        if self.time_modes not in ("cos", "hat"):
            raise RateFunctionalError(f"unknown time modes {self.time_modes!r}")
        if self.space_modes not in ("sine", "legendre"):
            raise RateFunctionalError(f"unknown space modes {self.space_modes!r}")

    @property
    def size(self) -> int:
        return self.K * self.L

    def _freq(self):
        return np.arange(1, self.K + 1)[:, None] * math.pi / 2

    def space(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.space_modes == "legendre":
            v = legendre.legvander(u, self.K + 1)
            return (v[:, 2:] - v[:, :-2]).T
        return np.sin(self._freq() * (u + 1.0))

    def space_grad(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.space_modes == "legendre":
            # (P_(k+1) - P_(k-1))' = (2k + 1) P_k
            k = np.arange(1, self.K + 1)[:, None]
            return (2 * k + 1) * legendre.legvander(u, self.K)[:, 1:].T
        k = self._freq()
        return k * np.cos(k * (u + 1.0))

    def time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.time_modes == "cos":
            return np.cos(np.arange(self.L)[:, None] * math.pi * t / self.T)
        if self.L == 1:
            return np.ones((1, t.size))
        centers = np.linspace(0.0, self.T, self.L)
        width = centers[1] - centers[0]
        return np.clip(1.0 - np.abs(t[None, :] - centers[:, None]) / width, 0.0, None)

    def time_deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.time_modes == "cos":
            l = np.arange(self.L)[:, None] * math.pi / self.T
            return -l * np.sin(l * t)
        if self.L == 1:
            return np.zeros((1, t.size))
        centers = np.linspace(0.0, self.T, self.L)
        width = centers[1] - centers[0]
        inside = np.abs(t[None, :] - centers[:, None]) < width
        return np.where(inside, -np.sign(t[None, :] - centers[:, None]) / width, 0.0)


def _solve_quadratic(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Maximizer of rhs.a - 1/2 a.G.a; ridge-regularized when G is singular."""
    try:
        return linalg.solve(gram, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        scale = max(1.0, float(np.max(np.abs(np.diag(gram)))))
        logger.warning("%s: singular Gram matrix, adding ridge %.1e", what, RIDGE * scale)
        return linalg.solve(gram + RIDGE * scale * np.eye(gram.shape[0]), rhs)


def _separable_gram(weight: np.ndarray, spatial: np.ndarray, temporal: np.ndarray, grid: SpaceGrid, tw) -> np.ndarray:
    """<<weight phi_i phi_j>> for phi_(k,l) = spatial_k(u) temporal_l(t), flattened (k, l)."""
    slice_gram = np.einsum("tu,ku,ju,u->tkj", weight, spatial, spatial, grid.weights, optimize=True)
    gram = np.einsum("t,lt,mt,tkj->kljm", tw, temporal, temporal, slice_gram, optimize=True)
    n = spatial.shape[0] * temporal.shape[0]
    return gram.reshape(n, n)


def _separable_pairing(values: np.ndarray, spatial: np.ndarray, temporal: np.ndarray, grid: SpaceGrid, tw) -> np.ndarray:
    """<<values, phi_(k,l)>> flattened (k, l)."""
    return np.einsum("tu,ku,lt,t,u->kl", values, spatial, temporal, tw, grid.weights, optimize=True).ravel()


# --- energy ---------------------------------------------------------------

def energy_Q(path: SpaceTimePath) -> RateEstimate:
    """Q(pi) = 1/2 int int (grad pi)^2 / chi0(pi)."""
    if path.is_empty:
        return RateEstimate(0.0, "explicit")
    grad = space_gradient(path.values, path.grid)
    chi0 = chi0_unchecked(path.values)
    integrand = np.where(grad == 0.0, 0.0, grad**2 / np.maximum(chi0, DELTA_FLOOR))
    if np.any(integrand > 1.0 / DELTA_FLOOR) or np.any((chi0 < DELTA_FLOOR) & (grad != 0.0)):
        logger.warning("energy integrand exceeds the 1/%.0e cap; Q flagged infinite", DELTA_FLOOR)
        return RateEstimate(math.inf, "explicit", infinite=True, flags=["energy_overflow"])
    return RateEstimate(0.5 * space_time_integral(integrand, path.grid, path.times), "explicit")


def energy_Q_variational(path: SpaceTimePath, basis: TestBasis) -> RateEstimate:
    """1/2 sup over the basis span of 2<<pi, grad H>> - <<H, H>>_chi0.

    The pairing <<pi, grad H>> is evaluated as -<<grad pi, H>> (H vanishes at
    +-1) with the same discrete gradient as energy_Q, so the result never
    exceeds energy_Q(path) and increases to it as the basis grows.
    """
    grid, tw = path.grid, time_weights(path.times)
    s, tau = basis.space(grid.nodes), basis.time(path.times)
    b = -2.0 * _separable_pairing(space_gradient(path.values, grid), s, tau, grid, tw)
    gram = 2.0 * _separable_gram(chi0_unchecked(path.values), s, tau, grid, tw)
    coef = _solve_quadratic(gram, b, "energy_Q_variational")
    return RateEstimate(0.5 * 0.5 * float(b @ coef), "variational", residuals={"basis_size": basis.size})


# --- J_H ------------------------------------------------------------------

def _finite_volume_laplacian(values: np.ndarray, grad: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Laplacian whose trapezoid integral equals grad(1) - grad(-1) exactly."""
    h = grid.h
    faces = np.diff(values, axis=-1) / h
    lap = np.empty_like(values)
    lap[..., 1:-1] = np.diff(faces, axis=-1) / h
    lap[..., 0] = (faces[..., 0] - grad[..., 0]) / (0.5 * h)
    lap[..., -1] = (grad[..., -1] - faces[..., -1]) / (0.5 * h)
    return lap


def j_hat(
    path: SpaceTimePath,
    H: ControlField,
    gamma: DensityField,
    params: ModelParams,
    coeffs: TransportCoeffs,
    d_shift: float = 0.0,
) -> float:
    """Quadrature of every term of J_H(pi), with d replaced by d + d_shift."""
    grid, times = path.grid, path.times
    tw = time_weights(times)
    if H.values.shape != path.values.shape:
        raise RateFunctionalError("control field and path live on different grids")

    def d(a):
        return coeffs.d_of(a) + d_shift

    lap = _finite_volume_laplacian(H.values, H.grad, grid)
    dH_dt = _time_gradient(H.values, times)
    chi = coeffs.chi(path.values)
    terms = (
        grid.integrate(path.values[-1] * H.values[-1])
        - grid.integrate(gamma.values * H.values[0])
        - tw @ grid.integrate(path.values * dH_dt)
        - tw @ grid.integrate(d(path.values) * lap)
        + float(d(params.rho_plus)) * (tw @ H.grad[:, -1])
        - float(d(params.rho_minus)) * (tw @ H.grad[:, 0])
        - 0.5 * params.E * (tw @ grid.integrate(chi * H.grad))
        - 0.5 * (tw @ grid.integrate(chi * H.grad**2))
    )
    return float(terms)


# --- optimal control ------------------------------------------------------

def _check_interior(chi: np.ndarray):
    bad = np.argwhere(chi[1:] < DELTA_FLOOR)
    if bad.size:
        k, i = bad[0]
        raise RateFunctionalError(f"path not interior: chi(pi) < {DELTA_FLOOR:g} at time index {k + 1}, node {i}")


def solve_control_H(path: SpaceTimePath, params: ModelParams, coeffs: TransportCoeffs) -> ControlField:
    """Solve d_t pi = div(D grad pi) - div(chi (E/2 + grad H)), H(t, +-1) = 0, slice by slice."""
    grid, times = path.grid, path.times
    chi = coeffs.chi(path.values)
    _check_interior(chi)
    chi_safe = np.maximum(chi, DELTA_FLOOR)
    flux = coeffs.D(path.values) * space_gradient(path.values, grid) - 0.5 * params.E * chi
    W = integrate.cumulative_trapezoid(time_derivative(path), dx=grid.h, axis=1, initial=0.0)
    inv_chi = 1.0 / chi_safe
    weight = grid.integrate(inv_chi)
    c = grid.integrate((flux - W) * inv_chi) / weight
    grad_H = (flux - W - c[:, None]) * inv_chi
    H = integrate.cumulative_trapezoid(grad_H, dx=grid.h, axis=1, initial=0.0)
    H[:, -1] = 0.0

    # the same constant from the mean-zero momentum gauge
    a = grid.integrate(W * inv_chi) / weight
    c_gauge = (coeffs.delta_h(params.rho_minus, params.rho_plus) - params.E) / weight - a
    # re-differentiate the stored H so the residual tests the field we return
    residual = time_derivative(path) - space_gradient(flux - chi * space_gradient(H, grid), grid)
    info = {
        "flux_constant": c,
        "gauge_mismatch": float(np.max(np.abs(c - c_gauge))),
        "pde_residual": float(np.max(np.abs(residual[:, 1:-1]))) if grid.M > 2 else 0.0,
    }
    logger.debug("control solve: gauge mismatch %.2e, residual %.2e", info["gauge_mismatch"], info["pde_residual"])
    return ControlField(times, grid, H, grad_H, info=info)


def _initial_mismatch(path: SpaceTimePath, gamma: DensityField) -> float:
    return float(np.max(np.abs(path.values[0] - gamma.values)))


def rate_I_control(
    path: SpaceTimePath,
    gamma: DensityField,
    params: ModelParams,
    coeffs: TransportCoeffs,
    check: bool = True,
    rtol: float = 1e-2,
    control: Optional[ControlField] = None,
) -> RateEstimate:
    """I_T = 1/2 int <chi(pi), (grad H)^2> dt, cross-checked against the expanded form."""
    if _initial_mismatch(path, gamma) > 1e-8:
        return RateEstimate(math.inf, "control", infinite=True, flags=["initial_mismatch"])
    H = control if control is not None else solve_control_H(path, params, coeffs)
    grid, times = path.grid, path.times
    tw = time_weights(times)
    chi = coeffs.chi(path.values)
    quadratic = float(tw @ grid.integrate(chi * H.grad**2))
    value = 0.5 * quadratic
    expanded = (
        grid.integrate(path.values[-1] * H.values[-1])
        - grid.integrate(path.values[0] * H.values[0])
        - tw @ grid.integrate(path.values * _time_gradient(H.values, times))
        + tw @ grid.integrate(coeffs.D(path.values) * space_gradient(path.values, grid) * H.grad)
        - 0.5 * params.E * (tw @ grid.integrate(chi * H.grad))
        - value
    )
    discrepancy = abs(float(expanded) - value)
    if check and discrepancy > rtol * max(1.0, value):
        raise RateFunctionalError(
            f"control formula {value:.6g} and expanded form {float(expanded):.6g} disagree"
        )
    residuals = {
        "expanded_form": float(expanded),
        "discrepancy": discrepancy,
        "gauge_mismatch": H.info.get("gauge_mismatch", 0.0),
        "pde_residual": H.info.get("pde_residual", 0.0),
    }
    return RateEstimate(value, "control", residuals=residuals)


def momentum_from_control(path: SpaceTimePath, H: ControlField, params: ModelParams, coeffs: TransportCoeffs) -> MomentumField:
    """P = D grad pi - chi (E/2 + grad H), before gauge normalization."""
    chi = coeffs.chi(path.values)
    values = coeffs.D(path.values) * space_gradient(path.values, path.grid) - chi * (0.5 * params.E + H.grad)
    return MomentumField(path.times, path.grid, values)


def rate_I_413(
    path: SpaceTimePath,
    gamma: DensityField,
    params: ModelParams,
    coeffs: TransportCoeffs,
    momentum: Optional[MomentumField] = None,
) -> RateEstimate:
    """1/2 int {||P - D grad pi + (E/2) chi||^2_{chi^-1} - R_t} dt with mean-zero P."""
    if _initial_mismatch(path, gamma) > 1e-8:
        return RateEstimate(math.inf, "explicit413", infinite=True, flags=["initial_mismatch"])
    grid, times = path.grid, path.times
    if momentum is None:
        momentum = momentum_from_control(path, solve_control_H(path, params, coeffs), params, coeffs)
    chi = coeffs.chi(path.values)
    inv_chi, overflow = _capped_inverse(chi)
    P = momentum.normalized(chi).values
    flux = coeffs.D(path.values) * space_gradient(path.values, grid) - 0.5 * params.E * chi
    norm = grid.integrate((P - flux) ** 2 * inv_chi)
    divergent = np.any(chi < DELTA_FLOOR, axis=1)
    delta_h = coeffs.delta_h(params.rho_minus, params.rho_plus)
    R = np.where(divergent, 0.0, (delta_h - params.E) ** 2 / grid.integrate(inv_chi))
    value = 0.5 * float(time_weights(times) @ (norm - R))
    flags = ["chi_inverse_divergent"] if overflow else []
    return RateEstimate(value, "explicit413", residuals={"R_max": float(np.max(R)), "delta_h": delta_h}, flags=flags)


def _linear_part(path: SpaceTimePath, gamma: DensityField, basis: TestBasis, params, coeffs) -> np.ndarray:
    """Every term of J_H except the quadratic one, for each basis element.

    The time and d terms are summed by parts first, so only first derivatives
    of the basis enter and the quadrature stays accurate for high modes.
    """
    grid, times = path.grid, path.times
    tw = time_weights(times)
    u = grid.nodes
    s, ds = basis.space(u), basis.space_grad(u)
    tau = basis.time(times)
    w = grid.weights
    start = np.outer((s * w) @ (path.values[0] - gamma.values), tau[:, 0])
    transport = np.einsum("tu,ku,u,lt,t->kl", time_derivative(path), s, w, tau, tw, optimize=True)
    flux = coeffs.D(path.values) * space_gradient(path.values, grid) - 0.5 * params.E * coeffs.chi(path.values)
    weak = np.einsum("tu,ku,u,lt,t->kl", flux, ds, w, tau, tw, optimize=True)
    # zero when the path is pinned at rho_-+
    gap_plus = float(coeffs.d_of(params.rho_plus)) - coeffs.d_of(path.values[:, -1])
    gap_minus = float(coeffs.d_of(params.rho_minus)) - coeffs.d_of(path.values[:, 0])
    edges = np.outer(ds[:, -1], tau @ (gap_plus * tw)) - np.outer(ds[:, 0], tau @ (gap_minus * tw))
    return (start + transport + weak + edges).ravel()


def rate_I_variational(
    path: SpaceTimePath,
    gamma: DensityField,
    basis: TestBasis,
    params: ModelParams,
    coeffs: TransportCoeffs,
) -> RateEstimate:
    """max over span(basis) of J_H(pi) = 1/2 l^T G^-1 l."""
    if _initial_mismatch(path, gamma) > 1e-8:
        return RateEstimate(math.inf, "variational", infinite=True, flags=["initial_mismatch"])
    grid, tw = path.grid, time_weights(path.times)
    ell = _linear_part(path, gamma, basis, params, coeffs)
    gram = _separable_gram(coeffs.chi(path.values), basis.space_grad(grid.nodes), basis.time(path.times), grid, tw)
    coef = _solve_quadratic(gram, ell, "rate_I_variational")
    return RateEstimate(0.5 * float(ell @ coef), "variational", residuals={"basis_size": basis.size})


# --- H^-1 norms -----------------------------------------------------------

def hminus1_norm(P: MomentumField, path: SpaceTimePath, coeffs: Optional[TransportCoeffs] = None) -> float:
    """int {<P^2/chi> - <P/chi>^2 / <1/chi>} dt."""
    coeffs = coeffs or get_coefficients("wasep")
    grid = path.grid
    chi = coeffs.chi(path.values)
    inv, _ = _capped_inverse(chi)
    divergent = np.any(chi < DELTA_FLOOR, axis=1)
    weight = grid.integrate(inv)
    correction = np.where(divergent, 0.0, grid.integrate(P.values * inv) ** 2 / weight)
    return float(time_weights(path.times) @ (grid.integrate(P.values**2 * inv) - correction))


def hminus1_norm_variational(
    P: MomentumField, path: SpaceTimePath, basis: TestBasis, coeffs: Optional[TransportCoeffs] = None
) -> float:
    """sup over span(basis) of 2<<P, grad G>> - <<chi, (grad G)^2>>."""
    coeffs = coeffs or get_coefficients("wasep")
    grid, tw = path.grid, time_weights(path.times)
    ds, tau = basis.space_grad(grid.nodes), basis.time(path.times)
    b = _separable_pairing(P.values, ds, tau, grid, tw)
    gram = _separable_gram(coeffs.chi(path.values), ds, tau, grid, tw)
    return float(b @ _solve_quadratic(gram, b, "hminus1_norm_variational"))


RATE_METHODS = ("control", "explicit413", "variational")


def rate_functional(
    path: SpaceTimePath,
    gamma: DensityField,
    params: ModelParams,
    coeffs: TransportCoeffs,
    method: str = "control",
    basis: Optional[TestBasis] = None,
) -> RateEstimate:
    """Dispatch on the method name used by the command line."""
    if method == "control":
        return rate_I_control(path, gamma, params, coeffs)
    if method == "explicit413":
        return rate_I_413(path, gamma, params, coeffs)
    if method == "variational":
        return rate_I_variational(path, gamma, basis or TestBasis(32, 8, path.T), params, coeffs)
    raise RateFunctionalError(f"unknown method {method!r}; choose from {', '.join(RATE_METHODS)}")
