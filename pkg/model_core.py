#!/usr/bin/env python3
"""
Model core for the boundary-driven weakly asymmetric exclusion process.

Holds the run parameters, the transport coefficients (diffusivity D and
mobility chi), the macroscopic space grid, the closed-form equilibrium
objects of the reversible case and the `key = value` config loader.
"""

from __future__ import annotations

import configparser
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


class WasepError(Exception):
    """Base class for every error raised by the toolkit."""


class ParameterError(WasepError, ValueError):
    """Invalid model parameters or coefficients."""


class ConfigError(WasepError):
    """Malformed or missing configuration file."""


def mobility_chi0(a):
    """chi0(a) = a(1 - a); rejects densities outside [0, 1]."""
    arr = np.asarray(a, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ParameterError(f"density outside [0, 1]: {a!r}")
    out = arr * (1.0 - arr)
    return float(out) if out.ndim == 0 else out


def chi0_unchecked(a):
    arr = np.asarray(a, dtype=float)
    return arr * (1.0 - arr)


@dataclass(frozen=True)
class ModelParams:
    """Lattice half-width N, field E, reservoir densities and horizon T."""

    N: int
    E: float
    rho_minus: float
    rho_plus: float
    T: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ParameterError(f"N must be an integer >= 2, got {self.N!r}")
        if not (0.0 < self.rho_minus <= self.rho_plus < 1.0):
            raise ParameterError(
                f"need 0 < rho_minus <= rho_plus < 1, got ({self.rho_minus}, {self.rho_plus})"
            )
        if not (self.T > 0.0) or not math.isfinite(self.T):
            raise ParameterError(f"T must be positive, got {self.T!r}")
        if not math.isfinite(self.E):
            raise ParameterError(f"E must be finite, got {self.E!r}")

    @property
    def n_sites(self) -> int:
        return 2 * self.N - 1

    @property
    def sites(self) -> np.ndarray:
        """Site labels x = -N+1, ..., N-1."""
        return np.arange(-self.N + 1, self.N)

    @property
    def phi_minus(self) -> float:
        return math.log(self.rho_minus / (1.0 - self.rho_minus))

    @property
    def phi_plus(self) -> float:
        return math.log(self.rho_plus / (1.0 - self.rho_plus))

    @property
    def E0(self) -> float:
        return 0.5 * (self.phi_plus - self.phi_minus)

    def with_updates(self, **changes) -> "ModelParams":
        return replace(self, **changes)


def reversible_field(params: ModelParams):
    """Return (E0, phibar) where phibar is the affine chemical potential per site."""
    x = params.sites.astype(float)
    n = params.N
    phibar = params.phi_minus * (n - x) / (2 * n) + params.phi_plus * (n + x) / (2 * n)
    return params.E0, phibar


def reversible_marginals(params: ModelParams) -> np.ndarray:
    """Site occupation probabilities of the product measure built on phibar.

    Exact invariant marginals only when E equals E0.
    """
    _, phibar = reversible_field(params)
    # logistic written to stay finite for large |phibar|
    return 0.5 * (1.0 + np.tanh(0.5 * phibar))


def _central_difference(fn: Callable, a, step: float = FD_STEP):
    arr = np.asarray(a, dtype=float)
    lo = np.clip(arr - step, 0.0, 1.0)
    hi = np.clip(arr + step, 0.0, 1.0)
    return (np.asarray(fn(hi)) - np.asarray(fn(lo))) / (hi - lo)


@dataclass(frozen=True)
class TransportCoeffs:
    """Diffusivity D and mobility chi with optional derivative callables.

    `d` is an antiderivative of D normalized by d(0) = 0 and `h` an
    antiderivative of D/chi; both fall back to quadrature when absent.
    """

    name: str
    D: Callable
    chi: Callable
    C0: float
    dD: Optional[Callable] = None
    dchi: Optional[Callable] = None
    d: Optional[Callable] = None
    h: Optional[Callable] = None
    validated: bool = field(default=False, compare=False)

    def D_prime(self, a):
        if self.dD is not None:
            return self.dD(np.asarray(a, dtype=float))
        return _central_difference(self.D, a)

    def chi_prime(self, a):
        if self.dchi is not None:
            return self.dchi(np.asarray(a, dtype=float))
        return _central_difference(self.chi, a)

    def d_of(self, a):
        """Antiderivative of D with d(0) = 0."""
        if self.d is not None:
            return self.d(np.asarray(a, dtype=float))
        arr = np.asarray(a, dtype=float)
        flat = [integrate.quad(lambda s: float(self.D(s)), 0.0, float(v))[0] for v in arr.ravel()]
        out = np.asarray(flat).reshape(arr.shape)
        return float(out) if out.ndim == 0 else out

    def delta_h(self, rho_minus: float, rho_plus: float) -> float:
        """h(rho_plus) - h(rho_minus) with h' = D/chi; both densities interior."""
        if self.h is not None:
            return float(self.h(rho_plus) - self.h(rho_minus))
        value, _ = integrate.quad(
            lambda s: float(self.D(s)) / float(self.chi(s)), rho_minus, rho_plus, epsabs=1e-13, epsrel=1e-12
        )
        return value

    def validate(self, n_samples: int = 1001) -> "TransportCoeffs":
        """Check 1/C0 <= chi/chi0 <= C0 and min D > 0 on a sampled grid of [0, 1]."""
        a = np.linspace(0.0, 1.0, n_samples)
        diff = np.asarray(self.D(a), dtype=float) * np.ones_like(a)
        if not np.all(np.isfinite(diff)) or diff.min() <= 0.0:
            raise ParameterError(f"{self.name}: diffusivity must be strictly positive on [0, 1]")
        inner = a[1:-1]
        ratio = np.asarray(self.chi(inner), dtype=float) / chi0_unchecked(inner)
        lo, hi = 1.0 / self.C0, self.C0
        if ratio.min() < lo * (1 - 1e-12) or ratio.max() > hi * (1 + 1e-12):
            raise ParameterError(
                f"{self.name}: chi/chi0 ranges over [{ratio.min():.4g}, {ratio.max():.4g}], "
                f"outside [{lo:.4g}, {hi:.4g}]"
            )
        ends = np.abs(np.asarray(self.chi(np.array([0.0, 1.0])), dtype=float))
        if ends.max() > 1e-12:
            raise ParameterError(f"{self.name}: chi must vanish at 0 and 1")
        return replace(self, validated=True)


def _wasep() -> TransportCoeffs:
    return TransportCoeffs(
        name="wasep",
        D=lambda a: 0.5 * np.ones_like(np.asarray(a, dtype=float)),
        chi=chi0_unchecked,
        C0=1.0,
        dD=lambda a: np.zeros_like(np.asarray(a, dtype=float)),
        dchi=lambda a: 1.0 - 2.0 * np.asarray(a, dtype=float),
        d=lambda a: 0.5 * np.asarray(a, dtype=float),
        h=lambda a: 0.5 * np.log(np.asarray(a, dtype=float) / (1.0 - np.asarray(a, dtype=float))),
    )


def _wasep_scaled() -> TransportCoeffs:
    def chi(a):
        a = np.asarray(a, dtype=float)
        return a * (1.0 - a) * (1.0 + 0.5 * a)

    def dchi(a):
        a = np.asarray(a, dtype=float)
        return 1.0 - a - 1.5 * a * a

    return TransportCoeffs(
        name="wasep_scaled",
        D=lambda a: 0.5 * np.ones_like(np.asarray(a, dtype=float)),
        chi=chi,
        C0=1.5,
        dD=lambda a: np.zeros_like(np.asarray(a, dtype=float)),
        dchi=dchi,
        d=lambda a: 0.5 * np.asarray(a, dtype=float),
    )


def _porous() -> TransportCoeffs:
    return TransportCoeffs(
        name="porous",
        D=lambda a: 0.5 + 0.5 * np.asarray(a, dtype=float),
        chi=chi0_unchecked,
        C0=1.0,
        dD=lambda a: 0.5 * np.ones_like(np.asarray(a, dtype=float)),
        dchi=lambda a: 1.0 - 2.0 * np.asarray(a, dtype=float),
        d=lambda a: 0.5 * np.asarray(a, dtype=float) + 0.25 * np.asarray(a, dtype=float) ** 2,
    )


COEFFICIENT_PRESETS = {
    "wasep": _wasep,
    "wasep_scaled": _wasep_scaled,
    "porous": _porous,
}


def get_coefficients(name: str = "wasep") -> TransportCoeffs:
    try:
        factory = COEFFICIENT_PRESETS[name]
    except KeyError:
        raise ParameterError(
            f"unknown coefficient preset {name!r}; choose from {sorted(COEFFICIENT_PRESETS)}"
        ) from None
    return factory().validate()


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform node grid on [-1, 1] with M cells."""

    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ParameterError(f"grid needs M >= 2 cells, got {self.M!r}")

    @property
    def h(self) -> float:
        return 2.0 / self.M

    @property
    def nodes(self) -> np.ndarray:
        u = np.linspace(-1.0, 1.0, self.M + 1)
        u[0], u[-1] = -1.0, 1.0
        return u

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights of the node grid."""
        w = np.full(self.M + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def integrate(self, values) -> np.ndarray:
        """Trapezoid quadrature along the last axis."""
        return np.asarray(values, dtype=float) @ self.weights


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams
    coefficients: str = "wasep"
    M: int = 256
    dt: float = 0.005
    theta: float = 0.5
    replicas: int = 64
    seed: int = 0
    snapshot_dt: float = 0.0
    source: Optional[str] = None

    @property
    def grid(self) -> SpaceGrid:
        return SpaceGrid(self.M)

    @property
    def coeffs(self) -> TransportCoeffs:
        return get_coefficients(self.coefficients)


_REQUIRED_KEYS = ("N", "E", "rho_minus", "rho_plus", "T")


def parse_key_values(text: str, source: str = "<string>") -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return dict(parser["run"])


def config_from_mapping(values: dict, source: Optional[str] = None) -> RunConfig:
    missing = [k for k in _REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"{source or 'config'}: missing keys {missing}")
    try:
        rho_minus = float(values["rho_minus"])
        rho_plus = float(values["rho_plus"])
        raw_e = str(values["E"]).strip()
        if raw_e.upper() == "E0":
            plain = ModelParams(N=int(values["N"]), E=0.0, rho_minus=rho_minus, rho_plus=rho_plus, T=float(values["T"]))
            field_e = plain.E0
        else:
            field_e = float(raw_e)
        params = ModelParams(
            N=int(values["N"]), E=field_e, rho_minus=rho_minus, rho_plus=rho_plus, T=float(values["T"])
        )
        cfg = RunConfig(
            params=params,
            coefficients=str(values.get("coefficients", "wasep")).strip(),
            M=int(values.get("M", 256)),
            dt=float(values.get("dt", 0.005)),
            theta=float(values.get("theta", 0.5)),
            replicas=int(values.get("replicas", 64)),
            seed=int(values.get("seed", 0)),
            snapshot_dt=float(values.get("snapshot_dt", 0.0)),
            source=source,
        )
    except ParameterError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from exc
    SpaceGrid(cfg.M)
    get_coefficients(cfg.coefficients)
    if not (0.0 <= cfg.theta <= 1.0) or cfg.dt <= 0.0:
        raise ConfigError(f"{source or 'config'}: need dt > 0 and theta in [0, 1]")
    return cfg


def load_config(path) -> RunConfig:
    """Load a `key = value` run config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_key_values(path.read_text(encoding="utf-8"), source=str(path))
    logger.debug("loaded config %s: %s", path, values)
    return config_from_mapping(values, source=str(path))


def worker_count(default: Optional[int] = None) -> int:
    """Worker pool size; WASEP_WORKERS overrides it."""
    raw = os.getenv("WASEP_WORKERS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer WASEP_WORKERS=%r", raw)
    return default if default is not None else max(1, (os.cpu_count() or 1))
