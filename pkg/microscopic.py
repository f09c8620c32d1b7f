#!/usr/bin/env python3
"""
Continuous-time kinetic Monte Carlo for the boundary-driven WASEP.

Sites x = -N+1, ..., N-1 are stored at index i = x + N - 1. Event codes:
0 .. 2N-3 are bond exchanges i <-> i+1, 2N-2 is the left reservoir flip at
x = -(N-1) and 2N-1 the right reservoir flip at x = N-1.

A control field H tilts the bulk field from E to E + 2 grad H(t, (x+1/2)/N).
grad H is linear in time between the control field's time nodes, so inside
each window the larger endpoint rate bounds the true rate and Ogata thinning
against that bound is exact.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hydrodynamics import DensityField
from model_core import (
    ModelParams,
    ParameterError,
    SpaceGrid,
    WasepError,
    reversible_field,
    worker_count,
)
from rate_functional import ControlField

logger = logging.getLogger(__name__)

# -------- try numba ----------
try:
    import numba as nb

    HAVE_NUMBA = True
except Exception:
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.getenv("WASEP_JIT", "1") != "0"
njit = nb.njit if USE_JIT else (lambda f: f)

REBUILD_EVERY = 1 << 16
MAX_RATE = 1e300
INITIAL_CAPACITY = 1 << 22
DEFAULT_MAX_EVENTS = 2_000_000_000


class SimulationError(WasepError):
    """Rate overflow or exhausted event budget."""


# --- lattice types --------------------------------------------------------

@dataclass(frozen=True)
class LatticeConfig:
    """Occupancy eta(x) for x = -N+1 .. N-1."""

    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 1 or occ.size < 3 or occ.size % 2 == 0:
            raise ParameterError(f"occupancy must have odd length 2N-1 >= 3, got {occ.shape}")
        if not np.all((occ == 0) | (occ == 1)):
            raise ParameterError("occupancy entries must be 0 or 1")
        object.__setattr__(self, "occupancy", occ.astype(np.int8))

    @property
    def N(self) -> int:
        return (self.occupancy.size + 1) // 2

    @property
    def particles(self) -> int:
        return int(self.occupancy.sum())

    @classmethod
    def full(cls, N: int) -> "LatticeConfig":
        return cls(np.ones(2 * N - 1, dtype=np.int8))

    @classmethod
    def empty(cls, N: int) -> "LatticeConfig":
        return cls(np.zeros(2 * N - 1, dtype=np.int8))

    @classmethod
    def sample(cls, probabilities, rng: np.random.Generator) -> "LatticeConfig":
        """Independent Bernoulli(p_x) occupation."""
        p = np.asarray(probabilities, dtype=float)
        return cls((rng.random(p.size) < p).astype(np.int8))

    @classmethod
    def associated(cls, gamma: DensityField, params: ModelParams, rng: np.random.Generator) -> "LatticeConfig":
        """Product measure with marginals gamma(x/N)."""
        return cls.sample(gamma(params.sites / params.N), rng)


@dataclass(frozen=True)
class TiltSpec:
    """Optional control field H; None means the untilted dynamics."""

    control: Optional[ControlField] = None

    @property
    def active(self) -> bool:
        return self.control is not None

    def bond_fields(self, params: ModelParams, T: Optional[float] = None):
        """(window times, F at every window node and bond) with F = E + 2 grad H."""
        horizon = params.T if T is None else T
        n_bonds = 2 * params.N - 2
        if self.control is None:
            return np.array([0.0, horizon]), np.full((2, n_bonds), float(params.E))
        ctrl = self.control
        inside = ctrl.times[(ctrl.times > 0.0) & (ctrl.times < horizon)]
        nodes = np.concatenate(([0.0], inside, [horizon]))
        midpoints = (params.sites[:-1] + 0.5) / params.N
        grad_mid = np.array([np.interp(midpoints, ctrl.grid.nodes, row) for row in ctrl.grad])
        k = np.clip(np.searchsorted(ctrl.times, nodes, side="right") - 1, 0, max(ctrl.times.size - 2, 0))
        if ctrl.times.size > 1:
            span = ctrl.times[k + 1] - ctrl.times[k]
            w = np.clip((nodes - ctrl.times[k]) / span, 0.0, 1.0)[:, None]
            grad_nodes = (1 - w) * grad_mid[k] + w * grad_mid[np.minimum(k + 1, ctrl.times.size - 1)]
        else:
            grad_nodes = np.repeat(grad_mid[:1], nodes.size, axis=0)
        return nodes, params.E + 2.0 * grad_nodes


@dataclass
class TrajectoryLog:
    """Initial configuration plus the ordered (time, event code) record on [0, T]."""

    initial: LatticeConfig
    times: np.ndarray
    events: np.ndarray
    T: float
    final: Optional[LatticeConfig] = None
    n_events: int = 0
    occupation_time: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.initial.N

    @property
    def recorded(self) -> bool:
        return self.times.size == self.n_events

    def time_averaged_occupation(self) -> np.ndarray:
        return self.occupation_time / self.T

    def particle_counts(self) -> np.ndarray:
        """Particle number after each recorded event."""
        eta = self.initial.occupancy.astype(np.int64).copy()
        counts = np.empty(self.events.size, dtype=np.int64)
        for j, code in enumerate(self.events):
            apply_event(eta, int(code))
            counts[j] = eta.sum()
        return counts

    def configs_at(self, times) -> np.ndarray:
        if not self.recorded:
            raise SimulationError("trajectory was run without an event record")
        snaps = np.asarray(times, dtype=float)
        out = np.empty((snaps.size, self.initial.occupancy.size), dtype=np.int8)
        _replay_snapshots(self.initial.occupancy.copy(), self.times, self.events, snaps, out)
        return out


def describe_event(code: int, N: int):
    """('exchange', x) for the bond x <-> x+1, or ('flip', x) at a boundary site."""
    n_bonds = 2 * N - 2
    if 0 <= code < n_bonds:
        return "exchange", code - N + 1
    if code == n_bonds:
        return "flip", -(N - 1)
    if code == n_bonds + 1:
        return "flip", N - 1
    raise ParameterError(f"event code {code} out of range for N={N}")


def apply_event(eta: np.ndarray, code: int) -> None:
    n_bonds = eta.size - 1
    if code < n_bonds:
        eta[code], eta[code + 1] = eta[code + 1], eta[code]
    elif code == n_bonds:
        eta[0] = 1 - eta[0]
    else:
        eta[-1] = 1 - eta[-1]


# --- rates ----------------------------------------------------------------

def _flip_factors(params: ModelParams):
    g = math.exp(params.E / (2 * params.N))
    return g, 1.0 / g


def event_rates(config: LatticeConfig, params: ModelParams, tilt: Optional[TiltSpec] = None, t: float = 0.0) -> np.ndarray:
    """Rate of every event code for the configuration at time t."""
    eta = config.occupancy.astype(float)
    N = params.N
    if eta.size != params.n_sites:
        raise ParameterError(f"configuration has {eta.size} sites, params need {params.n_sites}")
    nodes, fields = (tilt or TiltSpec()).bond_fields(params, max(params.T, t))
    k = int(np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, nodes.size - 2))
    w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
    F = (1 - w) * fields[k] + w * fields[k + 1]
    s = eta[1:] - eta[:-1]
    half_n2 = 0.5 * N * N
    rates = np.empty(2 * N)
    rates[:-2] = np.where(s == 0, 0.0, half_n2 * np.exp(-F * s / (2 * N)))
    up, down = _flip_factors(params)
    z_left, z_right = eta[0], eta[-1]
    rates[-2] = half_n2 * (params.rho_minus * up * (1 - z_left) + (1 - params.rho_minus) * down * z_left)
    rates[-1] = half_n2 * (params.rho_plus * down * (1 - z_right) + (1 - params.rho_plus) * up * z_right)
    return rates


def detailed_balance_defect(config: LatticeConfig, params: ModelParams) -> float:
    """max |log mu(eta) r(eta, eta') - log mu(eta') r(eta', eta)| over all events, mu built on phibar.

    Every event and its reverse only touch the sites they flip or swap, so the
    reverse rates are read off the complemented configuration.
    """
    _, phibar = reversible_field(params)
    eta = config.occupancy.astype(float)
    forward = event_rates(config, params)
    backward = event_rates(LatticeConfig(1 - config.occupancy), params)
    s = eta[1:] - eta[:-1]
    log_ratio = np.concatenate((
        s * (phibar[:-1] - phibar[1:]),
        [(1 - 2 * eta[0]) * phibar[0], (1 - 2 * eta[-1]) * phibar[-1]],
    ))
    allowed = forward > 0.0
    if not allowed.any():
        return 0.0
    defect = np.log(forward[allowed]) - np.log(backward[allowed]) - log_ratio[allowed]
    return float(np.max(np.abs(defect)))


# --- jitted kernels -------------------------------------------------------

@njit
def _fenwick_build(tree, values):
    n = values.size
    tree[0] = 0.0
    for i in range(n):
        tree[i + 1] = values[i]
    for i in range(1, n + 1):
        j = i + (i & -i)
        if j <= n:
            tree[j] += tree[i]


@njit
def _fenwick_add(tree, i, delta):
    n = tree.size - 1
    i += 1
    while i <= n:
        tree[i] += delta
        i += i & -i


@njit
def _fenwick_total(tree):
    n = tree.size - 1
    s = 0.0
    i = n
    while i > 0:
        s += tree[i]
        i -= i & -i
    return s


@njit
def _fenwick_find(tree, target):
    n = tree.size - 1
    step = 1
    while step * 2 <= n:
        step *= 2
    pos = 0
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= target:
            pos = nxt
            target -= tree[nxt]
        step //= 2
    return min(pos, n - 1)


@njit
def _bond_bound(eta, b, F_lo, F_hi, half_n2, inv2n):
    s = int(eta[b + 1]) - int(eta[b])
    if s == 0:
        return 0.0
    return half_n2 * max(math.exp(-F_lo[b] * s * inv2n), math.exp(-F_hi[b] * s * inv2n))


@njit
def _flip_rate(z, rho, toward, away, half_n2):
    return half_n2 * (rho * toward * (1 - z) + (1.0 - rho) * away * z)


@njit
def _touch(eta, occ, last, i, t):
    occ[i] += eta[i] * (t - last[i])
    last[i] = t


@njit
def _run_window(eta, t, t_end, t_lo, t_hi, F_lo, F_hi, rho_m, rho_p, up, down, N, rng,
                out_t, out_e, count, record, limit, occ, last):
    """Advance eta from t to t_end; returns (time reached, event count, status).

    status 0: reached t_end, 1: record buffer full, 2: event limit hit.
    """
    n = eta.size
    n_bonds = n - 1
    half_n2 = 0.5 * N * N
    inv2n = 1.0 / (2.0 * N)
    span = t_hi - t_lo
    bound = np.empty(n + 1)
    for b in range(n_bonds):
        bound[b] = _bond_bound(eta, b, F_lo, F_hi, half_n2, inv2n)
    bound[n_bonds] = _flip_rate(eta[0], rho_m, up, down, half_n2)
    bound[n_bonds + 1] = _flip_rate(eta[n - 1], rho_p, down, up, half_n2)
    tree = np.zeros(n + 2)
    _fenwick_build(tree, bound)
    since_rebuild = 0
    while True:
        total = _fenwick_total(tree)
        if total <= 0.0:
            return t_end, count, 0
        t += -math.log(1.0 - rng.random()) / total
        if t >= t_end:
            return t_end, count, 0
        e = _fenwick_find(tree, rng.random() * total)
        if bound[e] <= 0.0:
            continue
        if e < n_bonds:
            s = int(eta[e + 1]) - int(eta[e])
            w = (t - t_lo) / span if span > 0.0 else 0.0
            rate = half_n2 * math.exp(-(F_lo[e] + w * (F_hi[e] - F_lo[e])) * s * inv2n)
            if rng.random() * bound[e] > rate:
                continue
            _touch(eta, occ, last, e, t)
            _touch(eta, occ, last, e + 1, t)
            tmp = eta[e]
            eta[e] = eta[e + 1]
            eta[e + 1] = tmp
            first = e
            stop = e + 1
        else:
            site = 0 if e == n_bonds else n - 1
            _touch(eta, occ, last, site, t)
            eta[site] = 1 - eta[site]
            first = site
            stop = site
        if record:
            out_t[count] = t
            out_e[count] = e
        count += 1
        for b in range(max(first - 1, 0), min(stop, n_bonds - 1) + 1):
            new = _bond_bound(eta, b, F_lo, F_hi, half_n2, inv2n)
            _fenwick_add(tree, b, new - bound[b])
            bound[b] = new
        if first == 0:
            new = _flip_rate(eta[0], rho_m, up, down, half_n2)
            _fenwick_add(tree, n_bonds, new - bound[n_bonds])
            bound[n_bonds] = new
        if stop == n - 1:
            new = _flip_rate(eta[n - 1], rho_p, down, up, half_n2)
            _fenwick_add(tree, n_bonds + 1, new - bound[n_bonds + 1])
            bound[n_bonds + 1] = new
        since_rebuild += 1
        if since_rebuild >= REBUILD_EVERY:
            _fenwick_build(tree, bound)
            since_rebuild = 0
        if record and count == out_t.size:
            return t, count, 1
        if count >= limit:
            return t, count, 2


@njit
def _bond_compensator(eta, b, ta, tb, t0, span, F_lo, F_hi, E, half_n2, inv2n):
    """int_ta^tb (lambda^H - lambda) dt for bond b, frozen configuration."""
    s = int(eta[b + 1]) - int(eta[b])
    if s == 0 or tb <= ta:
        return 0.0
    alpha = -F_lo[b] * s * inv2n
    beta = -(F_hi[b] - F_lo[b]) * s * inv2n / span if span > 0.0 else 0.0
    start = math.exp(alpha + beta * (ta - t0))
    if beta != 0.0:
        tilted = start * math.expm1(beta * (tb - ta)) / beta
    else:
        tilted = start * (tb - ta)
    return half_n2 * (tilted - math.exp(-E * s * inv2n) * (tb - ta))


@njit
def _replay_log_rn(eta, ev_t, ev_e, w_times, F_nodes, E, N):
    n = eta.size
    n_bonds = n - 1
    half_n2 = 0.5 * N * N
    inv2n = 1.0 / (2.0 * N)
    since = np.zeros(n_bonds)
    jumps = 0.0
    compensator = 0.0
    j = 0
    for k in range(w_times.size - 1):
        t0 = w_times[k]
        t1 = w_times[k + 1]
        span = t1 - t0
        F_lo = F_nodes[k]
        F_hi = F_nodes[k + 1]
        for b in range(n_bonds):
            since[b] = t0
        while j < ev_t.size and ev_t[j] < t1:
            t = ev_t[j]
            e = ev_e[j]
            if e < n_bonds:
                lo = max(e - 1, 0)
                hi = min(e + 1, n_bonds - 1)
                s = int(eta[e + 1]) - int(eta[e])
                w = (t - t0) / span if span > 0.0 else 0.0
                F = F_lo[e] + w * (F_hi[e] - F_lo[e])
                jumps += -(F - E) * s * inv2n
                for b in range(lo, hi + 1):
                    compensator += _bond_compensator(eta, b, since[b], t, t0, span, F_lo, F_hi, E, half_n2, inv2n)
                    since[b] = t
                tmp = eta[e]
                eta[e] = eta[e + 1]
                eta[e + 1] = tmp
            else:
                site = 0 if e == n_bonds else n - 1
                b = 0 if site == 0 else n_bonds - 1
                compensator += _bond_compensator(eta, b, since[b], t, t0, span, F_lo, F_hi, E, half_n2, inv2n)
                since[b] = t
                eta[site] = 1 - eta[site]
            j += 1
        for b in range(n_bonds):
            compensator += _bond_compensator(eta, b, since[b], t1, t0, span, F_lo, F_hi, E, half_n2, inv2n)
    return jumps - compensator


@njit
def _replay_snapshots(eta, ev_t, ev_e, snap_times, out):
    n_bonds = eta.size - 1
    j = 0
    for k in range(snap_times.size):
        while j < ev_t.size and ev_t[j] <= snap_times[k]:
            e = ev_e[j]
            if e < n_bonds:
                tmp = eta[e]
                eta[e] = eta[e + 1]
                eta[e + 1] = tmp
            elif e == n_bonds:
                eta[0] = 1 - eta[0]
            else:
                eta[eta.size - 1] = 1 - eta[eta.size - 1]
            j += 1
        out[k, :] = eta


# --- simulation -----------------------------------------------------------

def replica_streams(seed: int, replica: int):
    """(initial-configuration rng, dynamics rng) for one replica."""
    root = np.random.SeedSequence([int(seed), int(replica)])
    ss_init, ss_dyn = root.spawn(2)
    return np.random.default_rng(ss_init), np.random.default_rng(ss_dyn)


def simulate(
    initial: LatticeConfig,
    params: ModelParams,
    tilt: Optional[TiltSpec] = None,
    seed: int = 0,
    replica: int = 0,
    record: bool = True,
    T: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> TrajectoryLog:
    """Exact trajectory of the (possibly tilted) jump process on [0, T]."""
    if initial.occupancy.size != params.n_sites:
        raise ParameterError(f"configuration has {initial.occupancy.size} sites, params need {params.n_sites}")
    horizon = params.T if T is None else float(T)
    tilt = tilt or TiltSpec()
    nodes, fields = tilt.bond_fields(params, horizon)
    exponent = float(np.max(np.abs(fields))) / (2 * params.N)
    if not math.isfinite(exponent) or exponent > math.log(MAX_RATE / (0.5 * params.N**2)):
        raise SimulationError(f"jump rates overflow (N={params.N}, max |F|={np.max(np.abs(fields)):.3g})")
    peak = 0.5 * params.N**2 * math.exp(exponent)
    if rng is None:
        rng = replica_streams(seed, replica)[1]
    up, down = _flip_factors(params)
    eta = initial.occupancy.copy()
    n = eta.size
    occ = np.zeros(n)
    last = np.zeros(n)
    capacity = min(max(1024, int(0.6 * peak * n * horizon)), INITIAL_CAPACITY) if record else 1
    out_t = np.empty(capacity)
    out_e = np.empty(capacity, dtype=np.int32)
    count = 0
    for k in range(nodes.size - 1):
        t = float(nodes[k])
        while True:
            t, count, status = _run_window(
                eta, t, float(nodes[k + 1]), float(nodes[k]), float(nodes[k + 1]), fields[k], fields[k + 1],
                params.rho_minus, params.rho_plus, up, down, params.N, rng,
                out_t, out_e, count, record, max_events, occ, last,
            )
            if status == 0:
                break
            if status == 2:
                raise SimulationError(f"event budget of {max_events} exhausted at t={t:.4g}")
            out_t = np.concatenate((out_t, np.empty(out_t.size)))
            out_e = np.concatenate((out_e, np.empty(out_e.size, dtype=np.int32)))
    occ += eta * (horizon - last)
    logger.debug("simulated N=%d to T=%.4g: %d events", params.N, horizon, count)
    size = count if record else 0
    return TrajectoryLog(
        initial=initial,
        times=out_t[:size].copy(),
        events=out_e[:size].copy(),
        T=horizon,
        final=LatticeConfig(eta),
        n_events=count,
        occupation_time=occ,
    )


def empirical_density(config: LatticeConfig, params: ModelParams, grid: SpaceGrid) -> DensityField:
    """Cell averages over the dual cells of the grid nodes of sum_x eta(x) 1{|u - x/N| < 1/2N}.

    The outermost sites cover [-1 + 1/2N, 1 - 1/2N], so the half-cells at u = +-1
    read 1 - 1/(N h) for a full lattice.
    """
    N = params.N
    edges = (np.arange(-N + 1, N + 1) - 0.5) / N
    cumulative = np.concatenate(([0.0], np.cumsum(config.occupancy.astype(float)) / N))
    u = grid.nodes
    left = np.maximum(u - 0.5 * grid.h, -1.0)
    right = np.minimum(u + 0.5 * grid.h, 1.0)
    mass = np.interp(right, edges, cumulative) - np.interp(left, edges, cumulative)
    return DensityField(grid, np.clip(mass / (right - left), 0.0, 1.0))


def log_rn_derivative(traj: TrajectoryLog, params: ModelParams, tilt: Optional[TiltSpec]) -> float:
    """log dP^H/dP along a recorded trajectory."""
    if tilt is None or not tilt.active:
        raise ParameterError("log_rn_derivative needs a control field")
    if not traj.recorded:
        raise SimulationError("trajectory was run without an event record")
    nodes, fields = tilt.bond_fields(params, traj.T)
    return float(
        _replay_log_rn(
            traj.initial.occupancy.copy(), traj.times, traj.events.astype(np.int64), nodes, fields,
            float(params.E), params.N,
        )
    )


# --- ensembles ------------------------------------------------------------

@dataclass
class EntropyEstimate:
    estimate: float
    se: float
    replicas: int
    N: int
    log_rn: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    terminal_density: Optional[np.ndarray] = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "replicas": self.replicas, "N": self.N}


def _map_replicas(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _entropy_replica(job):
    params, control, gamma, grid, seed, replica = job
    rng_init, rng_dyn = replica_streams(seed, replica)
    tilt = TiltSpec(control)
    initial = LatticeConfig.associated(gamma, params, rng_init)
    traj = simulate(initial, params, tilt, rng=rng_dyn)
    return log_rn_derivative(traj, params, tilt), empirical_density(traj.final, params, grid).values


def estimate_entropy_rate(
    params: ModelParams,
    tilt: TiltSpec,
    gamma: DensityField,
    replicas: int,
    seed: int = 0,
    workers: Optional[int] = None,
) -> EntropyEstimate:
    """(1/N) E_{P^H}[log dP^H/dP] over tilted replicas, with its standard error."""
    if tilt is None or not tilt.active:
        raise ParameterError("entropy estimate needs a control field")
    if replicas < 2:
        raise ParameterError(f"need at least 2 replicas for a standard error, got {replicas}")
    jobs = [(params, tilt.control, gamma, gamma.grid, seed, r) for r in range(replicas)]
    results = _map_replicas(_entropy_replica, jobs, worker_count(workers))
    log_rn = np.array([r[0] for r in results]) / params.N
    terminal = np.mean([r[1] for r in results], axis=0)
    return EntropyEstimate(
        estimate=float(log_rn.mean()),
        se=float(log_rn.std(ddof=1) / math.sqrt(replicas)),
        replicas=replicas,
        N=params.N,
        log_rn=log_rn,
        terminal_density=terminal,
    )


def _occupation_replica(job):
    params, probabilities, seed, replica = job
    rng_init, rng_dyn = replica_streams(seed, replica)
    initial = LatticeConfig.sample(probabilities, rng_init)
    traj = simulate(initial, params, rng=rng_dyn, record=False)
    return traj.time_averaged_occupation()


def occupation_profile(
    params: ModelParams,
    probabilities,
    replicas: int,
    seed: int = 0,
    workers: Optional[int] = None,
):
    """Per-site time-averaged occupation over [0, T]: (mean, standard error) across replicas."""
    if replicas < 2:
        raise ParameterError(f"need at least 2 replicas for a standard error, got {replicas}")
    probs = np.asarray(probabilities, dtype=float) * np.ones(params.n_sites)
    jobs = [(params, probs, seed, r) for r in range(replicas)]
    samples = np.array(_map_replicas(_occupation_replica, jobs, worker_count(workers)))
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(replicas)


def _density_replica(job):
    params, gamma, grid, seed, replica = job
    rng_init, rng_dyn = replica_streams(seed, replica)
    initial = LatticeConfig.associated(gamma, params, rng_init)
    traj = simulate(initial, params, rng=rng_dyn, record=False)
    return empirical_density(traj.final, params, grid).values


def ensemble_density(
    params: ModelParams,
    gamma: DensityField,
    replicas: int,
    seed: int = 0,
    workers: Optional[int] = None,
) -> DensityField:
    """Replica mean of the empirical density at time T, started from configurations associated to gamma."""
    jobs = [(params, gamma, gamma.grid, seed, r) for r in range(replicas)]
    fields = _map_replicas(_density_replica, jobs, worker_count(workers))
    return DensityField(gamma.grid, np.mean(fields, axis=0))


def trajectory_snapshots(traj: TrajectoryLog, params: ModelParams, grid: SpaceGrid, snapshot_dt: float):
    """(times, densities) sampled every snapshot_dt from a recorded trajectory."""
    n = max(1, int(round(traj.T / snapshot_dt)))
    times = np.linspace(0.0, traj.T, n + 1)
    configs = traj.configs_at(times)
    values = np.array([empirical_density(LatticeConfig(c), params, grid).values for c in configs])
    return times, values
