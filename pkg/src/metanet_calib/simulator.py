"""Forward simulation of the segment-based METANET dynamics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (BoundarySeries, MetanetError, NetworkGeometry, ParameterSet, RampSchedule,
                   ShapeMismatch, SimulationConfig, StateGrid)


class BetaAtUnity(MetanetError):
    """1 - beta fell below the singularity guard."""


def equilibrium_speed(rho_total, lanes, v_star, rho_star, alpha):
    """Exponential fundamental diagram evaluated at total density ``rho_total``."""
    per_lane = np.asarray(rho_total, dtype=float) / lanes
    return v_star * np.exp(-((per_lane / rho_star) ** alpha) / alpha)


def density_step(rho, q_up, q_self, beta, r, L, delta, beta_guard=1e-6):
    """Conservation update for one cell.  Returns ``(rho_next, clamped)``."""
    if 1.0 - beta < beta_guard:
        raise BetaAtUnity(f"beta={beta!r} leaves no mainline outflow")
    rho_next = rho + delta / L * (q_up - q_self / (1.0 - beta) + r)
    if rho_next < 0.0:
        return 0.0, True
    return rho_next, False


def speed_step(v, v_up, rho_perlane, rho_down_perlane, tau, eta, kappa, v_star, rho_star, alpha,
               L, delta, v_min=1.0):
    """Relaxation + convection + anticipation update for one cell.

    Returns ``(v_next, floored)``.  Densities are per lane.
    """
    v_eq = v_star * np.exp(-((rho_perlane / rho_star) ** alpha) / alpha)
    v_next = (v + delta / tau * (v_eq - v) + delta / L * v * (v_up - v)
              - eta * delta / (tau * L) * (rho_down_perlane - rho_perlane) / (rho_perlane + kappa))
    if v_next < v_min:
        return v_min, True
    return float(v_next), False


@dataclass(frozen=True, eq=False)
class SimulationResult:
    states: StateGrid
    flags: np.ndarray = field(repr=False)

    @property
    def density_clamps(self) -> int:
        return int(np.count_nonzero(self.flags & kernels.DENSITY_CLAMP))

    @property
    def speed_floors(self) -> int:
        return int(np.count_nonzero(self.flags & kernels.SPEED_FLOOR))

    def clamp_events(self) -> list[dict]:
        events = []
        for t, x in zip(*np.nonzero(self.flags)):
            f = int(self.flags[t, x])
            if f & kernels.DENSITY_CLAMP:
                events.append({"t": int(t), "x": int(x), "kind": "density_clamp"})
            if f & kernels.SPEED_FLOOR:
                events.append({"t": int(t), "x": int(x), "kind": "speed_floor"})
        return events

    def diagnostics(self) -> dict:
        return {"clamp_events": self.clamp_events()}


def check_beta(beta: np.ndarray, guard: float = 1e-6) -> None:
    bad = np.argwhere(1.0 - np.asarray(beta) < guard)
    if len(bad):
        t, x = bad[0]
        raise BetaAtUnity(f"beta[{t}, {x}]={beta[t, x]!r}: 1 - beta below guard {guard}")


def _prepare(geom, params, ramps, boundaries, t_steps):
    n = geom.n_segments
    if params.n_segments != n:
        raise ShapeMismatch(f"parameters cover {params.n_segments} segments, network has {n}")
    if ramps.shape != (t_steps, n):
        raise ShapeMismatch(f"ramp schedule {ramps.shape} != ({t_steps}, {n})")
    if boundaries.t_steps < t_steps:
        raise ShapeMismatch(f"boundary series has {boundaries.t_steps} steps, need {t_steps}")


def rollout_arrays(geom: NetworkGeometry, params: ParameterSet, ramps: RampSchedule,
                   boundaries: BoundarySeries, rho0, v0, config: SimulationConfig):
    """Raw rollout returning ``(rho, v, flags)`` arrays."""
    t_steps = config.t_steps
    _prepare(geom, params, ramps, boundaries, t_steps)
    check_beta(ramps.beta, config.beta_guard)
    rho0 = np.ascontiguousarray(rho0, dtype=float)
    v0 = np.ascontiguousarray(v0, dtype=float)
    if rho0.shape != (geom.n_segments,) or v0.shape != (geom.n_segments,):
        raise ShapeMismatch("initial row must hold N densities and N speeds")
    return kernels.forward(rho0, v0, np.ascontiguousarray(geom.lanes), np.ascontiguousarray(params.as_matrix()),
                           np.ascontiguousarray(ramps.r), np.ascontiguousarray(ramps.beta),
                           np.ascontiguousarray(boundaries.upstream_flow[:t_steps]),
                           np.ascontiguousarray(boundaries.upstream_speed[:t_steps]),
                           np.ascontiguousarray(boundaries.downstream_density[:t_steps]),
                           boundaries.downstream_lanes, geom.segment_length_km, config.delta_hours,
                           config.v_min)


def rollout(geom: NetworkGeometry, params: ParameterSet, ramps: RampSchedule, boundaries: BoundarySeries,
            initial_rho, initial_v, config: SimulationConfig) -> SimulationResult:
    """Roll the dynamics forward from the given initial row for ``config.t_steps`` rows.

    Row 0 of the result is the initial condition; row t+1 is computed
    entirely from row t quantities.  Flow is always ``rho * v``.
    """
    rho, v, flags = rollout_arrays(geom, params, ramps, boundaries, initial_rho, initial_v, config)
    return SimulationResult(StateGrid(rho, rho * v, v), flags)
