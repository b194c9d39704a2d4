"""Synthetic lane-drop corridors used as calibration benchmarks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .core import (PARAM_NAMES, BoundarySeries, MetanetError, NetworkGeometry, ParameterSet, ParamSharing,
                   RampSchedule, SimulationConfig, StateGrid, Violation, ValidationError, validate_geometry)
from .simulator import equilibrium_speed, rollout

DEFAULT_PARAMS = dict(tau=18 / 3600, eta=30.0, kappa=40.0, v_star=120.0, rho_star=37.45, alpha=1.4)


class RampOnMaskedSegment(MetanetError):
    pass


@dataclass
class RampRecipe:
    """Time profile of one ramp.

    kind is ``constant`` (value), ``triangular`` (0 at start_min and
    end_min, ``value`` at peak_min) or ``step`` (``base`` before start_min,
    ``value`` from then on).
    """

    segment: int
    kind: str = "constant"
    value: float = 0.0
    start_min: float = 0.0
    peak_min: float = 0.0
    end_min: float = 0.0
    base: float = 0.0

    def profile(self, t_steps: int, delta_hours: float) -> np.ndarray:
        minutes = np.arange(t_steps) * delta_hours * 60.0
        if self.kind == "constant":
            return np.full(t_steps, float(self.value))
        if self.kind == "step":
            return np.where(minutes >= self.start_min, float(self.value), float(self.base))
        if self.kind == "triangular":
            rise = np.clip((minutes - self.start_min) / max(self.peak_min - self.start_min, 1e-12), 0, 1)
            fall = np.clip((self.end_min - minutes) / max(self.end_min - self.peak_min, 1e-12), 0, 1)
            return float(self.value) * np.minimum(rise, fall)
        raise ValueError(f"unknown ramp recipe kind {self.kind!r}")


@dataclass
class DemandProfile:
    """Upstream demand: baseline with a trapezoidal raised plateau."""

    baseline: float = 4000.0
    peak: float = 7000.0
    peak_start_min: float = 10.0
    peak_duration_min: float = 20.0
    transition_min: float = 2.0
    noise_std: float = 0.0

    def series(self, t_steps: int, delta_hours: float, rng: np.random.Generator) -> np.ndarray:
        minutes = np.arange(t_steps) * delta_hours * 60.0
        start, stop = self.peak_start_min, self.peak_start_min + self.peak_duration_min
        w = self.transition_min
        up = np.clip((minutes - start) / w + 1.0, 0, 1) if w > 0 else (minutes >= start).astype(float)
        down = np.clip((stop - minutes) / w + 1.0, 0, 1) if w > 0 else (minutes < stop).astype(float)
        d = self.baseline + (self.peak - self.baseline) * np.minimum(up, down)
        if self.noise_std > 0:
            d = d + rng.normal(0.0, self.noise_std, t_steps)
        return np.clip(d, 0.0, None)


@dataclass
class ScenarioSpec:
    n_segments: int = 20
    segment_length_km: float = 0.4
    lanes: Optional[list] = None
    lanes_upstream: float = 4.0
    lanes_downstream: float = 2.0
    drop_after: int = 10
    params: dict = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    demand: DemandProfile = field(default_factory=DemandProfile)
    onramps: list = field(default_factory=list)
    offramps: list = field(default_factory=list)
    delta_hours: float = 10.0 / 3600.0
    t_steps: int = 360
    seed: int = 0

    def geometry(self) -> NetworkGeometry:
        if self.lanes is not None:
            lanes = np.asarray(self.lanes, dtype=float)
        else:
            lanes = np.where(np.arange(self.n_segments) < self.drop_after,
                             self.lanes_upstream, self.lanes_downstream)
        on = np.zeros(self.n_segments, dtype=bool)
        off = np.zeros(self.n_segments, dtype=bool)
        on[[rr.segment for rr in self.onramps]] = True
        off[[rr.segment for rr in self.offramps]] = True
        return validate_geometry(NetworkGeometry(self.n_segments, self.segment_length_km, lanes, on, off))

    def parameter_set(self) -> ParameterSet:
        values = {p: np.broadcast_to(np.asarray(self.params[p], dtype=float), (self.n_segments,))
                  for p in PARAM_NAMES}
        uniform = all(np.all(values[p] == values[p][0]) for p in PARAM_NAMES)
        return ParameterSet(**values, sharing=ParamSharing.SI if uniform else ParamSharing.SV)

    def config(self) -> SimulationConfig:
        return SimulationConfig(delta_hours=self.delta_hours, t_steps=self.t_steps)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d.pop("kind", None)
        if "demand" in d:
            d["demand"] = DemandProfile(**d["demand"])
        for key in ("onramps", "offramps"):
            d[key] = [RampRecipe(**rr) for rr in d.get(key, [])]
        if "params" in d:
            d["params"] = {**DEFAULT_PARAMS, **d["params"]}
        return cls(**d)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        out = asdict(self)
        out["params"] = {k: (np.asarray(v).tolist()) for k, v in self.params.items()}
        return out


@dataclass(frozen=True, eq=False)
class ScenarioBundle:
    geometry: NetworkGeometry
    truth: StateGrid
    boundaries: BoundarySeries
    params: ParameterSet
    ramps: RampSchedule
    config: SimulationConfig


def free_flow_density(flow: float, lanes: float, v_star: float, rho_star: float, alpha: float) -> float:
    """Total density on the uncongested branch carrying ``flow``; critical density when over capacity."""
    crit = rho_star * lanes
    cap = crit * equilibrium_speed(crit, lanes, v_star, rho_star, alpha)
    if flow <= 0:
        return 0.0
    if flow >= cap:
        return crit
    return brentq(lambda k: k * equilibrium_speed(k, lanes, v_star, rho_star, alpha) - flow, 0.0, crit,
                  xtol=1e-13, rtol=1e-15)


def default_bottleneck_spec(**overrides) -> ScenarioSpec:
    return ScenarioSpec(**overrides)


def default_ramped_spec(**overrides) -> ScenarioSpec:
    """Lane-drop corridor with a triangular on-ramp pulse, a split-ratio off-ramp
    and mildly heterogeneous segment parameters."""
    n = overrides.pop("n_segments", 20)
    x = np.arange(n)
    params = dict(DEFAULT_PARAMS)
    params["v_star"] = (120.0 + 8.0 * np.sin(2 * np.pi * x / n)).tolist()
    params["rho_star"] = (37.45 + 4.0 * np.cos(2 * np.pi * x / n)).tolist()
    base = dict(
        n_segments=n,
        params=params,
        demand=DemandProfile(baseline=3200.0, peak=3200.0, peak_duration_min=0.0),
        onramps=[RampRecipe(segment=5, kind="triangular", value=1200.0, start_min=10.0, peak_min=25.0,
                            end_min=40.0)],
        offramps=[RampRecipe(segment=15, kind="constant", value=0.2)],
    )
    base.update(overrides)
    return ScenarioSpec(**base)


def _ramp_schedule(spec: ScenarioSpec, geom: NetworkGeometry) -> RampSchedule:
    T, n = spec.t_steps, spec.n_segments
    r = np.zeros((T, n))
    beta = np.zeros((T, n))
    for rr in spec.onramps:
        if not geom.onramp_mask[rr.segment]:
            raise RampOnMaskedSegment(f"on-ramp recipe at segment {rr.segment} without an on-ramp")
        r[:, rr.segment] += rr.profile(T, spec.delta_hours)
    for rr in spec.offramps:
        if not geom.offramp_mask[rr.segment]:
            raise RampOnMaskedSegment(f"off-ramp recipe at segment {rr.segment} without an off-ramp")
        beta[:, rr.segment] += rr.profile(T, spec.delta_hours)
    ramps = RampSchedule(r, beta)
    return ramps.check(geom)


def free_flow_state(geom: NetworkGeometry, params: ParameterSet, ramps: RampSchedule, upstream_flow: float):
    """Uncongested equilibrium row carrying ``upstream_flow`` plus the row-0 ramp flows."""
    n = geom.n_segments
    rho0 = np.empty(n)
    v0 = np.empty(n)
    flow = upstream_flow
    for x in range(n):
        flow = (flow + ramps.r[0, x]) * (1.0 - ramps.beta[0, x])
        rho0[x] = free_flow_density(flow, geom.lanes[x], params.v_star[x], params.rho_star[x], params.alpha[x])
        v0[x] = equilibrium_speed(rho0[x], geom.lanes[x], params.v_star[x], params.rho_star[x], params.alpha[x])
    return rho0, v0


def generate(spec: ScenarioSpec) -> ScenarioBundle:
    """Roll the corridor out under ``spec`` and package everything needed to pose a calibration."""
    geom = spec.geometry()
    params = spec.parameter_set()
    config = spec.config()
    ramps = _ramp_schedule(spec, geom)
    rng = np.random.default_rng(spec.seed)
    demand = spec.demand.series(spec.t_steps, spec.delta_hours, rng)
    if np.any(demand > float(np.sum(geom.lanes)) * np.max(params.v_star) * np.max(params.rho_star)):
        raise ValidationError([Violation("DemandTooHigh", "demand exceeds the corridor capacity guard")])
    rho0, v0 = free_flow_state(geom, params, ramps, demand[0])

    # The downstream density follows the last segment's outflow, so the
    # boundary series is built step by step before the final rollout.
    T, n = spec.t_steps, spec.n_segments
    last = n - 1
    up_v = np.empty(T)
    down = np.empty(T)
    rho_t, v_t = rho0, v0
    P = np.ascontiguousarray(params.as_matrix())
    lanes = np.ascontiguousarray(geom.lanes)
    for t in range(T):
        up_v[t] = v_t[0]
        down[t] = free_flow_density(rho_t[last] * v_t[last], geom.lanes[last], params.v_star[last],
                                    params.rho_star[last], params.alpha[last])
        if t == T - 1:
            break
        rho2, v2, _ = kernels.forward(rho_t, v_t, lanes, P, np.ascontiguousarray(ramps.r[t:t + 2]),
                                      np.ascontiguousarray(ramps.beta[t:t + 2]), demand[t:t + 2].copy(),
                                      up_v[t:t + 2].copy(), down[t:t + 2].copy(), float(geom.lanes[last]),
                                      geom.segment_length_km, config.delta_hours, config.v_min)
        rho_t, v_t = rho2[1].copy(), v2[1].copy()

    boundaries = BoundarySeries(demand, up_v, down, float(geom.lanes[last]))
    sim = rollout(geom, params, ramps, boundaries, rho0, v0, config)
    return ScenarioBundle(geom, sim.states, boundaries, params, ramps, config)


def generate_bottleneck(spec: Optional[ScenarioSpec] = None) -> ScenarioBundle:
    return generate(spec or default_bottleneck_spec())


def generate_ramped(spec: Optional[ScenarioSpec] = None) -> ScenarioBundle:
    spec = spec or default_ramped_spec()
    if not spec.onramps and not spec.offramps:
        raise ValidationError([Violation("NoRamps", "a ramped scenario needs at least one ramp recipe")])
    return generate(spec)
