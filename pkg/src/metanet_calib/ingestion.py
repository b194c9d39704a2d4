"""Turn trajectories or detector series into (T, N) state grids."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import MetanetError, NetworkGeometry, SimulationConfig, StateGrid, Violation, ValidationError
from .io import ParseError

log = logging.getLogger(__name__)

FREE_FLOW_DEFAULT = 120.0


class OutOfCorridor(MetanetError):
    pass


class StationOutOfCorridor(MetanetError):
    pass


class AllMissing(MetanetError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: object
    time_h: float
    position_km: float


@dataclass(frozen=True, eq=False)
class DetectorSeries:
    station_position_km: float
    interval_start_h: np.ndarray
    flow: np.ndarray
    speed: np.ndarray
    interval_h: float

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=float)
        s = np.asarray(self.speed, dtype=float)
        ok = np.isfinite(f) & np.isfinite(s)
        if np.any(f[ok] < 0) or np.any(s[ok] < 0):
            raise ValidationError([Violation("NegativeDetector", "flow and speed must be >= 0")])
        object.__setattr__(self, "flow", f)
        object.__setattr__(self, "speed", s)
        object.__setattr__(self, "interval_start_h", np.asarray(self.interval_start_h, dtype=float))


@dataclass(frozen=True, eq=False)
class EdieResult:
    grid: StateGrid
    distance: np.ndarray  # sum of d_i per cell, km
    time: np.ndarray  # sum of t_i per cell, h
    skipped_records: int


def _group(trajectories) -> dict:
    if isinstance(trajectories, dict):
        return {k: (np.asarray(t, float), np.asarray(x, float)) for k, (t, x) in trajectories.items()}
    by_vehicle = defaultdict(list)
    for rec in trajectories:
        by_vehicle[rec.vehicle_id].append((rec.time_h, rec.position_km))
    out = {}
    for vid, pts in by_vehicle.items():
        a = np.asarray(pts, dtype=float)
        out[vid] = (a[:, 0], a[:, 1])
    return out


def edie_sums(times_h, positions_km, n_steps: int, n_segments: int, L: float, delta: float):
    """Distance and time a single piecewise-linear trajectory spends in every space-time cell.

    Each linear piece is cut at every cell boundary it crosses, so the
    sums are exact for piecewise-linear motion.
    """
    dist = np.zeros((n_steps, n_segments))
    tspent = np.zeros((n_steps, n_segments))
    t_end = n_steps * delta
    x_end = n_segments * L
    for t0, t1, x0, x1 in zip(times_h[:-1], times_h[1:], positions_km[:-1], positions_km[1:]):
        dt = t1 - t0
        dx = x1 - x0
        if t1 <= 0.0 or t0 >= t_end:
            continue
        cuts = [0.0, 1.0]
        k0, k1 = math.floor(t0 / delta), math.floor(t1 / delta)
        cuts += [(k * delta - t0) / dt for k in range(k0 + 1, k1 + 1)]
        if dx != 0.0:
            j0, j1 = sorted((math.floor(x0 / L), math.floor(x1 / L)))
            cuts += [(j * L - x0) / dx for j in range(j0 + 1, j1 + 1)]
        s = np.unique(np.clip(cuts, 0.0, 1.0))
        ds = np.diff(s)
        mid = 0.5 * (s[:-1] + s[1:])
        tm = t0 + mid * dt
        xm = x0 + mid * dx
        k = np.floor(tm / delta).astype(int)
        j = np.floor(xm / L).astype(int)
        ok = (ds > 0) & (k >= 0) & (k < n_steps) & (j >= 0) & (j < n_segments) & (tm < t_end) & (xm < x_end)
        np.add.at(tspent, (k[ok], j[ok]), ds[ok] * dt)
        np.add.at(dist, (k[ok], j[ok]), ds[ok] * abs(dx))
    return dist, tspent


def edie_aggregate(trajectories, geom: NetworkGeometry, config: SimulationConfig,
                   free_flow_speed: float = FREE_FLOW_DEFAULT) -> EdieResult:
    """Flow, density and speed per cell from vehicle trajectories.

    ``trajectories`` is an iterable of :class:`TrajectoryRecord` or a dict
    ``vehicle_id -> (times_h, positions_km)``.  Samples outside the
    corridor are dropped and counted.  Empty cells get q = rho = 0 and the
    segment's most recent speed (else ``free_flow_speed``), and are flagged
    missing.
    """
    T, N, L, delta = config.t_steps, geom.n_segments, geom.segment_length_km, config.delta_hours
    dist = np.zeros((T, N))
    tspent = np.zeros((T, N))
    skipped = 0
    for vid, (t, x) in _group(trajectories).items():
        order = np.argsort(t, kind="stable")
        t, x = t[order], x[order]
        if np.any(np.diff(t) <= 0):
            raise ValidationError([Violation("NonIncreasingTime", f"vehicle {vid!r} has repeated timestamps")])
        inside = (x >= 0.0) & (x <= N * L)
        skipped += int((~inside).sum())
        t, x = t[inside], x[inside]
        if len(t) < 2:
            continue
        d, ts = edie_sums(t, x, T, N, L, delta)
        dist += d
        tspent += ts
    if skipped:
        log.warning("skipped %d trajectory samples outside the corridor", skipped)
    area = L * delta
    q = dist / area
    rho = tspent / area
    empty = tspent <= 0.0
    v = np.empty((T, N))
    v[~empty] = dist[~empty] / tspent[~empty]
    for x in range(N):
        last = free_flow_speed
        for k in range(T):
            if empty[k, x]:
                v[k, x] = last
            else:
                last = v[k, x]
    grid = StateGrid(rho, q, v, empty if empty.any() else None)
    return EdieResult(grid, dist, tspent, skipped)


def _combine(flows, speeds):
    """Average flow and flow-weighted harmonic mean speed of several observations."""
    flows = np.asarray(flows, float)
    speeds = np.asarray(speeds, float)
    ok = np.isfinite(flows) & np.isfinite(speeds) & (speeds > 0)
    if not ok.any():
        return math.nan, math.nan
    f, s = flows[ok], speeds[ok]
    if len(f) == 1:
        return float(f[0]), float(s[0])
    q = float(np.mean(f))
    w = np.sum(f / s)
    if w > 0:
        v = float(f.sum() / w)
    else:
        v = float(len(s) / np.sum(1.0 / s))
    return q, v


def _resample(series: DetectorSeries, T: int, delta: float, rel_tol: float = 1e-6):
    ratio = series.interval_h / delta
    starts = series.interval_start_h
    q = np.full(T, np.nan)
    v = np.full(T, np.nan)
    if ratio >= 1.0 - rel_tol:
        if abs(ratio - round(ratio)) > rel_tol * ratio:
            raise ValidationError([Violation("IntervalMismatch",
                                             f"source interval {series.interval_h * 3600:g} s is not a multiple "
                                             f"of the model step {delta * 3600:g} s")])
        step_t = np.arange(T) * delta
        for i, s0 in enumerate(starts):
            sel = (step_t >= s0 - rel_tol * delta) & (step_t < s0 + series.interval_h - rel_tol * delta)
            q[sel] = series.flow[i]
            v[sel] = series.speed[i]
    else:
        inv = 1.0 / ratio
        if abs(inv - round(inv)) > rel_tol * inv:
            raise ValidationError([Violation("IntervalMismatch",
                                             f"model step {delta * 3600:g} s is not a multiple of the source "
                                             f"interval {series.interval_h * 3600:g} s")])
        k = np.floor(starts / delta + rel_tol).astype(int)
        for step in range(T):
            sel = k == step
            if sel.any():
                q[step], v[step] = _combine(series.flow[sel], series.speed[sel])
    return q, v


def detector_to_grid(stations: Sequence[DetectorSeries], geom: NetworkGeometry,
                     config: SimulationConfig) -> StateGrid:
    """Map station series onto segments and model steps; density is q / v.

    Coarser source intervals are held constant over the model steps they
    cover; finer ones are averaged (flow) and harmonically averaged (speed,
    weighted by flow).  Segments without a station, missing intervals and
    zero speeds are flagged missing.
    """
    T, N, L, delta = config.t_steps, geom.n_segments, geom.segment_length_km, config.delta_hours
    per_segment = defaultdict(list)
    for st in stations:
        if not 0.0 <= st.station_position_km < N * L:
            raise StationOutOfCorridor(f"station at {st.station_position_km} km lies outside [0, {N * L}) km")
        per_segment[int(math.floor(st.station_position_km / L))].append(_resample(st, T, delta))
    q = np.full((T, N), np.nan)
    v = np.full((T, N), np.nan)
    for x, series in per_segment.items():
        for k in range(T):
            q[k, x], v[k, x] = _combine([s[0][k] for s in series], [s[1][k] for s in series])
    missing = ~(np.isfinite(q) & np.isfinite(v) & (v > 0))
    rho = np.where(missing, np.nan, q / np.where(missing, 1.0, v))
    q = np.where(missing, np.nan, q)
    v = np.where(missing, np.nan, v)
    return StateGrid(rho, q, v, missing)


@dataclass(frozen=True)
class AsmConfig:
    c_cong: float = -15.0  # km/h, congested waves travel upstream
    c_free: float = 80.0  # km/h
    sigma_km: float = 0.6
    tau_h: float = 1.1 / 60.0
    v_crit: float = 60.0
    dv: float = 20.0
    # finite kernel support, in multiples of sigma_km and tau_h
    x_window: float = 2.0
    t_window: float = 3.0


def _smooth(values, observed, t_c, x_c, targets, cfg: AsmConfig):
    """Congested and free-flow kernel estimates of ``values`` at ``targets`` (k, j) pairs."""
    obs_k, obs_j = np.nonzero(observed)
    obs_t = t_c[obs_k]
    obs_x = x_c[obs_j]
    out_c = np.empty((len(targets), len(values)))
    out_f = np.empty((len(targets), len(values)))
    for i, (k, j) in enumerate(targets):
        dx = x_c[j] - obs_x
        dt = t_c[k] - obs_t
        base = -np.abs(dx) / cfg.sigma_km
        near = np.abs(dx) <= cfg.x_window * cfg.sigma_km
        for c, out in ((cfg.c_cong, out_c), (cfg.c_free, out_f)):
            shift = np.abs(dt - dx / c)
            e = base - shift / cfg.tau_h
            keep = near & (shift <= cfg.t_window * cfg.tau_h)
            if keep.any():
                e = np.where(keep, e, -np.inf)
            w = np.exp(e - e.max())
            w /= w.sum()
            for n, arr in enumerate(values):
                out[i, n] = float(np.dot(w, arr[obs_k, obs_j]))
    return out_c, out_f


def reconstruct_gaps(grid: StateGrid, geom: NetworkGeometry, config: SimulationConfig,
                     asm: Optional[AsmConfig] = None) -> StateGrid:
    """Fill missing cells with a two-kernel anisotropic space-time smoother.

    Speed and flow are smoothed along upstream-moving (congested) and
    downstream-moving (free-flow) characteristics and blended by the
    smoothed speed; density is then q / v.  Observed cells pass through
    unchanged.
    """
    if grid.missing_mask is None or not grid.missing_mask.any():
        return grid
    asm = asm or AsmConfig()
    observed = ~grid.missing_mask
    if not observed.any():
        raise AllMissing("every cell is missing")
    T, N = grid.shape
    t_c = (np.arange(T) + 0.5) * config.delta_hours
    x_c = (np.arange(N) + 0.5) * geom.segment_length_km
    targets = np.argwhere(grid.missing_mask)
    v_obs = np.where(observed, grid.v, 0.0)
    q_obs = np.where(observed, grid.q, 0.0)
    est_c, est_f = _smooth([v_obs, q_obs], observed, t_c, x_c, targets, asm)
    w = 0.5 * (1.0 + np.tanh((asm.v_crit - np.minimum(est_c[:, 0], est_f[:, 0])) / asm.dv))
    fill = w[:, None] * est_c + (1.0 - w[:, None]) * est_f
    v = grid.v.copy()
    q = grid.q.copy()
    rho = grid.rho.copy()
    kk, jj = targets[:, 0], targets[:, 1]
    v[kk, jj] = fill[:, 0]
    q[kk, jj] = fill[:, 1]
    rho[kk, jj] = fill[:, 1] / np.maximum(fill[:, 0], 1e-9)
    return StateGrid(rho, q, v)


# file readers ----------------------------------------------------------------

def read_trajectories(path) -> list[TrajectoryRecord]:
    """CSV with columns vehicle_id, time_s, position_m."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"vehicle_id", "time_s", "position_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(path, "columns vehicle_id, time_s, position_m are required", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(TrajectoryRecord(row["vehicle_id"], float(row["time_s"]) / 3600.0,
                                                float(row["position_m"]) / 1000.0))
            except (TypeError, ValueError):
                raise ParseError(path, "malformed trajectory row", lineno) from None
    return records


def read_detectors(path) -> list[DetectorSeries]:
    """CSV with columns station_position_m, interval_start_s, flow_veh_per_h, speed_kmh.

    Empty flow or speed fields mark missing intervals.  The source interval
    is the smallest positive spacing of interval starts per station.
    """
    path = Path(path)
    rows = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"station_position_m", "interval_start_s", "flow_veh_per_h", "speed_kmh"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(path, "columns station_position_m, interval_start_s, flow_veh_per_h, speed_kmh "
                                   "are required", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                pos = float(row["station_position_m"])
                start = float(row["interval_start_s"])
                flow = float(row["flow_veh_per_h"]) if row["flow_veh_per_h"].strip() else math.nan
                speed = float(row["speed_kmh"]) if row["speed_kmh"].strip() else math.nan
            except (TypeError, ValueError, AttributeError):
                raise ParseError(path, "malformed detector row", lineno) from None
            rows[pos].append((start, flow, speed))
    stations = []
    for pos, data in sorted(rows.items()):
        a = np.array(sorted(data), dtype=float)
        gaps = np.diff(a[:, 0])
        gaps = gaps[gaps > 0]
        if len(gaps) == 0:
            raise ParseError(path, f"station at {pos} m needs at least two intervals to infer the interval length")
        stations.append(DetectorSeries(pos / 1000.0, a[:, 0] / 3600.0, a[:, 1], a[:, 2], float(gaps.min()) / 3600.0))
    return stations
