"""Domain types shared by the simulator, calibration and ingestion code.

Units follow the usual macroscopic conventions: hours, kilometres,
vehicles.  Densities in state grids are totals across all lanes (veh/km);
per-lane values are derived on demand by dividing by the lane count.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

PARAM_NAMES = ("tau", "eta", "kappa", "v_star", "rho_star", "alpha")


class MetanetError(Exception):
    """Base class for all package errors."""


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    index: Optional[int] = None

    def __str__(self) -> str:
        where = f"(x={self.index})" if self.index is not None else ""
        return f"{self.kind}{where}: {self.detail}"


class ValidationError(MetanetError):
    """Raised with the complete list of invariant violations."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    @property
    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


class ShapeMismatch(MetanetError):
    pass


class LengthMismatch(MetanetError):
    pass


class ParamSharing(str, enum.Enum):
    SV = "SV"  # segment-varying
    SI = "SI"  # segment-invariant


class RampSharing(str, enum.Enum):
    TV = "TV"  # time-varying
    TI = "TI"  # time-invariant


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkGeometry:
    n_segments: int
    segment_length_km: float
    lanes: np.ndarray
    onramp_mask: np.ndarray = None
    offramp_mask: np.ndarray = None

    def __post_init__(self):
        lanes = np.atleast_1d(np.asarray(self.lanes, dtype=float))
        object.__setattr__(self, "lanes", _frozen(lanes))
        for name in ("onramp_mask", "offramp_mask"):
            m = getattr(self, name)
            if m is None:
                m = np.zeros(int(self.n_segments), dtype=bool)
            object.__setattr__(self, name, _frozen(np.asarray(m).astype(bool), bool))

    @classmethod
    def uniform(cls, n_segments: int, segment_length_km: float = 0.4, lanes: float = 4.0,
                onramps: Iterable[int] = (), offramps: Iterable[int] = ()) -> "NetworkGeometry":
        on = np.zeros(n_segments, dtype=bool)
        off = np.zeros(n_segments, dtype=bool)
        on[list(onramps)] = True
        off[list(offramps)] = True
        return cls(n_segments, segment_length_km, np.full(n_segments, float(lanes)), on, off)

    def subset(self, start: int, stop: int) -> "NetworkGeometry":
        """Geometry of the consecutive segments ``start:stop``."""
        return NetworkGeometry(stop - start, self.segment_length_km, self.lanes[start:stop],
                               self.onramp_mask[start:stop], self.offramp_mask[start:stop])

    @property
    def has_ramps(self) -> bool:
        return bool(self.onramp_mask.any() or self.offramp_mask.any())


def validate_geometry(geom: NetworkGeometry) -> NetworkGeometry:
    """Return ``geom`` unchanged or raise :class:`ValidationError` listing every violation."""
    problems = []
    n = geom.n_segments
    if not isinstance(n, (int, np.integer)) or n < 2:
        problems.append(Violation("TooFewSegments", f"n_segments must be an integer >= 2, got {n!r}"))
    if not (math.isfinite(geom.segment_length_km) and geom.segment_length_km > 0):
        problems.append(Violation("NonPositiveLength", f"segment_length_km={geom.segment_length_km!r}"))
    if len(geom.lanes) != n:
        problems.append(Violation("LanesLengthMismatch", f"lanes has {len(geom.lanes)} entries, expected {n}"))
    for x, lam in enumerate(geom.lanes):
        if not (math.isfinite(lam) and lam > 0):
            problems.append(Violation("NonPositiveLanes", f"lanes[{x}]={lam!r}", x))
    for name in ("onramp_mask", "offramp_mask"):
        m = getattr(geom, name)
        if len(m) != n:
            problems.append(Violation("MaskLengthMismatch", f"{name} has {len(m)} entries, expected {n}"))
    if problems:
        raise ValidationError(problems)
    return geom


def lane_profile_from_breakpoints(segment_length_km: float, pieces: Sequence[tuple[float, float]],
                                  rel_tol: float = 1e-9) -> float:
    """Length-weighted lane count of a segment made of ``(length_km, lanes)`` pieces."""
    total = sum(length for length, _ in pieces)
    if not math.isclose(total, segment_length_km, rel_tol=rel_tol, abs_tol=1e-12):
        raise LengthMismatch(f"pieces cover {total} km, segment is {segment_length_km} km")
    if any(lanes <= 0 or length < 0 for length, lanes in pieces):
        raise ValidationError([Violation("NonPositiveLanes", "every piece needs a positive lane count")])
    return sum(length * lanes for length, lanes in pieces) / segment_length_km


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Per-segment METANET parameters.

    With ``sharing=SI`` every per-segment array holds one repeated value.
    """

    tau: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray
    v_star: np.ndarray
    rho_star: np.ndarray
    alpha: np.ndarray
    sharing: ParamSharing = ParamSharing.SV

    def __post_init__(self):
        arrays = [np.atleast_1d(np.asarray(getattr(self, p), dtype=float)) for p in PARAM_NAMES]
        n = max(len(a) for a in arrays)
        sharing = ParamSharing(self.sharing)
        for p, a in zip(PARAM_NAMES, arrays):
            if len(a) == 1:
                a = np.repeat(a, n)
            elif len(a) != n:
                raise ShapeMismatch(f"{p} has {len(a)} entries, expected {n}")
            if sharing is ParamSharing.SI and np.any(a != a[0]):
                raise ValidationError([Violation("SharingViolation", f"{p} differs across segments under SI")])
            object.__setattr__(self, p, _frozen(a))
        object.__setattr__(self, "sharing", sharing)

    @classmethod
    def uniform(cls, n_segments: int, sharing=ParamSharing.SI, **values) -> "ParameterSet":
        return cls(**{p: np.full(n_segments, float(values[p])) for p in PARAM_NAMES}, sharing=sharing)

    @property
    def n_segments(self) -> int:
        return len(self.tau)

    def as_matrix(self) -> np.ndarray:
        """(6, N) array in ``PARAM_NAMES`` order."""
        return np.vstack([getattr(self, p) for p in PARAM_NAMES])

    @classmethod
    def from_matrix(cls, m: np.ndarray, sharing=ParamSharing.SV) -> "ParameterSet":
        return cls(*np.asarray(m, dtype=float), sharing=sharing)

    def subset(self, start: int, stop: int) -> "ParameterSet":
        return ParameterSet.from_matrix(self.as_matrix()[:, start:stop], self.sharing)

    def with_sharing(self, sharing: ParamSharing) -> "ParameterSet":
        return ParameterSet.from_matrix(self.as_matrix(), sharing)

    def equals(self, other: "ParameterSet") -> bool:
        return self.sharing == other.sharing and np.array_equal(self.as_matrix(), other.as_matrix())


@dataclass(frozen=True, eq=False)
class RampSchedule:
    """On-ramp inflows ``r`` and off-ramp split ratios ``beta`` on a (T, N) grid.

    Values off the ramp masks are forced to exactly zero on construction.
    """

    r: np.ndarray
    beta: np.ndarray
    sharing: RampSharing = RampSharing.TV

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        if r.ndim != 2 or r.shape != beta.shape:
            raise ShapeMismatch(f"r {r.shape} and beta {beta.shape} must be equal (T, N) arrays")
        sharing = RampSharing(self.sharing)
        if sharing is RampSharing.TI and (np.any(r != r[:1]) or np.any(beta != beta[:1])):
            raise ValidationError([Violation("SharingViolation", "TI ramps must be constant in time")])
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "beta", _frozen(beta))
        object.__setattr__(self, "sharing", sharing)

    @classmethod
    def build(cls, geom: NetworkGeometry, r=None, beta=None, t_steps: int = 1,
              sharing=RampSharing.TV) -> "RampSchedule":
        """Broadcast ``r``/``beta`` (scalars, per-segment or (T, N)) and zero them off-mask."""
        n = geom.n_segments
        r_full = np.zeros((t_steps, n)) if r is None else np.broadcast_to(np.asarray(r, float), (t_steps, n))
        b_full = np.zeros((t_steps, n)) if beta is None else np.broadcast_to(np.asarray(beta, float), (t_steps, n))
        r_full = np.where(geom.onramp_mask, r_full, 0.0)
        b_full = np.where(geom.offramp_mask, b_full, 0.0)
        return cls(r_full, b_full, sharing)

    @classmethod
    def zeros(cls, t_steps: int, n_segments: int) -> "RampSchedule":
        return cls(np.zeros((t_steps, n_segments)), np.zeros((t_steps, n_segments)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.r.shape

    def check(self, geom: NetworkGeometry, beta_upper: float = 0.9) -> "RampSchedule":
        problems = []
        if self.r.shape[1] != geom.n_segments:
            raise ShapeMismatch(f"ramp schedule has {self.r.shape[1]} segments, network {geom.n_segments}")
        if np.any(self.r[:, ~geom.onramp_mask] != 0):
            problems.append(Violation("RampOffMask", "r nonzero where no on-ramp exists"))
        if np.any(self.beta[:, ~geom.offramp_mask] != 0):
            problems.append(Violation("RampOffMask", "beta nonzero where no off-ramp exists"))
        if np.any(self.r < 0):
            problems.append(Violation("NegativeRamp", "r must be >= 0"))
        if np.any(self.beta < 0) or np.any(self.beta > beta_upper):
            problems.append(Violation("BetaOutOfRange", f"beta must lie in [0, {beta_upper}]"))
        if problems:
            raise ValidationError(problems)
        return self


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Time x segment arrays of total density, total flow and mean speed."""

    rho: np.ndarray
    q: np.ndarray
    v: np.ndarray
    missing_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        rho, q, v = (np.asarray(a, dtype=float) for a in (self.rho, self.q, self.v))
        if rho.ndim != 2 or rho.shape != q.shape or rho.shape != v.shape:
            raise ShapeMismatch(f"rho {rho.shape}, q {q.shape}, v {v.shape} must share one (T, N) shape")
        mask = self.missing_mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != rho.shape:
                raise ShapeMismatch(f"missing_mask {mask.shape} does not match {rho.shape}")
        for name, a in (("rho", rho), ("q", q), ("v", v)):
            seen = a if mask is None else a[~mask]
            if np.any(seen < 0):
                raise ValidationError([Violation("NegativeState", f"{name} has negative observed entries")])
            object.__setattr__(self, name, _frozen(a))
        object.__setattr__(self, "missing_mask", None if mask is None else _frozen(mask, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho.shape

    @property
    def observed(self) -> np.ndarray:
        if self.missing_mask is None:
            return np.ones(self.shape, dtype=bool)
        return ~self.missing_mask

    def columns(self, start: int, stop: int) -> "StateGrid":
        mask = None if self.missing_mask is None else self.missing_mask[:, start:stop]
        return StateGrid(self.rho[:, start:stop], self.q[:, start:stop], self.v[:, start:stop], mask)

    def replace_columns(self, start: int, other: "StateGrid") -> "StateGrid":
        rho, q, v = self.rho.copy(), self.q.copy(), self.v.copy()
        stop = start + other.shape[1]
        rho[:, start:stop], q[:, start:stop], v[:, start:stop] = other.rho, other.q, other.v
        return StateGrid(rho, q, v, self.missing_mask)


@dataclass(frozen=True, eq=False)
class BoundarySeries:
    upstream_flow: np.ndarray
    upstream_speed: np.ndarray
    downstream_density: np.ndarray
    downstream_lanes: float

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, n), dtype=float))
                for n in ("upstream_flow", "upstream_speed", "downstream_density")]
        if len({len(a) for a in arrs}) != 1:
            raise ShapeMismatch("boundary series must all have length T")
        problems = []
        for name, a in zip(("upstream_flow", "upstream_speed", "downstream_density"), arrs):
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                problems.append(Violation("NegativeBoundary", f"{name} must be finite and >= 0"))
            object.__setattr__(self, name, _frozen(a))
        if not self.downstream_lanes > 0:
            problems.append(Violation("NonPositiveLanes", "downstream_lanes must be > 0"))
        if problems:
            raise ValidationError(problems)
        object.__setattr__(self, "downstream_lanes", float(self.downstream_lanes))

    @property
    def t_steps(self) -> int:
        return len(self.upstream_flow)


def boundaries_from_grid(grid: StateGrid, geom: NetworkGeometry, upstream: int = 0,
                         downstream: Optional[int] = None) -> BoundarySeries:
    """Boundary series read from observed edge columns of ``grid``.

    By default segment 0 supplies the upstream flow and speed and the last
    segment supplies the downstream density.
    """
    downstream = geom.n_segments - 1 if downstream is None else downstream
    return BoundarySeries(grid.q[:, upstream], grid.v[:, upstream], grid.rho[:, downstream],
                          float(geom.lanes[downstream]))


@dataclass(frozen=True)
class SimulationConfig:
    delta_hours: float = 10.0 / 3600.0
    t_steps: int = 360
    v_min: float = 1.0
    beta_guard: float = 1e-6

    def __post_init__(self):
        if not self.delta_hours > 0:
            raise ValidationError([Violation("NonPositiveTimestep", f"delta_hours={self.delta_hours!r}")])
        if self.t_steps < 1:
            raise ValidationError([Violation("NonPositiveSteps", f"t_steps={self.t_steps!r}")])
        if self.v_min < 0:
            raise ValidationError([Violation("NegativeSpeedFloor", f"v_min={self.v_min!r}")])

    def check_cfl(self, v_star_max: float, segment_length_km: float) -> bool:
        """Warn (never raise) when a free-flow vehicle can skip a whole segment in one step."""
        ok = v_star_max * self.delta_hours <= segment_length_km
        if not ok:
            warnings.warn(f"v_star={v_star_max:g} km/h travels {v_star_max * self.delta_hours:.4g} km per step, "
                          f"more than one segment ({segment_length_km:g} km)", RuntimeWarning, stacklevel=2)
        return ok
