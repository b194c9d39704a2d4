"""Readers and writers for the network, parameter, grid and boundary files.

Numbers are written with 17 significant digits so every float survives a
write/read cycle bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (PARAM_NAMES, BoundarySeries, MetanetError, NetworkGeometry, ParameterSet, ParamSharing,
                   RampSchedule, StateGrid, Violation, ValidationError)

GRID_VARS = ("rho", "q", "v")


class ParseError(MetanetError):
    def __init__(self, path, message, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.msg, exc.lineno) from exc
    except OSError as exc:
        raise ParseError(path, str(exc)) from exc


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# network --------------------------------------------------------------------

def network_to_dict(geom: NetworkGeometry) -> dict:
    return {
        "n_segments": int(geom.n_segments),
        "segment_length_km": float(geom.segment_length_km),
        "lanes": [float(x) for x in geom.lanes],
        "onramp_mask": [int(x) for x in geom.onramp_mask],
        "offramp_mask": [int(x) for x in geom.offramp_mask],
    }


def network_from_dict(d: dict, source="network") -> NetworkGeometry:
    problems = []
    for key in ("n_segments", "segment_length_km", "lanes"):
        if key not in d:
            problems.append(Violation("MissingField", f"{source}: field {key!r} is required"))
    if problems:
        raise ValidationError(problems)
    n = d["n_segments"]
    lanes = d["lanes"]
    if not isinstance(lanes, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                              for x in lanes):
        raise ValidationError([Violation("MalformedField", f"{source}: field 'lanes' must be a list of numbers")])
    masks = {}
    for key in ("onramp_mask", "offramp_mask"):
        m = d.get(key)
        if m is None:
            masks[key] = np.zeros(len(lanes), dtype=bool)
        elif not isinstance(m, list):
            raise ValidationError([Violation("MalformedField", f"{source}: field {key!r} must be a list")])
        else:
            masks[key] = np.asarray(m, dtype=bool)
    return NetworkGeometry(n, float(d["segment_length_km"]), np.asarray(lanes, dtype=float),
                           masks["onramp_mask"], masks["offramp_mask"])


def write_network(path, geom: NetworkGeometry) -> Path:
    return write_json(path, network_to_dict(geom))


def read_network(path) -> NetworkGeometry:
    return network_from_dict(_load_json(path), str(path))


# parameters -----------------------------------------------------------------

def params_to_dict(params: ParameterSet) -> dict:
    out = {"sharing": params.sharing.value, "n_segments": params.n_segments}
    for p in PARAM_NAMES:
        a = getattr(params, p)
        out[p] = float(a[0]) if params.sharing is ParamSharing.SI else [float(x) for x in a]
    return out


def params_from_dict(d: dict, n_segments: Optional[int] = None) -> ParameterSet:
    missing = [p for p in PARAM_NAMES if p not in d]
    if missing:
        raise ValidationError([Violation("MissingField", f"parameter file lacks {', '.join(missing)}")])
    n = n_segments or d.get("n_segments")
    values = {p: d[p] for p in PARAM_NAMES}
    arrays = [v for v in values.values() if isinstance(v, list)]
    if n is None:
        n = len(arrays[0]) if arrays else 1
    sharing = d.get("sharing") or ("SV" if arrays else "SI")
    return ParameterSet(**{p: np.broadcast_to(np.asarray(v, dtype=float), (n,)) for p, v in values.items()},
                        sharing=ParamSharing(sharing))


def write_params(path, params: ParameterSet) -> Path:
    return write_json(path, params_to_dict(params))


def read_params(path, n_segments: Optional[int] = None) -> ParameterSet:
    return params_from_dict(_load_json(path), n_segments)


# grids ----------------------------------------------------------------------

def write_grid_csv(path, values: np.ndarray, missing: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"seg_{x}" for x in range(values.shape[1])])
        for t, row in enumerate(values):
            if missing is None:
                w.writerow([fmt(x) for x in row])
            else:
                w.writerow(["" if missing[t, x] else fmt(val) for x, val in enumerate(row)])
    return path


def write_mask_csv(path, mask: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"seg_{x}" for x in range(mask.shape[1])])
        for row in mask:
            w.writerow([int(b) for b in row])
    return path


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(values, missing)``; empty fields become NaN and are flagged missing."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(path, str(exc)) from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, "empty file", 1)
    header = rows[0]
    if header != [f"seg_{x}" for x in range(len(header))]:
        raise ParseError(path, "header must be seg_0,...,seg_{N-1}", 1)
    values = np.empty((len(rows) - 1, len(header)))
    missing = np.zeros(values.shape, dtype=bool)
    for t, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(path, f"expected {len(header)} fields, got {len(row)}", t + 2)
        for x, field in enumerate(row):
            if field.strip() == "":
                values[t, x] = math.nan
                missing[t, x] = True
                continue
            try:
                values[t, x] = float(field)
            except ValueError:
                raise ParseError(path, f"not a number: {field!r}", t + 2) from None
    return values, missing


def write_grid_bundle(directory, grid: StateGrid, prefix: str = "") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mask = grid.missing_mask
    out = [write_grid_csv(directory / f"{prefix}{name}.csv", getattr(grid, name), mask) for name in GRID_VARS]
    if mask is not None:
        out.append(write_mask_csv(directory / f"{prefix}missing_mask.csv", mask))
    return out


def read_grid_bundle(directory, prefix: str = "") -> StateGrid:
    directory = Path(directory)
    arrays = {}
    missing = None
    for name in GRID_VARS:
        vals, miss = read_grid_csv(directory / f"{prefix}{name}.csv")
        arrays[name] = vals
        missing = miss if missing is None else missing | miss
    mask_path = directory / f"{prefix}missing_mask.csv"
    if mask_path.exists():
        m, _ = read_grid_csv(mask_path)
        missing = missing | (m != 0)
    return StateGrid(arrays["rho"], arrays["q"], arrays["v"], missing if missing.any() else None)


def write_ramps(directory, ramps: RampSchedule) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_grid_csv(directory / "r.csv", ramps.r), write_grid_csv(directory / "beta.csv", ramps.beta)]


def read_ramps(r_path, beta_path, geom: Optional[NetworkGeometry] = None) -> RampSchedule:
    r, r_miss = read_grid_csv(r_path)
    b, b_miss = read_grid_csv(beta_path)
    if r_miss.any() or b_miss.any():
        raise ParseError(r_path if r_miss.any() else beta_path, "ramp schedules may not have empty cells")
    ramps = RampSchedule(r, b)
    if geom is not None:
        ramps.check(geom)
    return ramps


# boundaries -----------------------------------------------------------------

BOUNDARY_COLUMNS = ["time_index", "upstream_flow", "upstream_speed", "downstream_density"]


def write_boundaries(path, b: BoundarySeries) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUNDARY_COLUMNS)
        for t in range(b.t_steps):
            w.writerow([t, fmt(b.upstream_flow[t]), fmt(b.upstream_speed[t]), fmt(b.downstream_density[t])])
    return path


def read_boundaries(path, downstream_lanes: float) -> BoundarySeries:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(path, str(exc)) from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in BOUNDARY_COLUMNS):
            raise ParseError(path, f"columns must include {', '.join(BOUNDARY_COLUMNS)}", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["time_index"]), float(row["upstream_flow"]), float(row["upstream_speed"]),
                             float(row["downstream_density"])))
            except (TypeError, ValueError):
                raise ParseError(path, "malformed boundary row", lineno) from None
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ParseError(path, "time_index must run 0..T-1 without gaps")
    a = np.array([r[1:] for r in rows], dtype=float).reshape(-1, 3)
    return BoundarySeries(a[:, 0], a[:, 1], a[:, 2], downstream_lanes)


def write_diagnostics(path, diagnostics: dict) -> Path:
    return write_json(path, diagnostics)


def write_rows_csv(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return path
