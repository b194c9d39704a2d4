"""Error metrics and exports comparing simulated and observed grids."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .core import PARAM_NAMES, MetanetError, NetworkGeometry, ParameterSet, ShapeMismatch, StateGrid

# |truth| below these is skipped (veh/km, veh/h, km/h)
DEFAULT_GUARDS = {"rho": 0.5, "q": 10.0, "v": 1.0}


class AllCellsSkipped(MetanetError):
    pass


@dataclass(frozen=True)
class EvaluationReport:
    mape_rho: float
    mape_q: float
    mape_v: float
    mape_mean: float
    cells_evaluated: int
    cells_skipped: int

    def as_dict(self) -> dict:
        return {"rho": self.mape_rho, "q": self.mape_q, "v": self.mape_v, "mean": self.mape_mean,
                "cells_evaluated": self.cells_evaluated, "cells_skipped": self.cells_skipped}


def mape(sim: StateGrid, truth: StateGrid, mask: Optional[np.ndarray] = None,
         guards: Optional[dict] = None) -> EvaluationReport:
    """Mean absolute percentage error per variable.

    ``mask`` selects the cells to evaluate (True = evaluate); cells missing
    in ``truth`` are always excluded.  ``cells_evaluated`` and
    ``cells_skipped`` are summed over the three variables.
    """
    if sim.shape != truth.shape:
        raise ShapeMismatch(f"simulated grid {sim.shape} vs truth {truth.shape}")
    guards = {**DEFAULT_GUARDS, **(guards or {})}
    sel = truth.observed.copy()
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    out = {}
    evaluated = skipped = 0
    for name in ("rho", "q", "v"):
        s = getattr(sim, name)[sel]
        t = getattr(truth, name)[sel]
        keep = np.abs(t) >= guards[name]
        evaluated += int(keep.sum())
        skipped += int((~keep).sum())
        if not keep.any():
            raise AllCellsSkipped(f"no {name} cells left after guards")
        out[name] = 100.0 * float(np.mean(np.abs(s[keep] - t[keep]) / np.abs(t[keep])))
    mean = (out["rho"] + out["q"] + out["v"]) / 3.0
    return EvaluationReport(out["rho"], out["q"], out["v"], mean, evaluated, skipped)


def fd_scatter(grid: StateGrid, geom: NetworkGeometry) -> list[tuple[float, float]]:
    """One (per-lane density, per-lane flow) point per space-time cell."""
    if grid.rho.size == 0:
        return []
    d = grid.rho / geom.lanes
    f = grid.q / geom.lanes
    return list(zip(d.ravel().tolist(), f.ravel().tolist()))


def parameter_recovery_report(estimated: ParameterSet, truth: ParameterSet) -> dict[str, np.ndarray]:
    """Relative error in percent, per parameter and segment."""
    n = estimated.n_segments
    out = {}
    for p in PARAM_NAMES:
        t = np.broadcast_to(getattr(truth, p), (n,))
        out[p] = 100.0 * (getattr(estimated, p) - t) / t
    return out


def report_row(label: str, report: EvaluationReport) -> dict:
    return {"config": label, **{k: v for k, v in asdict(report).items()}}
