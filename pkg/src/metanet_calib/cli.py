"""Command-line entry point: ``metanet-calib {simulate,calibrate,ingest,generate,evaluate}``.

Exit codes: 0 success, 2 input or validation error, 3 runtime or solver
error.  Every successful command (and a solver run that stops without
converging) writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from .calibration import (CalibrationBounds, CalibrationProblem, CalibrationResult, InfeasibleBounds,
                          ObjectiveWeights, SolverOptions, calibrate, calibrate_blocks, resolve_threads,
                          run_ablation)
from .core import (LengthMismatch, MetanetError, ParamSharing, RampSchedule, RampSharing,
                   ShapeMismatch, SimulationConfig, StateGrid, ValidationError, Violation, boundaries_from_grid,
                   validate_geometry)
from .evaluation import fd_scatter, mape
from .ingestion import (AsmConfig, detector_to_grid, edie_aggregate, read_detectors, read_trajectories,
                        reconstruct_gaps)
from . import io
from .scenarios import (ScenarioSpec, default_bottleneck_spec, default_ramped_spec, free_flow_state, generate)
from .simulator import rollout

log = logging.getLogger("metanet_calib")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
INPUT_ERRORS = (ValidationError, io.ParseError, ShapeMismatch, LengthMismatch, InfeasibleBounds)
DEFAULT_DELTA_S = 10.0


class _Usage(Exception):
    pass


class Run:
    """Collects inputs, outputs and the resolved config for the manifest."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.t0 = time.perf_counter()

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise io.ParseError(path, "no such file")
        if path.is_file():
            self.inputs[str(path)] = io.sha256(path)
        else:
            for p in sorted(path.glob("*.csv")):
                self.inputs[str(p)] = io.sha256(p)
        return path

    def wrote(self, *paths):
        for p in paths:
            if isinstance(p, (list, tuple)):
                self.wrote(*p)
            else:
                self.outputs.append(Path(p))

    def manifest(self, exit_code: int) -> Path:
        outputs = {str(p.relative_to(self.out)): io.sha256(p) for p in self.outputs}
        path = self.out / "manifest.json"
        io.write_json(path, {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "duration_s": time.perf_counter() - self.t0,
            "version": __version__,
            "backend": kernels.BACKEND,
            "exit_code": exit_code,
        })
        return path


def _load_config(path: Optional[str], run: Run) -> dict:
    if not path:
        return {}
    run.read(path)
    d = io._load_json(path)
    if not isinstance(d, dict):
        raise io.ParseError(path, "config must be a JSON object")
    return d


def _pick(flag, file_cfg: dict, key: str, default):
    """flag > config file > built-in default."""
    if flag is not None:
        return flag
    return file_cfg.get(key, default)


def _sim_config(args, cfg: dict, t_steps: int) -> SimulationConfig:
    delta_s = _pick(args.delta_seconds, cfg, "delta_seconds", DEFAULT_DELTA_S)
    return SimulationConfig(delta_hours=float(delta_s) / 3600.0, t_steps=t_steps)


def _grid_dir(path: Path, prefix: Optional[str]) -> tuple[Path, str]:
    if prefix is not None:
        return path, prefix
    if not (path / "rho.csv").exists() and (path / "simulated_rho.csv").exists():
        return path, "simulated_"
    return path, ""


def _write_scatter(path, geom, **grids) -> Path:
    rows = []
    for source, grid in grids.items():
        rows += [{"density_per_lane": d, "flow_per_lane": f, "source": source} for d, f in fd_scatter(grid, geom)]
    return io.write_rows_csv(path, rows, ["density_per_lane", "flow_per_lane", "source"])


# simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    run = Run("simulate", args.out)
    cfg = _load_config(args.config, run)
    geom = validate_geometry(io.read_network(run.read(args.network)))
    params = io.read_params(run.read(args.params), geom.n_segments)
    data = None
    if args.data:
        data = io.read_grid_bundle(run.read(args.data))
        if data.shape[1] != geom.n_segments:
            raise ShapeMismatch(f"data grid has {data.shape[1]} segments, network {geom.n_segments}")
    if args.boundaries:
        boundaries = io.read_boundaries(run.read(args.boundaries), float(geom.lanes[-1]))
        span = (0, geom.n_segments)
    elif args.boundaries_from_data:
        if data is None:
            raise _Usage("--boundaries-from-data needs --data")
        boundaries = boundaries_from_grid(data, geom)
        span = (1, geom.n_segments - 1)
    else:
        raise _Usage("give --boundaries FILE or --boundaries-from-data with --data DIR")
    T = boundaries.t_steps
    if args.ramps:
        ramps = io.read_ramps(run.read(args.ramps[0]), run.read(args.ramps[1]), geom)
    else:
        ramps = RampSchedule.zeros(T, geom.n_segments)
    config = _sim_config(args, cfg, T)
    a, b = span
    sub_geom, sub_params = geom.subset(a, b), params.subset(a, b)
    sub_ramps = RampSchedule(ramps.r[:, a:b], ramps.beta[:, a:b])
    if data is not None:
        rho0, v0 = data.rho[0, a:b], data.v[0, a:b]
    else:
        rho0, v0 = free_flow_state(sub_geom, sub_params, sub_ramps, float(boundaries.upstream_flow[0]))
    config.check_cfl(float(np.max(params.v_star)), geom.segment_length_km)
    run.config = {"delta_seconds": config.delta_hours * 3600.0, "t_steps": T, "simulated_segments": [a, b],
                  "boundaries": "file" if args.boundaries else "edge segments of data",
                  "initial_state": "data row 0" if data is not None else "free-flow equilibrium"}
    result = rollout(sub_geom, sub_params, sub_ramps, boundaries, rho0, v0, config)
    grid = result.states
    if span != (0, geom.n_segments):
        grid = StateGrid(data.rho.copy(), data.q.copy(), data.v.copy()).replace_columns(a, grid)
    run.wrote(io.write_grid_bundle(run.out, grid))
    diag = {"density_clamps": result.density_clamps, "speed_floors": result.speed_floors,
            "clamp_events": [{**e, "x": e["x"] + a} for e in result.clamp_events()]}
    run.wrote(io.write_diagnostics(run.out / "diagnostics.json", diag))
    run.manifest(EXIT_OK)
    print(f"simulated {T} steps x {b - a} segments; {result.density_clamps} density clamps, "
          f"{result.speed_floors} speed floors")
    return EXIT_OK


# calibrate -------------------------------------------------------------------

def _problem(args, run: Run, cfg: dict) -> tuple[CalibrationProblem, dict]:
    geom = validate_geometry(io.read_network(run.read(args.network)))
    truth = io.read_grid_bundle(run.read(args.truth))
    boundaries = None
    if args.boundaries:
        boundaries = io.read_boundaries(run.read(args.boundaries), float(geom.lanes[-1]))
    bounds = CalibrationBounds.from_dict({**CalibrationBounds().as_dict(), **cfg.get("bounds", {})})
    weights = ObjectiveWeights(**cfg.get("weights", {}))
    solver_cfg = dict(cfg.get("solver", {}))
    for key, flag in (("max_iters", args.max_iters), ("init", args.init), ("multistart_k", args.multistart),
                      ("seed", args.seed), ("threads", args.threads)):
        if flag is not None:
            solver_cfg[key] = flag
    solver = SolverOptions.from_dict(solver_cfg)
    delta_s = float(_pick(args.delta_seconds, cfg, "delta_seconds", DEFAULT_DELTA_S))
    problem = CalibrationProblem(
        geometry=geom, ground_truth=truth, boundaries=boundaries, delta_hours=delta_s / 3600.0,
        bounds=bounds, weights=weights,
        param_sharing=ParamSharing(_pick(args.param_sharing, cfg, "param_sharing", "SV")),
        ramp_sharing=RampSharing(_pick(args.ramp_sharing, cfg, "ramp_sharing", "TV")),
        solver=solver)
    block = cfg.get("block") or {}
    resolved = {
        "bounds": bounds.as_dict(),
        "weights": dataclasses.asdict(weights),
        "param_sharing": problem.param_sharing.value,
        "ramp_sharing": problem.ramp_sharing.value,
        "solver": {k: v for k, v in dataclasses.asdict(solver).items() if k not in ("warm_params", "warm_ramps")},
        "threads": resolve_threads(solver.threads),
        "delta_seconds": delta_s,
        "block": {"size": _pick(args.blocks, block, "size", None), "overlap": _pick(args.overlap, block, "overlap", 0)},
        "boundaries": "file" if boundaries is not None else "edge segments of data",
        "normalizers": dict(zip(("v", "rho", "q"), problem.normalizers)),
    }
    return problem, resolved


def _write_result(out: Path, run: Run, problem: CalibrationProblem, res: CalibrationResult, prefix: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    run.wrote(io.write_params(out / "params.json", res.params))
    run.wrote(io.write_ramps(out, res.ramps))
    run.wrote(io.write_grid_bundle(out, res.simulated, prefix="simulated_"))
    run.wrote(io.write_json(out / "report.json", res.report()))
    if not prefix:
        run.wrote(_write_scatter(out / "fd_scatter.csv", problem.geometry, truth=problem.ground_truth,
                                 sim=res.simulated))


def _mape_line(label: str, m) -> str:
    if m is None:
        return f"{label:<8} {'n/a':>8} {'n/a':>8} {'n/a':>8} {'n/a':>8}"
    return f"{label:<8} {m.mape_rho:8.3f} {m.mape_q:8.3f} {m.mape_v:8.3f} {m.mape_mean:8.3f}"


def cmd_calibrate(args) -> int:
    run = Run("calibrate", args.out)
    cfg = _load_config(args.config, run)
    problem, resolved = _problem(args, run, cfg)
    run.config = resolved
    size, overlap = resolved["block"]["size"], resolved["block"]["overlap"]
    header = f"{'config':<8} {'rho %':>8} {'q %':>8} {'v %':>8} {'mean %':>8}"

    if args.ablation:
        rows = run_ablation(problem, size, overlap)
        table = [r.as_dict() for r in rows]
        run.wrote(io.write_rows_csv(run.out / "ablation.csv", table,
                                    ["config", "rho", "q", "v", "mean", "objective", "iterations", "converged",
                                     "error"]))
        for r in rows:
            if r.result is not None:
                _write_result(run.out / r.config, run, problem, r.result, prefix=r.config)
        print(header)
        for r in rows:
            print(_mape_line(r.config, r.result.mape if r.result else None) + (f"  {r.error}" if r.error else ""))
        code = EXIT_RUNTIME if any(r.error for r in rows) else EXIT_OK
        run.manifest(code)
        return code

    res = calibrate_blocks(problem, size, overlap) if size else calibrate(problem)
    _write_result(run.out, run, problem, res)
    run.wrote(io.write_diagnostics(run.out / "diagnostics.json", {
        "message": res.message, "n_evaluations": res.n_evaluations, "fit_range": list(res.fit_range),
        "start_index": res.start_index}))
    print(header)
    label = f"{problem.param_sharing.value}-{problem.ramp_sharing.value}"
    print(_mape_line(label, res.mape))
    print(f"objective {res.objective_value:.6g}, {res.iterations} iterations, converged={res.converged}")
    code = EXIT_OK if res.converged else EXIT_RUNTIME
    if not res.converged:
        print(f"solver stopped without converging: {res.message}", file=sys.stderr)
    run.manifest(code)
    return code


# ingest ----------------------------------------------------------------------

def cmd_ingest(args) -> int:
    run = Run("ingest", args.out)
    cfg = _load_config(args.config, run)
    geom = validate_geometry(io.read_network(run.read(args.network)))
    delta_s = float(_pick(args.delta_seconds, cfg, "delta_seconds", DEFAULT_DELTA_S))
    t_steps = _pick(args.t_steps, cfg, "t_steps", None)
    run.read(args.input)
    skipped = 0
    if args.source_type == "trajectories":
        records = read_trajectories(args.input)
        if t_steps is None:
            t_end = max((r.time_h for r in records), default=0.0)
            t_steps = max(1, int(np.ceil(t_end * 3600.0 / delta_s - 1e-9)))
        config = SimulationConfig(delta_hours=delta_s / 3600.0, t_steps=int(t_steps))
        res = edie_aggregate(records, geom, config)
        grid, skipped = res.grid, res.skipped_records
    else:
        stations = read_detectors(args.input)
        if t_steps is None:
            t_end = max(float(np.max(s.interval_start_h + s.interval_h)) for s in stations)
            t_steps = max(1, int(round(t_end * 3600.0 / delta_s)))
        config = SimulationConfig(delta_hours=delta_s / 3600.0, t_steps=int(t_steps))
        grid = detector_to_grid(stations, geom, config)
    run.config = {"source_type": args.source_type, "delta_seconds": delta_s, "t_steps": int(t_steps),
                  "reconstruct": bool(args.reconstruct)}
    run.wrote(io.write_grid_bundle(run.out, grid))
    if grid.missing_mask is None:
        run.wrote(io.write_mask_csv(run.out / "missing_mask.csv", np.zeros(grid.shape, dtype=bool)))
    n_missing = 0 if grid.missing_mask is None else int(grid.missing_mask.sum())
    if args.reconstruct:
        asm = AsmConfig(**cfg.get("asm", {}))
        run.config["asm"] = dataclasses.asdict(asm)
        filled = reconstruct_gaps(grid, geom, config, asm)
        run.wrote(io.write_grid_bundle(run.out, filled, prefix="filled_"))
    run.manifest(EXIT_OK)
    print(f"grid {grid.shape[0]} x {grid.shape[1]}, {n_missing} missing cells, {skipped} samples skipped")
    return EXIT_OK


# generate --------------------------------------------------------------------

def cmd_generate(args) -> int:
    run = Run("generate", args.out)
    if args.spec:
        d = io._load_json(run.read(args.spec))
        kind = d.get("kind", args.scenario or "bottleneck")
        try:
            # the ramped defaults carry per-segment parameters, so size them first
            sized = {"n_segments": int(d["n_segments"])} if "n_segments" in d else {}
            base = (default_ramped_spec(**sized) if kind == "ramped" else default_bottleneck_spec()).to_dict()
            spec = ScenarioSpec.from_dict({**base, **d})
        except (TypeError, ValueError) as exc:
            raise ValidationError([Violation("BadScenarioSpec", f"{args.spec}: {exc}")]) from None
    else:
        spec = default_ramped_spec() if args.scenario == "ramped" else default_bottleneck_spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    bundle = generate(spec)
    out = run.out
    run.config = {"scenario": spec.to_dict()}
    run.wrote(io.write_json(out / "scenario.json", spec.to_dict()))
    run.wrote(io.write_network(out / "network.json", bundle.geometry))
    run.wrote(io.write_params(out / "params.json", bundle.params))
    run.wrote(io.write_grid_bundle(out, bundle.truth))
    run.wrote(io.write_boundaries(out / "boundaries.csv", bundle.boundaries))
    run.wrote(io.write_ramps(out, bundle.ramps))
    run.manifest(EXIT_OK)
    print(f"generated {bundle.truth.shape[0]} x {bundle.truth.shape[1]} scenario in {out}")
    return EXIT_OK


# evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    run = Run("evaluate", args.out)
    sim_dir, sim_prefix = _grid_dir(run.read(args.simulated), args.sim_prefix)
    sim = io.read_grid_bundle(sim_dir, sim_prefix)
    truth = io.read_grid_bundle(run.read(args.truth))
    mask = None
    if args.interior:
        mask = np.zeros(truth.shape, dtype=bool)
        mask[1:, 1:-1] = True
    report = mape(sim, truth, mask)
    run.config = {"interior_only": bool(args.interior), "simulated_prefix": sim_prefix}
    run.wrote(io.write_json(run.out / "evaluation.json", report.as_dict()))
    if args.network:
        geom = io.read_network(run.read(args.network))
        run.wrote(_write_scatter(run.out / "fd_scatter.csv", geom, truth=truth, sim=sim))
    run.manifest(EXIT_OK)
    print(f"{'rho %':>8} {'q %':>8} {'v %':>8} {'mean %':>8}")
    print(f"{report.mape_rho:8.3f} {report.mape_q:8.3f} {report.mape_v:8.3f} {report.mape_mean:8.3f}")
    return EXIT_OK


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metanet-calib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="roll the model forward")
    s.add_argument("--network", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--ramps", nargs=2, metavar=("R_CSV", "BETA_CSV"))
    s.add_argument("--boundaries")
    s.add_argument("--boundaries-from-data", action="store_true",
                   help="use the first and last segment of --data as boundaries")
    s.add_argument("--data", help="observed grid directory; row 0 is the initial state")
    s.add_argument("--delta-seconds", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="fit parameters and ramp schedules to observed grids")
    c.add_argument("--network", required=True)
    c.add_argument("--truth", required=True, help="grid directory with rho.csv, q.csv, v.csv")
    c.add_argument("--boundaries", help="boundary CSV; without it the edge segments act as boundaries")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--blocks", type=int, metavar="SIZE")
    c.add_argument("--overlap", type=int)
    c.add_argument("--ablation", action="store_true")
    c.add_argument("--param-sharing", choices=["SV", "SI"])
    c.add_argument("--ramp-sharing", choices=["TV", "TI"])
    c.add_argument("--max-iters", type=int)
    c.add_argument("--init", choices=["staged", "midpoint"])
    c.add_argument("--multistart", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--delta-seconds", type=float)
    c.add_argument("--threads", type=int, help="worker threads (default: METANET_CALIB_THREADS, else all cores)")
    c.set_defaults(func=cmd_calibrate)

    i = sub.add_parser("ingest", help="aggregate trajectories or detector series into grids")
    i.add_argument("source_type", choices=["trajectories", "detectors"])
    i.add_argument("input")
    i.add_argument("--network", required=True)
    i.add_argument("--delta-seconds", type=float)
    i.add_argument("--t-steps", type=int)
    i.add_argument("--reconstruct", action="store_true")
    i.add_argument("--config")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    g = sub.add_parser("generate", help="emit a synthetic scenario bundle")
    g.add_argument("--spec", help="scenario JSON; fields override the chosen scenario's defaults")
    g.add_argument("--scenario", choices=["bottleneck", "ramped"], default=None)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="MAPE between two grid bundles")
    e.add_argument("simulated")
    e.add_argument("truth")
    e.add_argument("--sim-prefix")
    e.add_argument("--interior", action="store_true", help="skip the edge segments and row 0")
    e.add_argument("--network", help="also write the fundamental-diagram scatter")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.error(str(exc))
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MetanetError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
