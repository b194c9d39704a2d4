"""Segment-based second-order macroscopic freeway simulation and calibration."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0+unknown"

from .core import (PARAM_NAMES, BoundarySeries, LengthMismatch, MetanetError, NetworkGeometry, ParameterSet,
                   ParamSharing, RampSchedule, RampSharing, ShapeMismatch, SimulationConfig, StateGrid,
                   ValidationError, Violation, boundaries_from_grid, lane_profile_from_breakpoints,
                   validate_geometry)
from .simulator import (BetaAtUnity, SimulationResult, density_step, equilibrium_speed, rollout, speed_step)
from .calibration import (CalibrationBounds, CalibrationProblem, CalibrationResult, ObjectiveWeights,
                          SolverOptions, calibrate, calibrate_blocks, gradient, objective, run_ablation)
from .evaluation import EvaluationReport, fd_scatter, mape, parameter_recovery_report
from .ingestion import (AsmConfig, DetectorSeries, TrajectoryRecord, detector_to_grid, edie_aggregate,
                        reconstruct_gaps)
from .scenarios import (ScenarioSpec, default_bottleneck_spec, default_ramped_spec, generate,
                        generate_bottleneck, generate_ramped)
from .kernels import BACKEND

__all__ = [
    "__version__",
    "PARAM_NAMES",
    "BoundarySeries",
    "LengthMismatch",
    "MetanetError",
    "NetworkGeometry",
    "ParameterSet",
    "ParamSharing",
    "RampSchedule",
    "RampSharing",
    "ShapeMismatch",
    "SimulationConfig",
    "StateGrid",
    "ValidationError",
    "Violation",
    "boundaries_from_grid",
    "lane_profile_from_breakpoints",
    "validate_geometry",
    "BetaAtUnity",
    "SimulationResult",
    "density_step",
    "equilibrium_speed",
    "rollout",
    "speed_step",
    "CalibrationBounds",
    "CalibrationProblem",
    "CalibrationResult",
    "ObjectiveWeights",
    "SolverOptions",
    "calibrate",
    "calibrate_blocks",
    "gradient",
    "objective",
    "run_ablation",
    "EvaluationReport",
    "fd_scatter",
    "mape",
    "parameter_recovery_report",
    "AsmConfig",
    "DetectorSeries",
    "TrajectoryRecord",
    "detector_to_grid",
    "edie_aggregate",
    "reconstruct_gaps",
    "ScenarioSpec",
    "default_bottleneck_spec",
    "default_ramped_spec",
    "generate",
    "generate_bottleneck",
    "generate_ramped",
    "BACKEND",
]
