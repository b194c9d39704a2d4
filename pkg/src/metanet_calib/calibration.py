"""Inverse problem: fit segment parameters and ramp schedules to observed grids.

The dynamics are enforced by forward simulation (single shooting), so only
box constraints remain.  All decision variables are mapped affinely onto
[0, 1] before optimisation and gradients come from the adjoint kernel.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .core import (PARAM_NAMES, BoundarySeries, MetanetError, NetworkGeometry, ParameterSet, ParamSharing,
                   RampSchedule, RampSharing, ShapeMismatch, StateGrid, Violation,
                   ValidationError, boundaries_from_grid, validate_geometry)
from .evaluation import EvaluationReport, mape
from .simulator import check_beta

log = logging.getLogger(__name__)


class InfeasibleBounds(MetanetError):
    pass


class DivergedRollout(MetanetError):
    pass


class BlockTooSmall(MetanetError):
    pass


@dataclass(frozen=True)
class CalibrationBounds:
    tau: tuple = (15 / 3600, 60 / 3600)
    eta: tuple = (15.0, 60.0)
    kappa: tuple = (5.0, 60.0)
    v_star: tuple = (110.0, 150.0)
    rho_star: tuple = (15.0, 100.0)
    alpha: tuple = (0.5, 5.0)
    beta: tuple = (0.0, 0.9)
    r: tuple = (0.0, 2000.0)

    def __post_init__(self):
        bad = []
        for f in dataclasses.fields(self):
            lo, hi = getattr(self, f.name)
            object.__setattr__(self, f.name, (float(lo), float(hi)))
            if not lo < hi:
                bad.append(f"{f.name}: lower {lo} >= upper {hi}")
        if self.beta[1] >= 1.0:
            bad.append(f"beta upper {self.beta[1]} must be < 1")
        if self.beta[0] < 0 or self.r[0] < 0:
            bad.append("ramp bounds must be nonnegative")
        for p in PARAM_NAMES:
            if getattr(self, p)[0] <= 0:
                bad.append(f"{p} lower bound must be > 0")
        if bad:
            raise InfeasibleBounds("; ".join(bad))

    def param_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([getattr(self, p)[0] for p in PARAM_NAMES])
        hi = np.array([getattr(self, p)[1] for p in PARAM_NAMES])
        return lo, hi

    def as_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationBounds":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class ObjectiveWeights:
    w_v: float = 20.0
    w_rho: float = 1.0
    w_q: float = 1.0

    def __post_init__(self):
        ws = (self.w_v, self.w_rho, self.w_q)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValidationError([Violation("BadWeights", "weights must be >= 0 with one > 0")])


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 20000
    grad_tol: float = 1e-6
    stall_tol: float = 1e-10
    stall_window: int = 25
    init: str = "staged"  # "midpoint", "warm" or "staged"
    warm_params: Optional[ParameterSet] = None
    warm_ramps: Optional[RampSchedule] = None
    multistart_k: int = 0
    seed: int = 0
    threads: Optional[int] = None
    memory: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "SolverOptions":
        keys = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in keys})


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads:
        return max(1, int(threads))
    env = os.environ.get("METANET_CALIB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Everything a calibration run needs.

    Without ``boundaries`` the first and last segments are read as boundary
    data and only the interior segments are simulated and fitted.
    """

    geometry: NetworkGeometry
    ground_truth: StateGrid
    boundaries: Optional[BoundarySeries] = None
    delta_hours: float = 10.0 / 3600.0
    bounds: CalibrationBounds = field(default_factory=CalibrationBounds)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    param_sharing: ParamSharing = ParamSharing.SV
    ramp_sharing: RampSharing = RampSharing.TV
    solver: SolverOptions = field(default_factory=SolverOptions)
    v_min: float = 1.0
    normalizers: Optional[tuple] = None

    def __post_init__(self):
        validate_geometry(self.geometry)
        T, n = self.ground_truth.shape
        if n != self.geometry.n_segments:
            raise ShapeMismatch(f"ground truth has {n} segments, network {self.geometry.n_segments}")
        if T < 2:
            raise ShapeMismatch("ground truth needs at least two timesteps")
        if self.boundaries is not None and self.boundaries.t_steps != T:
            raise ShapeMismatch(f"boundaries have {self.boundaries.t_steps} steps, ground truth {T}")
        if self.interior_only and n < 3:
            raise ShapeMismatch("automatic edge boundaries need at least 3 segments")
        object.__setattr__(self, "param_sharing", ParamSharing(self.param_sharing))
        object.__setattr__(self, "ramp_sharing", RampSharing(self.ramp_sharing))
        if self.normalizers is None:
            obs = self.ground_truth.observed
            norms = tuple(float(np.max(getattr(self.ground_truth, k)[obs])) for k in ("v", "rho", "q"))
            object.__setattr__(self, "normalizers", norms)
        if min(self.normalizers) <= 0:
            raise ValidationError([Violation("ZeroNormalizer", f"observed maxima {self.normalizers} must be > 0")])

    @property
    def interior_only(self) -> bool:
        return self.boundaries is None

    @property
    def fit_range(self) -> tuple[int, int]:
        n = self.geometry.n_segments
        return (1, n - 1) if self.interior_only else (0, n)

    @property
    def t_steps(self) -> int:
        return self.ground_truth.shape[0]

    def effective_boundaries(self) -> BoundarySeries:
        if self.boundaries is not None:
            return self.boundaries
        return boundaries_from_grid(self.ground_truth, self.geometry)

    def fit_mask(self) -> np.ndarray:
        """Cells that enter the objective over the full (T, N) grid."""
        m = self.ground_truth.observed.copy()
        m[0] = False
        s0, s1 = self.fit_range
        m[:, :s0] = False
        m[:, s1:] = False
        return m

    def replace(self, **changes) -> "CalibrationProblem":
        return dataclasses.replace(self, **changes)


class _Layout:
    """Maps the unit-box decision vector to physical parameters and ramps on the fitted segments."""

    def __init__(self, problem: CalibrationProblem):
        s0, s1 = problem.fit_range
        self.s0, self.s1 = s0, s1
        self.n = s1 - s0
        self.T = problem.t_steps
        geom = problem.geometry
        self.on = np.flatnonzero(geom.onramp_mask[s0:s1])
        self.off = np.flatnonzero(geom.offramp_mask[s0:s1])
        self.p_lo, self.p_hi = problem.bounds.param_matrix()
        self.r_lo, self.r_hi = problem.bounds.r
        self.b_lo, self.b_hi = problem.bounds.beta
        self.si = problem.param_sharing is ParamSharing.SI
        self.ti = problem.ramp_sharing is RampSharing.TI
        self.n_p = 6 if self.si else 6 * self.n
        # the last row of the ramp schedule never reaches the simulated grid
        self.n_t = 1 if self.ti else self.T - 1
        self.n_r = self.n_t * len(self.on)
        self.n_b = self.n_t * len(self.off)
        self.size = self.n_p + self.n_r + self.n_b

    def _params_from(self, u_p):
        if self.si:
            u = np.repeat(u_p.reshape(6, 1), self.n, axis=1)
        else:
            u = u_p.reshape(6, self.n)
        P = self.p_lo[:, None] + (self.p_hi - self.p_lo)[:, None] * u
        return np.clip(P, self.p_lo[:, None], self.p_hi[:, None])

    def _ramp_rows(self, u_block, cols, lo, hi):
        out = np.zeros((self.T, self.n))
        if len(cols) == 0:
            return out
        vals = np.clip(lo + (hi - lo) * u_block.reshape(self.n_t, len(cols)), lo, hi)
        if self.ti:
            out[:, cols] = vals[0]
        else:
            out[:-1, cols] = vals
            out[-1, cols] = vals[-1]
        return out

    def decode(self, u):
        u = np.asarray(u, dtype=float)
        P = np.ascontiguousarray(self._params_from(u[:self.n_p]))
        r = self._ramp_rows(u[self.n_p:self.n_p + self.n_r], self.on, self.r_lo, self.r_hi)
        beta = self._ramp_rows(u[self.n_p + self.n_r:], self.off, self.b_lo, self.b_hi)
        return P, r, beta

    def grad_to_unit(self, gP, g_r, g_b):
        g = np.empty(self.size)
        scale = (self.p_hi - self.p_lo)[:, None]
        gP = gP * scale
        g[:self.n_p] = gP.sum(axis=1) if self.si else gP.ravel()

        def ramp_block(gfull, cols, lo, hi):
            sub = gfull[:-1, cols] if not self.ti else gfull[:, cols].sum(axis=0, keepdims=True)
            return (sub * (hi - lo)).ravel()

        g[self.n_p:self.n_p + self.n_r] = ramp_block(g_r, self.on, self.r_lo, self.r_hi)
        g[self.n_p + self.n_r:] = ramp_block(g_b, self.off, self.b_lo, self.b_hi)
        return g

    def encode(self, P, r, beta):
        """Inverse of ``decode`` for physical arrays on the fitted segments."""
        u = np.empty(self.size)
        up = (P - self.p_lo[:, None]) / (self.p_hi - self.p_lo)[:, None]
        u[:self.n_p] = up[:, 0] if self.si else up.ravel()

        def block(full, cols, lo, hi):
            sub = full[:1, cols] if self.ti else full[:-1, cols]
            return ((sub - lo) / (hi - lo)).ravel()

        u[self.n_p:self.n_p + self.n_r] = block(r, self.on, self.r_lo, self.r_hi)
        u[self.n_p + self.n_r:] = block(beta, self.off, self.b_lo, self.b_hi)
        return np.clip(u, 0.0, 1.0)


class _Evaluator:
    """Objective and adjoint gradient over the fitted segments."""

    def __init__(self, problem: CalibrationProblem):
        self.problem = problem
        s0, s1 = problem.fit_range
        self.s0, self.s1 = s0, s1
        geom = problem.geometry
        truth = problem.ground_truth
        self.lanes = np.ascontiguousarray(geom.lanes[s0:s1])
        self.L = geom.segment_length_km
        b = problem.effective_boundaries()
        self.up_q = np.ascontiguousarray(b.upstream_flow)
        self.up_v = np.ascontiguousarray(b.upstream_speed)
        self.down = np.ascontiguousarray(b.downstream_density)
        self.down_lanes = b.downstream_lanes
        self.rho0 = np.ascontiguousarray(truth.rho[0, s0:s1])
        self.v0 = np.ascontiguousarray(truth.v[0, s0:s1])
        self.W = problem.fit_mask()[:, s0:s1].astype(float)
        obs = self.W > 0
        self.rho_bar = np.where(obs, truth.rho[:, s0:s1], 0.0)
        self.q_bar = np.where(obs, truth.q[:, s0:s1], 0.0)
        self.v_bar = np.where(obs, truth.v[:, s0:s1], 0.0)
        self.v_max, self.rho_max, self.q_max = problem.normalizers
        w = problem.weights
        self.w_v, self.w_rho, self.w_q = w.w_v, w.w_rho, w.w_q

    def simulate(self, P, r, beta):
        check_beta(beta)
        return kernels.forward(self.rho0, self.v0, self.lanes, P, np.ascontiguousarray(r),
                               np.ascontiguousarray(beta), self.up_q, self.up_v, self.down,
                               self.down_lanes, self.L, self.problem.delta_hours, self.problem.v_min)

    def value(self, rho, v):
        q = rho * v
        e_v = (v - self.v_bar) / self.v_max
        e_r = (rho - self.rho_bar) / self.rho_max
        e_q = (q - self.q_bar) / self.q_max
        J = float(np.sum(self.W * (self.w_v * e_v * e_v + self.w_rho * e_r * e_r + self.w_q * e_q * e_q)))
        return J, e_v, e_r, e_q

    def value_and_grad(self, P, r, beta):
        rho, v, flags = self.simulate(P, r, beta)
        J, e_v, e_r, e_q = self.value(rho, v)
        if not np.isfinite(J):
            return J, None, None, None
        g_v = self.W * (2 * self.w_v * e_v / self.v_max + 2 * self.w_q * e_q / self.q_max * rho)
        g_rho = self.W * (2 * self.w_rho * e_r / self.rho_max + 2 * self.w_q * e_q / self.q_max * v)
        gP, g_r, g_b = kernels.adjoint(rho, v, flags, self.lanes, P, np.ascontiguousarray(beta), self.up_v,
                                       self.down, self.down_lanes, self.L, self.problem.delta_hours,
                                       np.ascontiguousarray(g_rho), np.ascontiguousarray(g_v))
        return J, gP, g_r, g_b


def _fitted_arrays(problem: CalibrationProblem, params: ParameterSet, ramps: RampSchedule):
    s0, s1 = problem.fit_range
    if params.n_segments != problem.geometry.n_segments:
        raise ShapeMismatch("parameter set does not cover the network")
    if ramps.shape != problem.ground_truth.shape:
        raise ShapeMismatch(f"ramp schedule {ramps.shape} vs ground truth {problem.ground_truth.shape}")
    P = np.ascontiguousarray(params.as_matrix()[:, s0:s1])
    return P, np.ascontiguousarray(ramps.r[:, s0:s1]), np.ascontiguousarray(ramps.beta[:, s0:s1])


def objective(problem: CalibrationProblem, params: ParameterSet, ramps: RampSchedule) -> float:
    """Weighted, max-normalised sum of squared speed, density and flow errors.

    Sums over rows 1..T-1 of the fitted segments, skipping missing cells.
    """
    ev = _Evaluator(problem)
    rho, v, _ = ev.simulate(*_fitted_arrays(problem, params, ramps))
    return ev.value(rho, v)[0]


def gradient(problem: CalibrationProblem, params: ParameterSet, ramps: RampSchedule):
    """Exact gradient of :func:`objective` in physical units.

    Returns ``(g_params, g_r, g_beta)``: ``g_params`` is (6, N), or (6,)
    summed over segments when ``params.sharing`` is SI; ramp gradients are
    (T, N) and zero off the ramp masks and outside the fitted segments.
    """
    ev = _Evaluator(problem)
    s0, s1 = problem.fit_range
    J, gP, g_r, g_b = ev.value_and_grad(*_fitted_arrays(problem, params, ramps))
    if gP is None:
        raise DivergedRollout("non-finite objective")
    geom = problem.geometry
    full_P = np.zeros((6, geom.n_segments))
    full_P[:, s0:s1] = gP
    full_r = np.zeros(problem.ground_truth.shape)
    full_b = np.zeros(problem.ground_truth.shape)
    full_r[:, s0:s1] = np.where(geom.onramp_mask[s0:s1], g_r, 0.0)
    full_b[:, s0:s1] = np.where(geom.offramp_mask[s0:s1], g_b, 0.0)
    if params.sharing is ParamSharing.SI:
        full_P = full_P.sum(axis=1)
    return full_P, full_r, full_b


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    params: ParameterSet
    ramps: RampSchedule
    simulated: StateGrid
    objective_value: float
    iterations: int
    converged: bool
    mape: Optional[EvaluationReport]
    message: str = ""
    n_evaluations: int = 0
    start_index: int = 0
    fit_range: tuple = (0, 0)

    def report(self) -> dict:
        m = self.mape.as_dict() if self.mape is not None else None
        return {"objective": self.objective_value, "iterations": self.iterations, "converged": self.converged,
                "mape": m, "message": self.message, "n_evaluations": self.n_evaluations,
                "fit_range": list(self.fit_range)}


@dataclass
class _Run:
    u: np.ndarray
    J: float
    iterations: int
    converged: bool
    message: str
    n_eval: int


class _Stall(Exception):
    pass


def _minimize(ev: _Evaluator, layout: _Layout, u0: np.ndarray, opts: SolverOptions) -> _Run:
    n_eval = 0
    cache = {}

    def fun(u):
        nonlocal n_eval
        n_eval += 1
        P, r, beta = layout.decode(u)
        J, gP, g_r, g_b = ev.value_and_grad(P, r, beta)
        if gP is None:
            # steer the line search away from blown-up rollouts
            return 1e30, np.zeros_like(u)
        g = layout.grad_to_unit(gP, g_r, g_b)
        cache["last"] = (u.copy(), J)
        return J, g

    J0, g0 = fun(u0)
    if J0 >= 1e30:
        P, r, beta = layout.decode(u0)
        raise DivergedRollout(f"rollout is non-finite at the initial point (params={P.tolist()}, "
                              f"max r={r.max()}, max beta={beta.max()})")
    if layout.size == 0:
        return _Run(u0, J0, 0, True, "no free variables", n_eval)

    best = {"u": u0.copy(), "J": J0}
    history = [J0]
    it = [0]

    def callback(intermediate_result):
        it[0] += 1
        J = float(intermediate_result.fun)
        if J < best["J"]:
            best["u"] = np.array(intermediate_result.x, copy=True)
            best["J"] = J
        history.append(J)
        w = opts.stall_window
        if len(history) > w:
            old = history[-w - 1]
            if old - J <= opts.stall_tol * max(abs(old), 1e-300):
                raise StopIteration

    res = minimize(fun, u0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * layout.size, callback=callback,
                   options=dict(maxiter=opts.max_iters, maxfun=max(opts.max_iters * 4, 1000), gtol=opts.grad_tol,
                                ftol=0.0, maxcor=opts.memory))
    msg = str(res.message)
    if it[0] >= opts.max_iters:
        converged = False
    else:
        converged = bool(res.status == 0) or "callback" in msg.lower() or "abnormal" in msg.lower()
    if "callback" in msg.lower():
        msg = f"relative objective decrease below {opts.stall_tol} over {opts.stall_window} iterations"
    return _Run(best["u"], best["J"], it[0], converged, msg, n_eval)


def _initial_point(problem: CalibrationProblem, layout: _Layout) -> np.ndarray:
    opts = problem.solver
    if opts.init == "midpoint":
        return np.full(layout.size, 0.5)
    if opts.init == "warm":
        if opts.warm_params is None:
            raise ValidationError([Violation("NoWarmStart", "init='warm' needs warm_params")])
        s0, s1 = problem.fit_range
        P = opts.warm_params.as_matrix()[:, s0:s1]
        ramps = opts.warm_ramps or RampSchedule.zeros(*problem.ground_truth.shape)
        return layout.encode(P, ramps.r[:, s0:s1], ramps.beta[:, s0:s1])
    raise ValidationError([Violation("BadInit", f"unknown init mode {opts.init!r}")])


def _assemble(problem: CalibrationProblem, layout: _Layout, ev: _Evaluator, run: _Run, start_index: int):
    T, N = problem.ground_truth.shape
    s0, s1 = problem.fit_range
    P, r, beta = layout.decode(run.u)
    full_P = np.empty((6, N))
    full_P[:, s0:s1] = P
    # unfitted edge segments borrow their nearest fitted neighbour
    full_P[:, :s0] = P[:, :1]
    full_P[:, s1:] = P[:, -1:]
    full_r = np.zeros((T, N))
    full_b = np.zeros((T, N))
    full_r[:, s0:s1] = r
    full_b[:, s0:s1] = beta
    params = ParameterSet.from_matrix(full_P, problem.param_sharing)
    ramps = RampSchedule(full_r, full_b, problem.ramp_sharing)
    rho, v, _ = ev.simulate(P, r, beta)
    J = ev.value(rho, v)[0]
    truth = problem.ground_truth
    sim_rho, sim_v = truth.rho.copy(), truth.v.copy()
    sim_rho[:, s0:s1] = rho
    sim_v[:, s0:s1] = v
    sim_q = sim_rho * sim_v
    sim_q[:, :s0] = truth.q[:, :s0]
    sim_q[:, s1:] = truth.q[:, s1:]
    simulated = StateGrid(sim_rho, sim_q, sim_v)
    try:
        report = mape(simulated, truth, problem.fit_mask())
    except MetanetError:
        report = None
    return CalibrationResult(params, ramps, simulated, J, run.iterations, run.converged, report, run.message,
                             run.n_eval, start_index, (s0, s1))


def _stage_chain(problem: CalibrationProblem) -> list[tuple[ParamSharing, RampSharing]]:
    """Nested configurations from coarsest to the requested one."""
    p, r = problem.param_sharing, problem.ramp_sharing
    chain = [(ParamSharing.SI, RampSharing.TI)]
    if r is RampSharing.TV:
        chain.append((ParamSharing.SI, RampSharing.TV))
    chain.append((p, r))
    out = []
    for c in chain:
        if c not in out:
            out.append(c)
    return out


def _calibrate_once(problem: CalibrationProblem) -> CalibrationResult:
    layout = _Layout(problem)
    ev = _Evaluator(problem)
    opts = problem.solver
    starts = [_initial_point(problem, layout)]
    if opts.multistart_k > 0:
        rng = np.random.default_rng(opts.seed)
        starts += [rng.uniform(0.0, 1.0, layout.size) for _ in range(opts.multistart_k)]

    def run(i):
        return _minimize(ev, layout, starts[i], opts)

    threads = min(resolve_threads(opts.threads), len(starts))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(run, range(len(starts))))
    else:
        runs = [run(i) for i in range(len(starts))]
    best = min(range(len(runs)), key=lambda i: (runs[i].J, i))
    return _assemble(problem, layout, ev, runs[best], best)


def calibrate(problem: CalibrationProblem) -> CalibrationResult:
    """Bound-constrained quasi-Newton fit of parameters and ramp schedules.

    With ``init="staged"`` (default) the fit starts from the bound midpoints
    in the segment-invariant, time-invariant configuration and each solution
    warm-starts the next finer configuration up to the requested one.  The
    configurations are nested, so every stage can only lower the objective.
    Multi-starts apply to the final stage; lowest objective wins, ties go to
    the lowest start index.
    """
    opts = problem.solver
    if opts.init != "staged":
        res = _calibrate_once(problem)
        log.info("calibration finished: J=%.6g after %d iterations (%s)", res.objective_value, res.iterations,
                 res.message)
        return res

    chain = _stage_chain(problem)
    res = None
    iterations = evaluations = 0
    notes = []
    for k, (p, r) in enumerate(chain):
        final = k == len(chain) - 1
        if res is None:
            sol = dataclasses.replace(opts, init="midpoint", multistart_k=opts.multistart_k if final else 0)
        else:
            sol = dataclasses.replace(opts, init="warm", warm_params=res.params.with_sharing(ParamSharing.SV),
                                      warm_ramps=RampSchedule(res.ramps.r, res.ramps.beta),
                                      multistart_k=opts.multistart_k if final else 0)
        res = _calibrate_once(problem.replace(param_sharing=p, ramp_sharing=r, solver=sol))
        iterations += res.iterations
        evaluations += res.n_evaluations
        notes.append(f"{p.value}-{r.value}: J={res.objective_value:.6g} ({res.iterations} it)")
        log.info("stage %s-%s: J=%.6g after %d iterations", p.value, r.value, res.objective_value, res.iterations)
    return dataclasses.replace(res, iterations=iterations, n_evaluations=evaluations,
                               message=res.message + " | stages " + ", ".join(notes))


def _block_spans(s0: int, s1: int, size: int, overlap: int) -> list[tuple[int, int]]:
    stride = size - overlap
    spans = []
    a = s0
    while True:
        b = min(a + size, s1)
        spans.append((max(s0, b - size), b))
        if b >= s1:
            break
        a += stride
    return spans


def calibrate_blocks(problem: CalibrationProblem, block_size: int, overlap: int = 0) -> CalibrationResult:
    """Calibrate consecutive blocks independently and stitch the results.

    Inner block edges take their boundary series from the observed data of
    the adjacent segments.  A segment covered by several blocks is taken
    from the block where it sits farthest from a block edge.
    """
    if block_size < 2:
        raise BlockTooSmall(f"block_size={block_size} < 2")
    if overlap < 0 or overlap >= block_size:
        raise BlockTooSmall(f"overlap={overlap} must lie in [0, block_size)")
    s0, s1 = problem.fit_range
    if block_size >= s1 - s0:
        return calibrate(problem)

    truth = problem.ground_truth
    geom = problem.geometry
    outer = problem.boundaries
    spans = _block_spans(s0, s1, block_size, overlap)
    results = []
    for a, b in spans:
        if a == s0 and outer is not None:
            up_q, up_v = outer.upstream_flow, outer.upstream_speed
        else:
            up_q, up_v = truth.q[:, a - 1], truth.v[:, a - 1]
        if b == s1 and outer is not None:
            down, down_lanes = outer.downstream_density, outer.downstream_lanes
        else:
            down, down_lanes = truth.rho[:, b], float(geom.lanes[b])
        sub = problem.replace(geometry=geom.subset(a, b), ground_truth=truth.columns(a, b),
                              boundaries=BoundarySeries(up_q, up_v, down, down_lanes))
        if problem.solver.warm_params is not None:
            warm_r = problem.solver.warm_ramps
            sub = sub.replace(solver=dataclasses.replace(
                problem.solver, warm_params=problem.solver.warm_params.subset(a, b),
                warm_ramps=None if warm_r is None else RampSchedule(warm_r.r[:, a:b], warm_r.beta[:, a:b])))
        results.append(calibrate(sub))

    T, N = truth.shape
    owner = np.full(N, -1)
    depth = np.full(N, -1)
    for k, (a, b) in enumerate(spans):
        for x in range(a, b):
            d = min(x - a, b - 1 - x)
            if d > depth[x]:
                owner[x], depth[x] = k, d
    full_P = np.empty((6, N))
    full_r = np.zeros((T, N))
    full_b = np.zeros((T, N))
    rho, q, v = truth.rho.copy(), truth.q.copy(), truth.v.copy()
    for x in range(s0, s1):
        k = owner[x]
        a = spans[k][0]
        res = results[k]
        full_P[:, x] = res.params.as_matrix()[:, x - a]
        full_r[:, x] = res.ramps.r[:, x - a]
        full_b[:, x] = res.ramps.beta[:, x - a]
        rho[:, x], q[:, x], v[:, x] = res.simulated.rho[:, x - a], res.simulated.q[:, x - a], res.simulated.v[:, x - a]
    full_P[:, :s0] = full_P[:, s0:s0 + 1]
    full_P[:, s1:] = full_P[:, s1 - 1:s1]
    sharing = problem.param_sharing
    if sharing is ParamSharing.SI and not np.all(full_P == full_P[:, :1]):
        sharing = ParamSharing.SV  # each block has its own shared values
    params = ParameterSet.from_matrix(full_P, sharing)
    ramps = RampSchedule(full_r, full_b, problem.ramp_sharing)
    simulated = StateGrid(rho, q, v)
    ev = _Evaluator(problem)
    J = ev.value(rho[:, s0:s1], v[:, s0:s1])[0]
    report = mape(simulated, truth, problem.fit_mask())
    return CalibrationResult(params, ramps, simulated, J, sum(r.iterations for r in results),
                             all(r.converged for r in results), report,
                             f"{len(spans)} blocks: " + "; ".join(r.message for r in results),
                             sum(r.n_evaluations for r in results), 0, (s0, s1))


@dataclass
class AblationRow:
    config: str
    param_sharing: ParamSharing
    ramp_sharing: Optional[RampSharing]
    result: Optional[CalibrationResult] = None
    error: Optional[str] = None

    @property
    def mape_mean(self) -> float:
        if self.result is None or self.result.mape is None:
            return float("nan")
        return self.result.mape.mape_mean

    def as_dict(self) -> dict:
        m = self.result.mape if self.result is not None else None
        return {
            "config": self.config,
            "rho": m.mape_rho if m else "",
            "q": m.mape_q if m else "",
            "v": m.mape_v if m else "",
            "mean": m.mape_mean if m else "",
            "objective": self.result.objective_value if self.result else "",
            "iterations": self.result.iterations if self.result else "",
            "converged": self.result.converged if self.result else "",
            "error": self.error or "",
        }


def ablation_configs(problem: CalibrationProblem) -> list[tuple[str, ParamSharing, Optional[RampSharing]]]:
    s0, s1 = problem.fit_range
    geom = problem.geometry
    has_ramps = bool(geom.onramp_mask[s0:s1].any() or geom.offramp_mask[s0:s1].any())
    if not has_ramps:
        return [("SV", ParamSharing.SV, None), ("SI", ParamSharing.SI, None)]
    return [(f"{p.value}-{r.value}", p, r) for p in (ParamSharing.SV, ParamSharing.SI)
            for r in (RampSharing.TV, RampSharing.TI)]


def run_ablation(problem: CalibrationProblem, block_size: Optional[int] = None,
                 overlap: int = 0) -> list[AblationRow]:
    """Calibrate every applicable SI/SV x TI/TV combination on identical data.

    A failing cell is recorded with its error message instead of aborting
    the table.
    """
    rows = [AblationRow(label, p, r) for label, p, r in ablation_configs(problem)]

    def run(row: AblationRow) -> AblationRow:
        sub = problem.replace(param_sharing=row.param_sharing,
                              ramp_sharing=row.ramp_sharing or problem.ramp_sharing,
                              solver=dataclasses.replace(problem.solver, threads=1))
        try:
            row.result = calibrate_blocks(sub, block_size, overlap) if block_size else calibrate(sub)
        except MetanetError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        return row

    threads = min(resolve_threads(problem.solver.threads), len(rows))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(run, rows))
    else:
        rows = [run(row) for row in rows]
    return rows
