import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import _oracles as oracle
from metanet_calib import kernels
from metanet_calib.core import (BoundarySeries, NetworkGeometry, ParameterSet, RampSchedule, ShapeMismatch,
                                SimulationConfig)
from metanet_calib.scenarios import DEFAULT_PARAMS
from metanet_calib.simulator import BetaAtUnity, density_step, equilibrium_speed, rollout, speed_step

DELTA = 10 / 3600
L = 0.4


def test_equilibrium_speed_at_zero_density():
    assert equilibrium_speed(0.0, 4, 120.0, 37.45, 1.4) == 120.0


def test_equilibrium_speed_alpha_one_at_critical():
    assert equilibrium_speed(37.45 * 3, 3, 120.0, 37.45, 1.0) == pytest.approx(120 / math.e, rel=1e-15)


def test_equilibrium_speed_table_values():
    v = equilibrium_speed(149.8, 4, 120.0, 37.45, 1.4)
    assert v == pytest.approx(oracle.fd_speed(149.8, 4, 120.0, 37.45, 1.4), rel=1e-14)
    assert v == pytest.approx(58.75, abs=0.01)


def test_density_step_zero_divergence():
    assert density_step(100.0, 3000.0, 3000.0, 0.0, 0.0, L, DELTA) == (100.0, False)


def test_density_step_onramp_example():
    rho, clamped = density_step(100.0, 4000.0, 3000.0, 0.0, 500.0, L, DELTA)
    assert rho == pytest.approx(100 + DELTA / L * 1500, rel=1e-15)
    assert rho == pytest.approx(110.417, abs=1e-3) and not clamped


def test_density_step_split_ratio_doubles_outflow():
    rho, _ = density_step(100.0, 3000.0, 3000.0, 0.5, 0.0, L, DELTA)
    assert rho == pytest.approx(79.1667, abs=1e-4)


def test_density_step_clamps_and_flags():
    rho, clamped = density_step(1.0, 0.0, 8000.0, 0.0, 0.0, L, DELTA)
    assert rho == 0.0 and clamped


def test_density_step_beta_guard():
    with pytest.raises(BetaAtUnity):
        density_step(10.0, 100.0, 100.0, 1.0 - 1e-9, 0.0, L, DELTA)


def test_speed_step_uniform_equilibrium_unchanged():
    d = 30.0
    v = oracle.fd_speed(d, 1, 120.0, 37.45, 1.4)
    out, floored = speed_step(v, v, d, d, 18 / 3600, 30.0, 40.0, 120.0, 37.45, 1.4, L, DELTA)
    assert out == pytest.approx(v, rel=1e-14) and not floored


def test_speed_step_relaxation_only():
    # pick the density whose equilibrium speed is exactly 100
    d = 37.45 * (1.4 * math.log(120 / 100)) ** (1 / 1.4)
    out, _ = speed_step(80.0, 80.0, d, d, 18 / 3600, 30.0, 40.0, 120.0, 37.45, 1.4, L, DELTA)
    assert out == pytest.approx(80 + (10 / 18) * 20, rel=1e-12)
    assert out == pytest.approx(91.11, abs=0.01)


def test_speed_step_anticipation_slows_down():
    d = 30.0
    v = oracle.fd_speed(d, 1, 120.0, 37.45, 1.4)
    out, _ = speed_step(v, v, d, d + 5.0, 18 / 3600, 30.0, 40.0, 120.0, 37.45, 1.4, L, DELTA)
    assert out < v


def test_speed_step_floor_flags():
    out, floored = speed_step(2.0, 0.0, 90.0, 200.0, 15 / 3600, 60.0, 5.0, 120.0, 37.45, 1.4, L, DELTA, v_min=1.0)
    assert out == 1.0 and floored


def _params(n, **over):
    return ParameterSet.uniform(n, **{**DEFAULT_PARAMS, **over})


def _equilibrium_case(n=20, T=101, d=25.0, lanes=3.0):
    geom = NetworkGeometry.uniform(n, L, lanes)
    params = _params(n)
    rho = d * lanes
    v = float(equilibrium_speed(rho, lanes, 120.0, 37.45, 1.4))
    b = BoundarySeries(np.full(T, rho * v), np.full(T, v), np.full(T, rho), lanes)
    return geom, params, b, np.full(n, rho), np.full(n, v)


def test_fixed_point_is_stationary():
    geom, params, b, rho0, v0 = _equilibrium_case()
    cfg = SimulationConfig(DELTA, 101)
    res = rollout(geom, params, RampSchedule.zeros(101, 20), b, rho0, v0, cfg)
    assert np.max(np.abs(res.states.rho - rho0)) <= 1e-12 * rho0[0]
    assert np.max(np.abs(res.states.v - v0)) <= 1e-12 * v0[0]
    assert res.density_clamps == 0 and res.speed_floors == 0


def test_rollout_matches_scalar_oracle_small():
    rng = np.random.default_rng(3)
    n, T = 3, 3
    lanes = np.array([3.0, 2.5, 2.0])
    geom = NetworkGeometry(n, L, lanes, [0, 1, 0], [0, 0, 1])
    P = np.array([rng.uniform(lo, hi, n) for lo, hi in
                  [(15 / 3600, 60 / 3600), (15, 60), (5, 60), (110, 150), (15, 100), (0.5, 5)]])
    params = ParameterSet.from_matrix(P)
    ramps = RampSchedule.build(geom, rng.uniform(0, 800, (T, n)), rng.uniform(0, 0.5, (T, n)), T)
    b = BoundarySeries(rng.uniform(2000, 5000, T), rng.uniform(60, 110, T), rng.uniform(20, 80, T), 2.0)
    rho0, v0 = rng.uniform(20, 100, n), rng.uniform(40, 110, n)
    res = rollout(geom, params, ramps, b, rho0, v0, SimulationConfig(DELTA, T))
    ref_rho, ref_v = oracle.rollout(rho0, v0, lanes, P, ramps.r, ramps.beta, b.upstream_flow, b.upstream_speed,
                                    b.downstream_density, 2.0, L, DELTA)
    np.testing.assert_allclose(res.states.rho, ref_rho, rtol=1e-10, atol=0)
    np.testing.assert_allclose(res.states.v, ref_v, rtol=1e-10, atol=0)
    assert np.array_equal(res.states.rho[0], rho0)
    assert np.array_equal(res.states.q, res.states.rho * res.states.v)


def test_rollout_shape_errors():
    geom, params, b, rho0, v0 = _equilibrium_case(n=4, T=5)
    with pytest.raises(ShapeMismatch):
        rollout(geom, params, RampSchedule.zeros(5, 3), b, rho0, v0, SimulationConfig(DELTA, 5))
    with pytest.raises(ShapeMismatch):
        rollout(geom, params, RampSchedule.zeros(6, 4), b, rho0, v0, SimulationConfig(DELTA, 6))
    with pytest.raises(ShapeMismatch):
        rollout(geom, _params(5), RampSchedule.zeros(5, 4), b, rho0, v0, SimulationConfig(DELTA, 5))


def test_rollout_beta_guard():
    geom, params, b, rho0, v0 = _equilibrium_case(n=4, T=5)
    geom = NetworkGeometry.uniform(4, L, 3.0, offramps=[2])
    beta = np.zeros((5, 4))
    beta[2, 2] = 1.0
    with pytest.raises(BetaAtUnity):
        rollout(geom, params, RampSchedule(np.zeros((5, 4)), beta), b, rho0, v0, SimulationConfig(DELTA, 5))


def test_clamp_events_reported():
    n, T = 3, 4
    geom = NetworkGeometry.uniform(n, L, 2.0)
    b = BoundarySeries(np.zeros(T), np.full(T, 5.0), np.full(T, 200.0), 2.0)
    res = rollout(geom, _params(n), RampSchedule.zeros(T, n), b, np.array([1.0, 1.0, 150.0]),
                  np.array([200.0, 100.0, 5.0]), SimulationConfig(DELTA, T))
    kinds = {e["kind"] for e in res.clamp_events()}
    assert res.density_clamps > 0
    assert res.density_clamps + res.speed_floors == len(res.clamp_events()) > 0
    assert kinds <= {"density_clamp", "speed_floor"}
    assert res.diagnostics() == {"clamp_events": res.clamp_events()}


@given(st.integers(2, 8), st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_conservation_without_ramps(n, T, seed):
    rng = np.random.default_rng(seed)
    geom = NetworkGeometry(n, L, rng.uniform(1.5, 5, n))
    b = BoundarySeries(rng.uniform(1000, 6000, T), rng.uniform(50, 110, T), rng.uniform(10, 100, T), 3.0)
    res = rollout(geom, _params(n), RampSchedule.zeros(T, n), b, rng.uniform(20, 120, n),
                  rng.uniform(50, 110, n), SimulationConfig(DELTA, T))
    s = res.states
    ok = res.flags[1:].sum(axis=1) == 0
    lhs = L * (s.rho[1:].sum(axis=1) - s.rho[:-1].sum(axis=1))
    rhs = DELTA * (b.upstream_flow[:-1] - s.q[:-1, -1])
    np.testing.assert_allclose(lhs[ok], rhs[ok], rtol=0, atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
def test_more_downstream_density_lowers_speed(seed, bump):
    rng = np.random.default_rng(seed)
    n, T = 4, 2
    geom = NetworkGeometry.uniform(n, L, 3.0)
    rho0, v0 = rng.uniform(20, 100, n), rng.uniform(60, 110, n)
    cfg = SimulationConfig(DELTA, T, v_min=0.0)

    def last_speed(down):
        b = BoundarySeries(np.full(T, 4000.0), np.full(T, 90.0), np.full(T, down), 3.0)
        return rollout(geom, _params(n), RampSchedule.zeros(T, n), b, rho0, v0, cfg).states.v[1, -1]

    assert last_speed(60.0 + bump) < last_speed(60.0)


def test_rollout_is_deterministic(bottleneck):
    b = bottleneck
    args = (b.geometry, b.params, b.ramps, b.boundaries, b.truth.rho[0], b.truth.v[0], b.config)
    r1, r2 = rollout(*args), rollout(*args)
    assert np.array_equal(r1.states.rho, r2.states.rho) and np.array_equal(r1.states.v, r2.states.v)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
