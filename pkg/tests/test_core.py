import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metanet_calib.core import (PARAM_NAMES, BoundarySeries, LengthMismatch, NetworkGeometry, ParameterSet,
                                ParamSharing, RampSchedule, RampSharing, ShapeMismatch, SimulationConfig,
                                StateGrid, ValidationError, boundaries_from_grid, lane_profile_from_breakpoints,
                                validate_geometry)
from metanet_calib.scenarios import DEFAULT_PARAMS


def test_valid_geometry_passes_unchanged():
    g = NetworkGeometry.uniform(20, 0.4, 4.0)
    assert validate_geometry(g) is g


def test_zero_lane_reports_index():
    lanes = np.full(20, 4.0)
    lanes[3] = 0.0
    with pytest.raises(ValidationError) as err:
        validate_geometry(NetworkGeometry(20, 0.4, lanes))
    assert err.value.kinds == ["NonPositiveLanes"]
    assert err.value.violations[0].index == 3


def test_short_mask_rejected():
    with pytest.raises(ValidationError) as err:
        validate_geometry(NetworkGeometry(20, 0.4, np.full(20, 4.0), onramp_mask=np.zeros(19, bool)))
    assert "MaskLengthMismatch" in err.value.kinds


def test_all_violations_reported_together():
    lanes = np.array([4.0, -1.0, 0.0])
    with pytest.raises(ValidationError) as err:
        validate_geometry(NetworkGeometry(3, -0.4, lanes, offramp_mask=np.zeros(2, bool)))
    kinds = err.value.kinds
    assert kinds.count("NonPositiveLanes") == 2
    assert "NonPositiveLength" in kinds and "MaskLengthMismatch" in kinds


def test_single_segment_rejected():
    with pytest.raises(ValidationError) as err:
        validate_geometry(NetworkGeometry(1, 0.4, [4.0]))
    assert "TooFewSegments" in err.value.kinds


@pytest.mark.parametrize("pieces, expected", [
    ([(0.3, 4), (0.1, 5)], 4.25),
    ([(0.4, 4)], 4.0),
    ([(0.2, 3), (0.2, 5)], 4.0),
])
def test_lane_profile(pieces, expected):
    assert lane_profile_from_breakpoints(0.4, pieces) == pytest.approx(expected, rel=1e-15)


def test_lane_profile_must_tile_segment():
    with pytest.raises(LengthMismatch):
        lane_profile_from_breakpoints(0.4, [(0.3, 4)])


def test_geometry_is_immutable():
    g = NetworkGeometry.uniform(4)
    with pytest.raises(ValueError):
        g.lanes[0] = 3.0


def test_si_parameters_must_agree():
    vals = {p: np.full(3, v) for p, v in DEFAULT_PARAMS.items()}
    vals["v_star"] = np.array([120.0, 121.0, 120.0])
    with pytest.raises(ValidationError):
        ParameterSet(**vals, sharing=ParamSharing.SI)
    ParameterSet(**vals, sharing=ParamSharing.SV)


def test_parameter_matrix_round_trip():
    rng = np.random.default_rng(0)
    m = rng.uniform(1, 2, (6, 5))
    ps = ParameterSet.from_matrix(m)
    assert np.array_equal(ps.as_matrix(), m)
    assert ps.subset(1, 3).n_segments == 2
    assert ps.equals(ParameterSet.from_matrix(m.copy()))


def test_scalar_parameters_broadcast():
    ps = ParameterSet(**{p: [v] for p, v in DEFAULT_PARAMS.items()})
    assert ps.n_segments == 1
    ps = ParameterSet.uniform(4, **DEFAULT_PARAMS)
    assert ps.sharing is ParamSharing.SI and np.all(ps.v_star == 120.0)


def test_mismatched_parameter_lengths():
    vals = {p: np.full(3, v) for p, v in DEFAULT_PARAMS.items()}
    vals["eta"] = np.full(4, 30.0)
    with pytest.raises(ShapeMismatch):
        ParameterSet(**vals)


@given(st.lists(st.booleans(), min_size=2, max_size=8), st.lists(st.booleans(), min_size=2, max_size=8),
       st.integers(1, 6), st.floats(0, 2000), st.floats(0, 0.9))
def test_ramp_build_is_sparse(on, off, T, r, beta):
    n = min(len(on), len(off))
    geom = NetworkGeometry(n, 0.4, np.full(n, 3.0), on[:n], off[:n])
    ramps = RampSchedule.build(geom, r, beta, T)
    assert np.all(ramps.r[:, ~geom.onramp_mask] == 0)
    assert np.all(ramps.beta[:, ~geom.offramp_mask] == 0)
    ramps.check(geom)


def test_ramp_check_catches_off_mask_values():
    geom = NetworkGeometry.uniform(3, onramps=[1])
    r = np.zeros((2, 3))
    r[0, 0] = 5.0
    with pytest.raises(ValidationError) as err:
        RampSchedule(r, np.zeros((2, 3))).check(geom)
    assert "RampOffMask" in err.value.kinds


def test_ramp_check_beta_upper():
    geom = NetworkGeometry.uniform(3, offramps=[2])
    b = np.zeros((2, 3))
    b[:, 2] = 0.95
    with pytest.raises(ValidationError) as err:
        RampSchedule(np.zeros((2, 3)), b).check(geom)
    assert err.value.kinds == ["BetaOutOfRange"]


def test_time_invariant_ramps_must_be_constant():
    r = np.zeros((3, 2))
    r[1, 0] = 1.0
    with pytest.raises(ValidationError):
        RampSchedule(r, np.zeros((3, 2)), RampSharing.TI)
    RampSchedule(np.ones((3, 2)), np.zeros((3, 2)), RampSharing.TI)


def test_state_grid_shapes():
    with pytest.raises(ShapeMismatch):
        StateGrid(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ShapeMismatch):
        StateGrid(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2), bool))


def test_state_grid_negative_only_where_observed():
    rho = np.ones((2, 2))
    rho[0, 0] = -1.0
    with pytest.raises(ValidationError):
        StateGrid(rho, np.ones((2, 2)), np.ones((2, 2)))
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    g = StateGrid(rho, np.ones((2, 2)), np.ones((2, 2)), mask)
    assert g.observed.sum() == 3


def test_boundaries_validated():
    with pytest.raises(ShapeMismatch):
        BoundarySeries([1, 2], [1, 2], [1], 2.0)
    with pytest.raises(ValidationError):
        BoundarySeries([1, -2], [1, 2], [1, 1], 2.0)
    with pytest.raises(ValidationError):
        BoundarySeries([1], [1], [1], 0.0)


def test_boundaries_from_edges():
    rng = np.random.default_rng(1)
    rho, v = rng.uniform(1, 50, (4, 5)), rng.uniform(10, 100, (4, 5))
    grid = StateGrid(rho, rho * v, v)
    geom = NetworkGeometry(5, 0.4, [4, 4, 3, 3, 2.5])
    b = boundaries_from_grid(grid, geom)
    assert np.array_equal(b.upstream_flow, grid.q[:, 0])
    assert np.array_equal(b.upstream_speed, grid.v[:, 0])
    assert np.array_equal(b.downstream_density, grid.rho[:, 4])
    assert b.downstream_lanes == 2.5


def test_cfl_is_advisory():
    cfg = SimulationConfig(delta_hours=20 / 3600)
    with pytest.warns(RuntimeWarning):
        assert cfg.check_cfl(150.0, 0.4) is False
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert SimulationConfig().check_cfl(120.0, 0.4) is True


def test_simulation_config_validation():
    with pytest.raises(ValidationError):
        SimulationConfig(delta_hours=0.0)
    with pytest.raises(ValidationError):
        SimulationConfig(t_steps=0)


def test_param_names_order():
    assert PARAM_NAMES == ("tau", "eta", "kappa", "v_star", "rho_star", "alpha")
