import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from metanet_calib import io
from metanet_calib.core import (BoundarySeries, NetworkGeometry, ParameterSet, ParamSharing, RampSchedule,
                                StateGrid, ValidationError)
from metanet_calib.scenarios import DEFAULT_PARAMS

finite = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(0, 1e9)))
def test_grid_csv_round_trip_is_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("g") / "rho.csv"
    io.write_grid_csv(path, values)
    back, missing = io.read_grid_csv(path)
    assert np.array_equal(back, values) and not missing.any()


@given(st.lists(finite, min_size=6, max_size=6), st.integers(2, 6), st.booleans())
def test_params_round_trip(tmp_path_factory, vals, n, si):
    path = tmp_path_factory.mktemp("p") / "params.json"
    if si:
        ps = ParameterSet.uniform(n, **dict(zip(DEFAULT_PARAMS, vals)))
    else:
        rng = np.random.default_rng(n)
        ps = ParameterSet.from_matrix(np.array(vals)[:, None] * rng.uniform(0.5, 2, (6, n)))
    io.write_params(path, ps)
    back = io.read_params(path)
    assert back.equals(ps)


def test_si_params_file_holds_scalars(tmp_path):
    io.write_params(tmp_path / "p.json", ParameterSet.uniform(3, **DEFAULT_PARAMS))
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["v_star"] == 120.0 and d["sharing"] == "SI"
    assert io.read_params(tmp_path / "p.json").n_segments == 3


def test_params_scalar_file_broadcasts(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps(DEFAULT_PARAMS))
    ps = io.read_params(tmp_path / "p.json", n_segments=5)
    assert ps.n_segments == 5 and ps.sharing is ParamSharing.SI


def test_params_missing_field(tmp_path):
    d = dict(DEFAULT_PARAMS)
    del d["kappa"]
    (tmp_path / "p.json").write_text(json.dumps(d))
    with pytest.raises(ValidationError, match="kappa"):
        io.read_params(tmp_path / "p.json")


def test_network_round_trip(tmp_path):
    g = NetworkGeometry(4, 0.4, [4.0, 4.25, 3.0, 2.0], [0, 1, 0, 0], [0, 0, 1, 0])
    io.write_network(tmp_path / "n.json", g)
    back = io.read_network(tmp_path / "n.json")
    assert np.array_equal(back.lanes, g.lanes)
    assert np.array_equal(back.onramp_mask, g.onramp_mask) and np.array_equal(back.offramp_mask, g.offramp_mask)


def test_network_malformed_lanes_named(tmp_path):
    (tmp_path / "n.json").write_text(json.dumps({"n_segments": 2, "segment_length_km": 0.4, "lanes": "4,4"}))
    with pytest.raises(ValidationError, match="'lanes'"):
        io.read_network(tmp_path / "n.json")


def test_network_bad_json_reports_line(tmp_path):
    (tmp_path / "n.json").write_text('{\n"n_segments": 2,\n"lanes": [4, 4,]\n}')
    with pytest.raises(io.ParseError) as err:
        io.read_network(tmp_path / "n.json")
    assert err.value.line == 3


def test_grid_bundle_with_missing_cells(tmp_path):
    rng = np.random.default_rng(0)
    rho = rng.uniform(0, 100, (5, 3))
    v = rng.uniform(1, 120, (5, 3))
    mask = rng.uniform(size=(5, 3)) < 0.3
    grid = StateGrid(rho, rho * v, v, mask)
    io.write_grid_bundle(tmp_path, grid)
    back = io.read_grid_bundle(tmp_path)
    assert np.array_equal(back.missing_mask, mask)
    obs = ~mask
    assert np.array_equal(back.rho[obs], rho[obs]) and np.all(np.isnan(back.rho[mask]))


def test_grid_header_and_row_errors(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(io.ParseError) as err:
        io.read_grid_csv(p)
    assert err.value.line == 1
    p.write_text("seg_0,seg_1\n1,2\n3\n")
    with pytest.raises(io.ParseError) as err:
        io.read_grid_csv(p)
    assert err.value.line == 3
    p.write_text("seg_0,seg_1\n1,2\n3,x\n")
    with pytest.raises(io.ParseError, match="not a number"):
        io.read_grid_csv(p)


def test_ramps_round_trip(tmp_path):
    geom = NetworkGeometry.uniform(4, onramps=[1], offramps=[3])
    rng = np.random.default_rng(2)
    ramps = RampSchedule.build(geom, rng.uniform(0, 1200, (7, 4)), rng.uniform(0, 0.9, (7, 4)), 7)
    io.write_ramps(tmp_path, ramps)
    back = io.read_ramps(tmp_path / "r.csv", tmp_path / "beta.csv", geom)
    assert np.array_equal(back.r, ramps.r) and np.array_equal(back.beta, ramps.beta)


def test_boundaries_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    b = BoundarySeries(rng.uniform(0, 5000, 9), rng.uniform(0, 120, 9), rng.uniform(0, 90, 9), 2.0)
    io.write_boundaries(tmp_path / "b.csv", b)
    back = io.read_boundaries(tmp_path / "b.csv", 2.0)
    for name in ("upstream_flow", "upstream_speed", "downstream_density"):
        assert np.array_equal(getattr(back, name), getattr(b, name))


def test_boundaries_bad_row(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("time_index,upstream_flow,upstream_speed,downstream_density\n0,1,2,3\n1,1,oops,3\n")
    with pytest.raises(io.ParseError) as err:
        io.read_boundaries(p, 2.0)
    assert err.value.line == 3
    p.write_text("time_index,upstream_flow,upstream_speed,downstream_density\n0,1,2,3\n2,1,2,3\n")
    with pytest.raises(io.ParseError, match="gaps"):
        io.read_boundaries(p, 2.0)


def test_fmt_is_seventeen_digits():
    x = 0.1 + 0.2
    assert float(io.fmt(x)) == x
