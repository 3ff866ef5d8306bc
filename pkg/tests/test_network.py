"""Topology validation, the exact power-flow oracle, and file round-trips."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshaper import (
    Bus,
    DistFlowDivergence,
    FixedLoadForecast,
    Line,
    NetworkModel,
    distflow_residuals,
    load_network,
    random_radial_network,
    save_network,
    solve_exact_distflow,
    validate_topology,
)
from gridshaper.network import downstream_lines

from conftest import two_bus


def make_model(buses, lines, **kw):
    n = len(buses)
    defaults = dict(
        v0_sq=1.0,
        v_min_sq=0.9**2,
        v_max_sq=1.05**2,
        forecast=FixedLoadForecast(p=np.zeros((1, n)), q=np.zeros((1, n))),
    )
    defaults.update(kw)
    return NetworkModel(buses=tuple(buses), lines=tuple(lines), **defaults)


class TestValidateTopology:
    def test_minimal_chain_is_clean(self):
        model = make_model([Bus(id=1)], [Line(0, 1, 0.01, 0.01)])
        assert validate_topology(model) == []

    def test_cycle_detected(self):
        model = make_model(
            [Bus(id=1), Bus(id=2)],
            [Line(0, 1, 0.01, 0.01), Line(0, 2, 0.01, 0.01), Line(1, 2, 0.01, 0.01)],
        )
        assert any("tree" in v or "cycle" in v for v in validate_topology(model))

    def test_negative_impedance_detected(self):
        model = make_model([Bus(id=1)], [Line(0, 1, -0.01, 0.01)])
        assert any("negative" in v for v in validate_topology(model))

    def test_disconnected_bus_detected(self):
        model = make_model(
            [Bus(id=1), Bus(id=2)],
            [Line(0, 1, 0.01, 0.01), Line(1, 1, 0.01, 0.01)],
        )
        assert validate_topology(model) != []


class TestDownstreamLines:
    def test_leaf_has_no_children(self):
        model = make_model([Bus(id=1)], [Line(0, 1, 0.01, 0.01)])
        assert downstream_lines(model, 1) == []

    def test_root_of_chain(self):
        model = make_model([Bus(id=1)], [Line(0, 1, 0.01, 0.01)])
        kids = downstream_lines(model, 0)
        assert [(ln.from_bus, ln.to_bus) for ln in kids] == [(0, 1)]

    def test_mid_chain(self):
        model = make_model(
            [Bus(id=1), Bus(id=2), Bus(id=3)],
            [Line(0, 1, 0.01, 0.01), Line(1, 2, 0.01, 0.01), Line(2, 3, 0.01, 0.01)],
        )
        kids = downstream_lines(model, 1)
        assert [(ln.from_bus, ln.to_bus) for ln in kids] == [(1, 2)]


class TestExactDistflow:
    def test_two_bus_reference_value(self):
        # r = x = 0.01, load p = 0.1, q = 0.05 at 1.0 p.u. substation:
        # the converged squared voltage is ~0.9970 (v ~ 0.9985)
        model = two_bus()
        sol = solve_exact_distflow(model, np.array([0.1]), np.array([0.05]))
        assert sol.nu[0, 0] == pytest.approx(0.9970, abs=5e-5)
        assert np.sqrt(sol.nu[0, 0]) == pytest.approx(0.9985, abs=5e-5)

    def test_zero_load_is_flat(self):
        model = two_bus()
        sol = solve_exact_distflow(model, np.zeros(1), np.zeros(1))
        assert np.allclose(sol.P, 0) and np.allclose(sol.Q, 0)
        assert np.allclose(sol.l, 0)
        assert np.allclose(sol.nu, model.v0_sq)

    def test_chain_voltage_monotone(self):
        model = make_model(
            [Bus(id=1), Bus(id=2), Bus(id=3)],
            [Line(0, 1, 0.01, 0.01), Line(1, 2, 0.01, 0.01), Line(2, 3, 0.01, 0.01)],
        )
        sol = solve_exact_distflow(model, np.full(3, 0.05), np.full(3, 0.02))
        nu = sol.nu[0]
        assert nu[0] > nu[1] > nu[2]

    def test_residuals_below_oracle_tolerance(self):
        model = random_radial_network(seed=5, n_buses=9)
        p, q = model.forecast.at(0)
        sol = solve_exact_distflow(model, p, q)
        assert distflow_residuals(model, sol, p, q) <= 1e-10

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(2, 10))
    def test_random_feeders_satisfy_exact_equations(self, seed, n):
        model = random_radial_network(seed=seed, n_buses=n)
        p, q = model.forecast.at(0)
        sol = solve_exact_distflow(model, p, q)
        assert distflow_residuals(model, sol, p, q) <= 1e-10
        # pure consumption can never raise voltage above the substation
        assert np.all(sol.nu <= model.v0_sq + 1e-12)

    def test_divergence_reported(self):
        model = two_bus()
        with pytest.raises(DistFlowDivergence):
            solve_exact_distflow(model, np.array([60.0]), np.array([30.0]))


class TestSerialization:
    def test_roundtrip(self, feeder4, tmp_path):
        path = tmp_path / "net.json"
        save_network(feeder4, str(path))
        back = load_network(str(path))
        assert back.n == feeder4.n
        assert back.v0_sq == feeder4.v0_sq
        assert [(l.from_bus, l.to_bus, l.r, l.x) for l in back.lines] == [
            (l.from_bus, l.to_bus, l.r, l.x) for l in feeder4.lines
        ]
        assert np.array_equal(back.forecast.p, feeder4.forecast.p)
        assert [b.id for b in back.batteries] == [b.id for b in feeder4.batteries]
        assert back.capacitor_buses() == feeder4.capacitor_buses()

    def test_forecast_wraps(self, feeder4):
        period = feeder4.forecast.p.shape[0]
        p0, q0 = feeder4.forecast.at(0)
        pw, qw = feeder4.forecast.at(period)
        assert np.array_equal(p0, pw) and np.array_equal(q0, qw)

    def test_bad_file_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(json.JSONDecodeError):
            load_network(str(path))
