"""Two-stage controller: reference problem, terminal set, receding horizon,
and the shifted feasibility candidate."""

import itertools

import numpy as np
import pytest

from gridshaper import (
    Bus,
    ConfigurationError,
    ControllerWeights,
    DeferrableLoad,
    FixedLoadForecast,
    Fleet,
    HorizonConfig,
    Line,
    NetworkModel,
    PriceSignal,
    ProtocolViolation,
    ShapeableLoad,
    SystemState,
    build_terminal_set,
    check_headroom_conditions,
    construct_shifted_candidate,
    shp_soc_min,
    solve_stage1,
    solve_stage2,
    try_stage2,
    verify_candidate,
)
from gridshaper.assets import BatteryBank


def small_model(p_level=0.0, steps=8, battery=True):
    batteries = (
        (BatteryBank(id="b1", bus=1, e=0.2, e_low=0.0, e_max=0.5,
                     p_min=-0.2, p_max=0.2),)
        if battery
        else ()
    )
    return NetworkModel(
        buses=(Bus(id=1, has_capacitor=True, q_min=-0.1, q_max=0.1,
                   battery_id="b1" if battery else None),),
        lines=(Line(0, 1, 0.01, 0.01),),
        v0_sq=1.0,
        v_min_sq=0.9**2,
        v_max_sq=1.0**2,
        forecast=FixedLoadForecast(
            p=np.full((steps, 1), p_level), q=np.full((steps, 1), 0.3 * p_level)
        ),
        batteries=batteries,
    )


HORIZON = HorizonConfig(dt_hours=0.5, N=3, N_r=8)
WEIGHTS = ControllerWeights()


class TestStage1:
    def test_zero_load_zero_control(self):
        ref = solve_stage1(small_model(0.0), HORIZON, WEIGHTS, nu_nom=1.0)
        assert np.allclose(ref.q_hat, 0, atol=1e-4)
        assert np.allclose(ref.p_bat_hat, 0, atol=1e-4)
        assert np.allclose(ref.nu_hat, 1.0, atol=1e-4)
        assert ref.objective == pytest.approx(0.0, abs=1e-6)

    def test_flat_load_keeps_battery_idle(self):
        # voltage stays in bounds unaided, so any battery action only costs
        weights = ControllerWeights(t2=0.0)
        ref = solve_stage1(small_model(0.05), HORIZON, weights, nu_nom=1.0)
        assert np.allclose(ref.p_bat_hat, 0, atol=1e-6)

    def test_periodicity(self, feeder4, fast_config):
        ref = solve_stage1(feeder4, fast_config.horizon, fast_config.weights,
                           fast_config.nu_nom)
        wrap = ref.e_bat_hat[-1] + fast_config.horizon.dt_hours * ref.p_bat_hat[-1]
        assert np.max(np.abs(ref.e_bat_hat[0] - wrap)) <= 1e-7

    def test_infeasible_base_network_reported(self):
        # drawing 12 p.u. through this line drops the voltage below the floor
        # no matter what the battery and capacitor do
        model = small_model(12.0)
        with pytest.raises(ConfigurationError):
            solve_stage1(model, HORIZON, WEIGHTS)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            HorizonConfig(dt_hours=0.5, N=8, N_r=8)
        with pytest.raises(ConfigurationError):
            ControllerWeights(t1=0.0)


def shp_load(**kw):
    base = dict(id="s1", bus=2, e=0.0, e_low=0.0, e_max=0.1, e_des=0.1,
                c_max=0.1, eta=1.0, k_in=0, k_out=4)
    base.update(kw)
    return ShapeableLoad(**base)


class TestTerminalSet:
    def test_empty_fleet_tracks_reference(self, feeder4, fast_config, fast_reference):
        term = build_terminal_set(fast_reference, Fleet(), feeder4, 0,
                                  fast_config.horizon)
        s = fast_config.horizon.N
        assert term.step == s and term.k_out_max == s
        assert term.shapeable_bounds == {}
        e_hat = fast_reference.e_bat_at(s)
        for bk in feeder4.batteries:
            coeffs, rhs = term.battery_rows[bk.bus]
            assert coeffs == {}
            assert rhs == pytest.approx(e_hat[bk.bus - 1])

    def test_load_at_target_leaves_row_at_reference_plus_quota(
        self, feeder4, fast_config, fast_reference
    ):
        load = shp_load(k_out=10, e=0.1)
        term = build_terminal_set(fast_reference, Fleet(shapeable=[load]),
                                  feeder4, 0, fast_config.horizon)
        s = fast_config.horizon.N
        coeffs, rhs = term.battery_rows[2]
        assert coeffs == {"s1": pytest.approx(1.0)}
        expected = fast_reference.e_bat_at(s)[1] + load.e_des / load.eta
        assert rhs == pytest.approx(expected)
        lo, hi = term.shapeable_bounds["s1"]
        assert lo <= hi == load.e_des

    def test_deferrable_energy_enters_battery_row(
        self, feeder4, fast_config, fast_reference
    ):
        s = fast_config.horizon.N
        load = DeferrableLoad(id="d1", bus=2, profile=[0.04] * 4,
                              request_step=0, d_max=2, plug_in_step=s - 1)
        term = build_terminal_set(fast_reference, Fleet(deferrable=[load]),
                                  feeder4, 0, fast_config.horizon)
        _, rhs = term.battery_rows[2]
        # three of the four profile steps remain beyond the horizon end
        remaining = 0.04 * 3 * fast_config.horizon.dt_hours
        assert rhs == pytest.approx(fast_reference.e_bat_at(s)[1] + remaining)

    def test_terminal_lower_bound_never_exceeds_target(
        self, feeder4, fast_config, fast_reference
    ):
        for k_out in range(fast_config.horizon.N, 20):
            load = shp_load(k_out=k_out, e_des=0.08)
            term = build_terminal_set(fast_reference, Fleet(shapeable=[load]),
                                      feeder4, 0, fast_config.horizon)
            lo, hi = term.shapeable_bounds["s1"]
            assert lo <= load.e_des + 1e-12 and hi == load.e_des


class TestHeadroomConditions:
    def test_empty_fleet_passes(self, feeder4, fast_config, fast_reference):
        report = check_headroom_conditions(fast_reference, Fleet(), feeder4,
                                         {}, 0, fast_config.horizon)
        assert report.all_ok
        assert report.violations() == []

    def test_oversized_deferrable_flagged(self, feeder4, fast_config, fast_reference):
        s = fast_config.horizon.N
        # a deferrable draw far beyond the battery's p_min headroom at bus 2
        load = DeferrableLoad(id="d1", bus=2, profile=[5.0] * 3,
                              request_step=0, d_max=2, plug_in_step=s)
        report = check_headroom_conditions(fast_reference, Fleet(deferrable=[load]),
                                         feeder4, {}, 0, fast_config.horizon)
        assert not report.all_ok
        assert any(kind == "power" and bus == 2 for kind, bus, _, _ in report.violations())


class TestStage2:
    def cheap_window_setup(self, feeder4, fast_config, fast_reference):
        price = PriceSignal(np.array([0.5, 0.5, 0.1, 0.1, 0.5, 0.5] + [0.5] * 18))
        weights = ControllerWeights(t1=1.0, t2=0.1, t3=0.0)
        load = shp_load()
        state = SystemState(e_bat=fast_reference.e_bat_hat[0].copy(),
                            e_shp={"s1": 0.0})
        return price, weights, load, state

    def enumeration_oracle(self, load, price, dt):
        """Cheapest on/off max-rate schedule meeting the envelope and target."""
        best = np.inf
        for pattern in itertools.product([0.0, load.c_max], repeat=load.k_out):
            e = load.e
            ok = True
            for t, u in enumerate(pattern):
                e += load.eta * dt * u
                if e > load.e_max + 1e-12 or e < shp_soc_min(load, t + 1, dt) - 1e-12:
                    ok = False
                    break
            if ok and e >= load.e_des - 1e-12:
                best = min(best, sum(price.at(t) * u for t, u in enumerate(pattern)))
        return best

    def test_charging_lands_in_cheap_window(self, feeder4, fast_config, fast_reference):
        price, weights, load, state = self.cheap_window_setup(
            feeder4, fast_config, fast_reference
        )
        sol = solve_stage2(feeder4, Fleet(shapeable=[load]), fast_reference,
                           price, state, 0, fast_config.horizon, weights)
        cost = sum(price.at(t) * u for t, u in sol.u_shp["s1"].items())
        oracle = self.enumeration_oracle(load, price, fast_config.horizon.dt_hours)
        assert cost == pytest.approx(oracle, abs=1e-5)
        # almost all energy drawn inside the cheap steps 2 and 3
        cheap = sum(u for t, u in sol.u_shp["s1"].items() if t in (2, 3))
        total = sum(sol.u_shp["s1"].values())
        assert cheap == pytest.approx(total, abs=1e-5)

    def test_price_scaling_keeps_schedule(self, feeder4, fast_config, fast_reference):
        price, weights, load, state = self.cheap_window_setup(
            feeder4, fast_config, fast_reference
        )
        sol1 = solve_stage2(feeder4, Fleet(shapeable=[load]), fast_reference,
                            price, state, 0, fast_config.horizon, weights)
        scaled = PriceSignal(3.0 * price.values)
        sol2 = solve_stage2(feeder4, Fleet(shapeable=[load]), fast_reference,
                            scaled, state, 0, fast_config.horizon, weights)
        u1 = np.array([sol1.u_shp["s1"][t] for t in sorted(sol1.u_shp["s1"])])
        u2 = np.array([sol2.u_shp["s1"][t] for t in sorted(sol2.u_shp["s1"])])
        assert np.allclose(u1, u2, atol=1e-5)

    def test_infeasible_raises_protocol_violation(self, feeder4, fast_config,
                                                  fast_reference):
        # target requires more than max-rate charging can deliver in the window
        load = shp_load(e_des=0.1, e_max=0.1, c_max=0.01, k_out=4)
        state = SystemState(e_bat=fast_reference.e_bat_hat[0].copy(),
                            e_shp={"s1": 0.0})
        report, sol = try_stage2(feeder4, Fleet(shapeable=[load]), fast_reference,
                                 fast_config.price, state, 0,
                                 fast_config.horizon, fast_config.weights)
        assert sol is None
        with pytest.raises(ProtocolViolation):
            solve_stage2(feeder4, Fleet(shapeable=[load]), fast_reference,
                         fast_config.price, state, 0,
                         fast_config.horizon, fast_config.weights)

    def test_first_step_controls_respect_bounds(self, feeder4, fast_config,
                                                 fast_reference, fast_state):
        sol = solve_stage2(feeder4, Fleet(), fast_reference, fast_config.price,
                           fast_state, 0, fast_config.horizon, fast_config.weights)
        for b in feeder4.buses:
            assert b.q_min - 1e-8 <= sol.q_g[0, b.id - 1] <= b.q_max + 1e-8
        for bk in feeder4.batteries:
            assert bk.p_min - 1e-8 <= sol.p_bat[0, bk.bus - 1] <= bk.p_max + 1e-8


class TestShiftedCandidate:
    def test_no_loads_candidate_matches_reference_tail(
        self, feeder4, fast_config, fast_reference, fast_state
    ):
        sol = solve_stage2(feeder4, Fleet(), fast_reference, fast_config.price,
                           fast_state, 0, fast_config.horizon, fast_config.weights)
        cand = construct_shifted_candidate(sol, fast_reference, Fleet(),
                                           feeder4, fast_config.horizon)
        s = fast_config.horizon.N
        assert np.allclose(cand.q_g[-1], fast_reference.q_at(s))
        assert np.allclose(cand.p_bat[-1], fast_reference.p_bat_at(s))

    def test_load_at_target_appends_zero_power(
        self, feeder4, fast_config, fast_reference
    ):
        load = shp_load(e=0.1, k_out=12)
        state = SystemState(e_bat=fast_reference.e_bat_hat[0].copy(),
                            e_shp={"s1": 0.1})
        fleet = Fleet(shapeable=[load])
        sol = solve_stage2(feeder4, fleet, fast_reference, fast_config.price,
                           state, 0, fast_config.horizon, fast_config.weights)
        cand = construct_shifted_candidate(sol, fast_reference, fleet,
                                           feeder4, fast_config.horizon)
        s = fast_config.horizon.N
        assert cand.u_shp["s1"][s] == pytest.approx(0.0, abs=1e-7)

    def test_candidate_feasible_over_closed_loop(
        self, feeder4, fast_config, fast_reference
    ):
        from gridshaper.assets import step_soc

        load = shp_load(k_out=10, e_des=0.08, e_max=0.1)
        fleet = Fleet(shapeable=[load])
        state = SystemState(e_bat=fast_reference.e_bat_hat[0].copy(),
                            e_shp={"s1": 0.0})
        dt = fast_config.horizon.dt_hours
        for k in range(4):
            sol = solve_stage2(feeder4, fleet, fast_reference, fast_config.price,
                               state, k, fast_config.horizon, fast_config.weights)
            cand = construct_shifted_candidate(sol, fast_reference, fleet,
                                               feeder4, fast_config.horizon)
            residual = verify_candidate(cand, feeder4, fleet, fast_reference,
                                        fast_config.horizon)
            assert residual <= 1e-6
            for bk in feeder4.batteries:
                i = bk.bus - 1
                state.e_bat[i] = step_soc(state.e_bat[i], sol.p_bat[0, i], 1.0, dt)
            state.e_shp["s1"] = step_soc(state.e_shp["s1"],
                                         sol.u_shp["s1"][k], load.eta, dt)
