"""Simulator: step arithmetic, chain oracle, conservation, statistics and configs."""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabreg.control import FixedTimeController, PressureController
from stabreg.errors import ConfigError
from stabreg.network import DemandSpec, build_network
from stabreg.scenarios import builtin
from stabreg.sfr import Predictor
from stabreg.simulate import (Ramp, Scenario, Simulator, Trace, delay_stats, position_weight,
                              queue_trend, ramp_from_config, run, scenario_from_config, stability_stats)


def make_trace(x, delays=(), interval_s=10.0, warmup=0):
    x = np.asarray(x, dtype=np.int64)
    T, M = x.shape
    d = np.asarray(delays, dtype=np.int64).reshape(-1, 2)
    z = np.zeros((T, M))
    return Trace(interval_s, np.zeros(M, dtype=np.int64), x, np.zeros(T, dtype=np.int64),
                 np.zeros((T, 1), dtype=np.int64), z.astype(np.int8), z, z, z.astype(bool),
                 z.astype(np.int64), d[:, 0], d[:, 1], warmup)


def one_way(arrivals_first=0):
    net = build_network(builtin("example1")["network"])
    sim = Simulator(net, finite_storage=False)
    st_ = sim.initial_state()
    rng = np.random.default_rng(0)
    if arrivals_first:
        sim.step(st_, [0, 0], [0, 0], [arrivals_first, 0], rng)
    return sim, st_, rng


class TestStepArithmetic:
    def test_service_limited(self):
        sim, s, rng = one_way(5)
        dep = np.zeros(2, dtype=np.int64)
        sim.step(s, [1, 0], [3, 0], [0, 0], rng, departures=dep)
        assert dep[0] == 3 and s.x[0] == 2

    def test_queue_limited(self):
        sim, s, rng = one_way(2)
        dep = np.zeros(2, dtype=np.int64)
        sim.step(s, [1, 0], [3, 0], [0, 0], rng, departures=dep)
        assert dep[0] == 2 and s.x[0] == 0

    def test_red_serves_nothing(self):
        sim, s, rng = one_way(4)
        sim.step(s, [0, 1], [3, 3], [0, 0], rng)
        assert s.x[0] == 4

    def test_arrivals_wait_one_interval(self):
        sim, s, rng = one_way()
        dep = np.zeros(2, dtype=np.int64)
        sim.step(s, [1, 0], [3, 0], [2, 0], rng, departures=dep)
        assert dep[0] == 0 and s.x[0] == 2

    def test_fractional_rate_carry(self):
        sim, s, rng = one_way(100)
        served = 0
        for _ in range(10):
            dep = np.zeros(2, dtype=np.int64)
            sim.step(s, [1, 0], [1.7, 0], [0, 0], rng, departures=dep)
            served += dep[0]
        assert served == 17

    def test_negative_arrivals_abort(self):
        sim, s, rng = one_way()
        with pytest.raises(ValueError):
            sim.step(s, [0, 0], [0, 0], [-1, 0], rng)

    def test_split_feeds_downstream(self, chain):
        # movement 1 discharges 4, half are routed to movement 2, which also receives a_2 = 1
        net = build_network(chain["network"])
        sim = Simulator(net, finite_storage=False, routing="deterministic")
        s = sim.initial_state()
        rng = np.random.default_rng(0)
        sim.step(s, [0, 0, 0], [4, 4, 4], [4, 0, 0], rng)
        sim.step(s, [1, 0, 0], [4, 4, 4], [0, 1, 0], rng)
        np.testing.assert_array_equal(s.x, [0, 3, 0])


def chain_oracle(T, a=(3, 1, 0), s=4):
    """Hand recursion for the chain: every movement green, r = 0.5 splits.

    Smooth round robin with r = 0.5 forwards the 1st, 3rd, 5th ... vehicle,
    so after D departures ceil(D / 2) have been forwarded.
    """
    x = np.zeros(3, dtype=int)
    cum = np.zeros(3, dtype=int)
    out = []
    for _ in range(T):
        q = np.minimum(x, s)
        fwd = [math.ceil((cum[i] + q[i]) / 2) - math.ceil(cum[i] / 2) for i in range(3)]
        cum += q
        x = x - q + np.array(a)
        x[1] += fwd[0]
        x[2] += fwd[1]
        out.append(x.copy())
    return np.array(out)


class TestChainOracle:
    def test_hand_rows(self):
        # worked by hand: x1 serves its 3 arrivals each interval and forwards 2, 1, 2, 1, ...
        np.testing.assert_array_equal(chain_oracle(5), [
            [3, 1, 0],
            [3, 3, 1],
            [3, 2, 1],
            [3, 3, 1],
            [3, 2, 2],
        ])

    def test_twenty_intervals_exact(self, chain):
        chain["demand"]["arrivals"] = "deterministic"
        chain["simulation"] = {"horizon": 20, "routing": "deterministic", "storage": "infinite"}
        scn = scenario_from_config(chain, seed=0)
        tr = run(scn, FixedTimeController(), warmup=0)
        np.testing.assert_array_equal(tr.x, chain_oracle(20))
        assert np.all(tr.phi == 1)


def ex4_scenario(horizon=400, seed=0, scale=1.0, storage=True, theta=0.5, arrivals="poisson"):
    doc = builtin("example4")
    doc["predictor"] = {"theta": theta}
    doc["demand"]["a"] = [v * scale for v in doc["demand"]["a"]]
    doc["demand"]["arrivals"] = arrivals
    doc["simulation"] = {"horizon": horizon, "storage": "finite" if storage else "infinite"}
    return scenario_from_config(doc, seed=seed)


class TestInvariants:
    @pytest.mark.parametrize("routing", ["random", "deterministic"])
    def test_conservation_and_storage(self, routing):
        scn = ex4_scenario(scale=1.6)
        sim = Simulator(scn.net, True, routing=routing)
        ctrl = PressureController("bp")
        rng = np.random.default_rng(1)
        ctrl.bind(scn.net, sim, rng)
        state = sim.initial_state()
        from stabreg.simulate import ControlView
        saw_stack = False
        for t in range(600):
            s = np.full(8, 3.0)
            x0 = state.x
            phi = ctrl.passing(ctrl.decide(ControlView(t, x0, s, np.ones(8, bool))))
            dep = np.zeros(8, dtype=np.int64)
            sim.step(state, phi, s, rng.poisson(scn.rates(t)), rng, departures=dep)
            assert state.entered == state.in_network() + state.stacked_total + state.exited
            assert np.all(dep <= np.minimum(x0, 3 * phi))
            assert all(o <= c for o, c in zip(state.link_occupancy, sim.storage))
            for i, stk in enumerate(state.stacked):
                if stk:
                    saw_stack = True
                    link = sim.origin[i]
                    assert state.link_occupancy[link] == sim.storage[link]
        assert saw_stack

    def test_deterministic_replay(self):
        scn = ex4_scenario(horizon=300, seed=42)
        a = run(scn, PressureController("pwbp"))
        b = run(scn, PressureController("pwbp"))
        for f in ("x", "stacked", "phases", "s_true", "s_hat", "delay_intervals"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_seed_changes_trace(self):
        a = run(ex4_scenario(horizon=200, seed=1), PressureController())
        b = run(ex4_scenario(horizon=200, seed=2), PressureController())
        assert not np.array_equal(a.x, b.x)

    def test_zero_demand_stays_empty(self):
        scn = ex4_scenario(horizon=200, scale=0.0)
        for ctrl in (PressureController(), FixedTimeController()):
            tr = run(scn, ctrl)
            assert tr.x.sum() == 0 and tr.delay_node.size == 0

    def test_trace_lengths_and_delays(self):
        tr = run(ex4_scenario(horizon=250), PressureController())
        assert tr.horizon == 250 and tr.s_hat.shape == (250, 8) and tr.stacked.shape == (250,)
        assert np.all(tr.delay_intervals >= 0)

    def test_overload_grows(self):
        doc = builtin("example1")
        doc["demand"]["a"] = [2.0, 2.0]
        doc["simulation"] = {"horizon": 2000, "storage": "infinite"}
        tr = run(scenario_from_config(doc, seed=3), PressureController())
        rate, _ = stability_stats(tr)
        assert rate > 0.2

    def test_stop_on_stacked(self):
        scn = replace(ex4_scenario(horizon=5000, scale=2.0), pred=Predictor(0.0))
        tr = run(scn, PressureController(), stop_stacked=30)
        assert tr.stopped_early and tr.stacked[-1] > 30 and tr.horizon < 5000


class TestStatistics:
    def test_all_zero(self):
        assert stability_stats(make_trace(np.zeros((200, 3)))) == (0.0, 0.0)

    def test_linear_growth(self):
        T = 500
        x = np.zeros((T, 2))
        x[:, 1] = np.arange(1, T + 1)
        rate, strong = stability_stats(make_trace(x))
        assert rate == 1.0
        assert strong == pytest.approx((T + 1) / 2)

    def test_trend_of_flat_and_rising(self):
        flat = make_trace(np.full((400, 1), 7))
        assert queue_trend(flat) == pytest.approx((0.0, 7.0))
        slope, _ = queue_trend(make_trace(np.arange(400)[:, None]))
        assert slope == pytest.approx(1.0)

    def test_delay_zero_when_served_on_arrival(self):
        _, overall = delay_stats(make_trace(np.zeros((10, 1)), [(0, 0)] * 5))
        assert overall == 0.0

    def test_delay_three_intervals(self):
        per_node, overall = delay_stats(make_trace(np.zeros((10, 1)), [(0, 3)]))
        assert overall == 30.0 and per_node[0] == 30.0

    def test_delay_end_to_end(self):
        sim, s, rng = one_way()
        delays = []
        sim.step(s, [0, 0], [0, 0], [1, 0], rng, delays)      # joins at t = 1
        for _ in range(3):
            sim.step(s, [0, 1], [3, 3], [0, 0], rng, delays)  # red for three intervals
        sim.step(s, [1, 0], [3, 3], [0, 0], rng, delays)
        assert delays == [(0, 3)]

    def test_unfinished_vehicles_keep_accrued_delay(self):
        # zero saturation flow: one vehicle joins per interval from t = 1 and none is served
        doc = builtin("example1")
        doc["sfr"] = [{"movement_id": m, "support": [0], "probs": [1]} for m in (1, 2)]
        doc["demand"].update(a=[1.0, 0.0], arrivals="deterministic")
        doc["simulation"] = {"horizon": 5, "storage": "infinite"}
        tr = run(scenario_from_config(doc), PressureController(), warmup=0)
        assert tr.unfinished == 5
        np.testing.assert_array_equal(np.sort(tr.delay_intervals), [0, 1, 2, 3, 4])
        assert delay_stats(tr)[1] == pytest.approx(20.0)

    def test_per_node_weighting(self):
        tr = make_trace(np.zeros((5, 2)), [(0, 1), (0, 3), (1, 5)])
        tr.node_of = np.array([0, 1])
        per_node, overall = delay_stats(tr, 2)
        np.testing.assert_allclose(per_node, [20.0, 50.0])
        assert overall == pytest.approx(30.0)


class TestPositionWeight:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 200), st.integers(1, 3), st.floats(20, 500), st.floats(3, 10))
    def test_matches_vehicle_loop(self, n, lanes, length, jam):
        ref = sum(max(0.0, length - (k // lanes) * jam) / length for k in range(n))
        assert position_weight(n, lanes, length, jam) == pytest.approx(ref, rel=1e-9, abs=1e-9)

    def test_single_vehicle_at_stop_line(self):
        assert position_weight(1, 1, 350.0) == 1.0

    def test_short_queue_close_to_count(self):
        # packed from the stop line the weights decay by jam / length per cell
        assert position_weight(3, 1, 700.0, 7.0) == pytest.approx(1 + 0.99 + 0.98)


class TestScenarioConfig:
    def test_defaults(self):
        doc = builtin("example4")
        scn = scenario_from_config(doc, seed=5)
        assert scn.seed == 5 and scn.pred.theta == 0.0 and scn.horizon == 1000
        assert scn.finite_storage and scn.routing == "random"

    @pytest.mark.parametrize("patch", [
        {"simulation": {"horizon": 0}},
        {"simulation": {"routing": "teleport"}},
        {"demand": {"a": [1, 2], "arrivals": "bursty"}},
        {"demand": {"a": [1, 2, 3]}},
        {"predictor": {"theta": 2}},
    ])
    def test_rejects(self, patch):
        doc = builtin("example1")
        doc.update(patch)
        with pytest.raises(ConfigError):
            scenario_from_config(doc)

    def test_missing_block(self):
        doc = builtin("example1")
        del doc["sfr"]
        with pytest.raises(ConfigError):
            scenario_from_config(doc)

    def test_profile_interpolation(self):
        doc = builtin("example1")
        doc["demand"]["profile"] = [[0, 0.5], [100, 1.5]]
        scn = scenario_from_config(doc)
        np.testing.assert_allclose(scn.rates(0), [0.5, 0.25])
        np.testing.assert_allclose(scn.rates(5), [1.0, 0.5])
        np.testing.assert_allclose(scn.rates(50), [1.5, 0.75])

    def test_ramp_boundary_only(self, ex4):
        _, net, _, _ = ex4
        ramp = ramp_from_config({"increment_veh_h": 36, "period_s": 60}, net, 10.0)
        assert ramp.period == 6 and ramp.increment == pytest.approx(0.1)
        np.testing.assert_array_equal(ramp.mask, [1, 1, 0, 0, 1, 1, 0, 0])
        np.testing.assert_allclose(ramp.offset(13), 0.2 * ramp.mask)

    def test_ramp_all(self, ex4):
        _, net, _, _ = ex4
        assert ramp_from_config({"movements": "all"}, net, 10.0).mask.all()

    @pytest.mark.parametrize("block", [{"increment_veh_h": 0}, {"period_s": -1}, {"movements": "some"}])
    def test_ramp_rejects(self, ex4, block):
        _, net, _, _ = ex4
        with pytest.raises(ConfigError):
            ramp_from_config(block, net, 10.0)

    def test_deterministic_arrivals_carry(self):
        doc = builtin("example1")
        doc["demand"]["arrivals"] = "deterministic"
        doc["simulation"] = {"horizon": 10, "storage": "infinite"}
        scn = scenario_from_config(doc)
        tr = run(scn, FixedTimeController(default_green=100), warmup=0)
        assert tr.x[-1, 1] == 5  # 0.5 per interval, never served

    def test_scenario_validation(self, ex1):
        _, net, model, _ = ex1
        with pytest.raises(ConfigError):
            Scenario(net, model, Predictor(0.0), DemandSpec(np.ones(2)), horizon=10, profile=((5, 1), (0, 1)))
        with pytest.raises(ConfigError):
            Scenario(net, model, Predictor(0.0), DemandSpec(np.ones(2)), horizon=10, jam_spacing_m=0)

    def test_ramp_dataclass(self):
        r = Ramp(0.5, 3, np.array([True, False]))
        np.testing.assert_allclose(r.offset(7), [1.0, 0.0])
