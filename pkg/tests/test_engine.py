import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsdyn.engine import (
    DeviceSpec,
    Scenario,
    ScenarioError,
    Simulation,
    run_scenario,
    simulate,
)
from mtsdyn.events import Event
from mtsdyn.kernel import CompiledSystem
from mtsdyn.machines import MachineInitError
from mtsdyn.netmodel import Branch, Bus, NetworkModel
from mtsdyn.reduced_system import build_preset

from support import linear_scenario, quiet_preset, smib_scenario


def test_trapezoid_single_step_closed_form():
    sim = Simulation(linear_scenario([[-1.0]], [1.0], dt=0.1))
    sim.step()
    assert sim.x[0] == pytest.approx((1 - 0.05) / (1 + 0.05), abs=1e-12)
    assert sim.x[0] == pytest.approx(0.904761, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50.0, -0.01), st.floats(0.001, 0.2))
def test_trapezoid_amplification_factor(lam, h):
    sim = Simulation(linear_scenario([[lam]], [1.0], dt=h))
    sim.step()
    z = 0.5 * h * lam
    assert sim.x[0] == pytest.approx((1 + z) / (1 - z), rel=1e-7, abs=1e-9)


def test_equilibrium_is_preserved_by_a_step():
    sim = Simulation(smib_scenario(60.0, dt=0.01), compiled=False)
    x0 = sim.x.copy()
    sim.step()
    np.testing.assert_allclose(sim.x, x0, atol=1e-12, rtol=0)


def test_initialized_preset_is_at_rest():
    for case in (1, 4):
        sim = Simulation(build_preset(case))
        assert float(np.max(np.abs(sim.fx))) < 1e-8


def test_quiet_preset_stays_flat():
    _, ts = simulate(quiet_preset(1, t_end=100.0))
    spread = np.ptp(ts.data, axis=0)
    worst = int(np.argmax(spread))
    assert spread[worst] < 1e-6, ts.names[worst]


def test_infeasible_dispatch_rejected():
    sc = smib_scenario(60.0, extra=(("efd_max", 1.0),))
    with pytest.raises(MachineInitError):
        Simulation(sc)


def test_heavy_load_collapses():
    sc = build_preset(1, t_end=200.0)
    net = sc.network.copy()
    d = next(b for b in net.buses if b.id == "D")
    d.p_load0 *= 1.6
    d.q_load0 *= 1.6
    res = run_scenario(dataclasses.replace(sc, network=net), eigen_scan=False)
    assert res.collapsed
    assert res.verdict in ("collapse", "s_lt1")


def test_tap_step_past_range_is_clamped():
    sc = build_preset(1, t_end=1.0)
    sim = Simulation(sc)
    c = sim.system.ltc("ltc_D")
    sim.system.ltcs[0].state = dataclasses.replace(c.state, tap=c.state.tap_min)
    sim.system.network.branch("MD").tap_ratio = c.state.tap_min
    sim.handle_event(Event("tap_step", 0.0, {"ltc": "ltc_D", "step": -1}))
    assert "result=clamped" in sim.journal[-1].payload
    assert sim.system.ltc("ltc_D").state.tap == c.state.tap_min


def test_branch_trip_changes_next_solve():
    sim = Simulation(build_preset(1, t_end=1.0))
    v_before = abs(sim.v[sim.system.network.bus_index("M")])
    sim.handle_event(Event("branch_trip", 0.0, {"branch": "NM2"}))
    assert not sim.system.network.branch("NM2").in_service
    _, v = sim.system.rhs(sim.x.tolist(), sim.v)
    assert abs(v[sim.system.network.bus_index("M")]) < v_before - 0.01


def _two_event_run(order):
    sc = build_preset(1, t_end=0.1, dt=0.01)
    evs = {
        "trip": Event("branch_trip", 0.05, {"branch": "NM2"}),
        "tap": Event("tap_step", 0.05, {"ltc": "ltc_D", "step": -1}),
    }
    sc = dataclasses.replace(sc, events=tuple(evs[k] for k in order), outputs=dataclasses.replace(sc.outputs, eigen_scan=False))
    sim, ts = simulate(sc)
    return [(e.time, e.kind) for e in sim.journal], ts.data


def test_simultaneous_events_follow_kind_priority():
    j1, d1 = _two_event_run(("trip", "tap"))
    j2, d2 = _two_event_run(("tap", "trip"))
    assert j1 == j2
    assert [k for _, k in j1] == ["branch_trip", "tap_step"]
    np.testing.assert_array_equal(d1, d2)


def test_compiled_and_python_rhs_agree():
    for case in (1, 4):
        sim = Simulation(build_preset(case))
        sim.handle_event(Event("branch_trip", 5.0, {"branch": "NM2"}))
        kern = CompiledSystem(sim.system)
        rng = np.random.default_rng(case)
        x = sim.x + 1e-3 * rng.standard_normal(len(sim.x))
        f_py, v_py = sim.system.rhs(x.tolist(), sim.v)
        f_k, v_k, ok = kern.rhs(x, np.array(sim.v), 1e-12)
        assert ok
        np.testing.assert_allclose(f_k, f_py, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(v_k, v_py, atol=1e-10)


def test_compiled_and_python_trajectories_agree():
    sc = build_preset(1, t_end=8.0)
    sc = dataclasses.replace(sc, outputs=dataclasses.replace(sc.outputs, eigen_scan=False))
    _, ts_fast = simulate(sc, sim=Simulation(sc, compiled=True))
    _, ts_slow = simulate(sc, sim=Simulation(sc, compiled=False))
    assert ts_fast.names == ts_slow.names
    np.testing.assert_allclose(ts_fast.data, ts_slow.data, atol=1e-6, rtol=0)


def test_scenario_validation():
    net = NetworkModel([Bus("N", kind="slack")], [], 100.0)
    with pytest.raises(ScenarioError):
        Scenario(net, (), dt=0.0)
    with pytest.raises(ScenarioError):
        Simulation(Scenario(net, (DeviceSpec("load", "ld", "N"),)))  # nothing voltage-stiff
    with pytest.raises(ScenarioError):
        Simulation(Scenario(net, (DeviceSpec("warp_drive", "w", "N"),)))


def test_pv_bus_without_generator_rejected():
    net = NetworkModel(
        [Bus("N", kind="slack"), Bus("G", kind="pv", p_gen=10.0)],
        [Branch("NG", "N", "G", x=0.1)],
        100.0,
    )
    with pytest.raises(ScenarioError):
        Simulation(Scenario(net, (DeviceSpec("source", "grid", "N"),)))
