"""Shared builders for the test-suite: tiny networks, a linear test device and
cached runs of the four presets (each full run costs tens of seconds)."""

from __future__ import annotations

import dataclasses
import functools
import time

import numpy as np

from mtsdyn.device import Device
from mtsdyn.engine import DeviceSpec, OutputSpec, Scenario, register_device_kind, run_scenario
from mtsdyn.events import Event
from mtsdyn.netmodel import Branch, Bus, NetworkModel
from mtsdyn.reduced_system import build_preset, without_slow_dynamics


class LinearDevice(Device):
    """dy/dt = A y, no electrical coupling. Lets the integrator and the
    linearization be checked against closed forms."""

    kind = "linear"
    generating = False

    def __init__(self, name, bus, a, y0):
        super().__init__(name, bus)
        self.a = np.array(a, dtype=float)
        self.y0 = [float(v) for v in y0]
        self.state_names = tuple(f"y{i}" for i in range(len(self.y0)))

    def derivatives(self, x, o, v):
        y = np.array(x[o:o + len(self.y0)])
        return (self.a @ y).tolist()

    def initialize(self, v, s):
        return list(self.y0)


def _linear_factory(spec: DeviceSpec) -> Device:
    p = spec.param_dict()
    return LinearDevice(spec.name, spec.bus, p["a"], p["y0"])


try:
    register_device_kind("linear", _linear_factory)
except ValueError:  # pragma: no cover - already registered
    pass


def single_bus_network() -> NetworkModel:
    return NetworkModel([Bus("N", kind="slack")], [], 100.0)


def linear_scenario(a, y0, dt=0.1, t_end=1.0) -> Scenario:
    a_rows = tuple(tuple(float(v) for v in row) for row in np.atleast_2d(a))
    devices = (
        DeviceSpec("source", "grid", "N", (("x_source", 0.01),)),
        DeviceSpec("linear", "lin", "N", (("a", a_rows), ("y0", tuple(float(v) for v in y0)))),
    )
    return Scenario(single_bus_network(), devices, dt=dt, t_end=t_end)


def two_bus_network(p_mw=100.0, q_mvar=50.0, x=0.1, tap=1.0) -> NetworkModel:
    return NetworkModel(
        [Bus("S", kind="slack"), Bus("R", kind="pq", p_load0=p_mw, q_load0=q_mvar)],
        [Branch("SR", "S", "R", x=x, tap_ratio=tap)],
        100.0,
    )


def two_bus_voltage(p, q, x):
    """Closed-form receiving-end magnitude of a lossless line fed from 1.0 pu.

    With V the receiving magnitude, |V|^4 + (2 q x - 1)|V|^2 + x^2 (p^2 + q^2) = 0;
    the high-voltage root is the operating point.
    """
    b = 2.0 * q * x - 1.0
    c = x * x * (p * p + q * q)
    disc = b * b - 4.0 * c
    if disc < 0:
        return None
    return float(np.sqrt((-b + np.sqrt(disc)) / 2.0))


MACHINE_PARAMS = (
    ("mva", 100.0), ("xd", 1.8), ("xq", 1.7), ("xd_p", 0.3), ("xq_p", 0.3), ("td0_p", 7.0),
    ("tq0_p", 0.7), ("h", 4.0), ("d", 2.0), ("ka", 50.0), ("ta", 0.5), ("efd_min", 0.0),
    ("efd_max", 10.0), ("oel_enabled", False),
)


def smib_scenario(p_mw=60.0, dt=0.01, t_end=2.0, trip_at=None, x_line=0.4, extra=()) -> Scenario:
    """Single machine feeding a stiff bus over two parallel lines."""
    net = NetworkModel(
        [Bus("N", kind="slack"), Bus("G", 20.0, "pv", 1.0, p_gen=p_mw)],
        [Branch("L1", "G", "N", x=x_line), Branch("L2", "G", "N", x=x_line)],
        100.0,
    )
    devices = (
        DeviceSpec("source", "grid", "N", (("x_source", 0.001),)),
        DeviceSpec("machine", "g", "G", MACHINE_PARAMS + tuple(extra)),
    )
    events = () if trip_at is None else (Event("branch_trip", trip_at, {"branch": "L2"}),)
    return Scenario(net, devices, events, dt=dt, t_end=t_end)


@functools.lru_cache(maxsize=None)
def preset_run(case: int):
    sc = build_preset(case)
    t0 = time.perf_counter()
    res = run_scenario(sc)
    res.stats["wall_s"] = time.perf_counter() - t0
    return sc, res


@functools.lru_cache(maxsize=None)
def no_slow_run():
    sc = without_slow_dynamics(build_preset(1))
    return sc, run_scenario(sc)


def quiet_preset(case: int = 1, t_end: float = 100.0) -> Scenario:
    """Preset network and devices with every disturbance removed."""
    sc = build_preset(case, t_end=t_end)
    outputs = dataclasses.replace(sc.outputs, eigen_scan=False)
    return dataclasses.replace(sc, events=(), cvr=None, outputs=outputs, name="quiet")


def mean_in(ts, channel, t0, t1):
    m = ts.window(t0, t1)
    return float(ts[channel][m].mean())


__all__ = [
    "LinearDevice", "linear_scenario", "two_bus_network", "two_bus_voltage", "smib_scenario",
    "preset_run", "no_slow_run", "quiet_preset", "mean_in", "OutputSpec",
]
