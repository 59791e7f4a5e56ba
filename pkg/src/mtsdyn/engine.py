"""
Time-domain simulation of the hybrid system.

Continuous device states are integrated with the implicit trapezoidal rule;
the algebraic network is re-solved at every function evaluation, so each
Newton iterate is consistent with Kirchhoff's laws. Discrete changes (taps,
limiter takeover, breaker operations, set-point changes) happen only at step
boundaries, in a fixed order.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .device import Device
from .events import Event, JournalEntry, format_payload
from .ibr_gfl import GflParams, GridFollowingIBR
from .ibr_gfm import GfmParams, GridFormingIBR
from .kernel import STEP_OK, CompiledSystem
from .machines import InfiniteSource, MachineParams, SynchronousMachine
from .netmodel import (
    NetworkError,
    NetworkModel,
    NetworkSolveError,
    NortonNetwork,
    apply_branch_event,
    build_admittance,
    solve_power_flow,
)
from .slowdyn import CvrController, ExponentialLoad, LtcState, cvr_apply, ltc_update

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 20
# Tighter than the Newton tolerance so network round-off does not stall it.
NETWORK_TOL = 1e-11
V_COLLAPSE = 0.3
OMEGA_LIMIT = 0.1


class ScenarioError(Exception):
    """Scenario description is inconsistent or cannot be initialized."""


class CollapseError(Exception):
    def __init__(self, message: str, kind: str = "solve"):
        super().__init__(message)
        self.kind = kind  # "solve": algebraic/Newton failure, "divergence": states left bounds


# ----------------------------------------------------------------------------
# Scenario description (immutable)


@dataclass(frozen=True)
class DeviceSpec:
    kind: str
    name: str
    bus: str
    params: tuple[tuple[str, Any], ...] = ()

    def param_dict(self) -> dict[str, Any]:
        return dict(self.params)


@dataclass(frozen=True)
class LtcSpec:
    name: str
    branch: str
    params: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class OutputSpec:
    channels: tuple[str, ...] | None = None  # None: everything
    phase_pairs: tuple[tuple[str, str], ...] = ()
    phase_window: float = 1.0
    annotation: str = "zone_load_MW"
    eigen_scan: bool = False
    scan_interval: float = 5.0
    stride: int = 1


@dataclass(frozen=True)
class Scenario:
    network: NetworkModel
    devices: tuple[DeviceSpec, ...]
    events: tuple[Event, ...] = ()
    ltcs: tuple[LtcSpec, ...] = ()
    cvr: CvrController | None = None
    dt: float = 0.002
    t_end: float = 10.0
    outputs: OutputSpec = OutputSpec()
    preset: int | None = None
    name: str = "scenario"

    def __post_init__(self):
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if not self.t_end > 0:
            raise ScenarioError("t_end must be positive")
        if self.outputs.stride < 1:
            raise ScenarioError("output stride must be at least 1")
        if self.preset is not None and self.preset not in (1, 2, 3, 4):
            raise ScenarioError(f"unknown preset tag {self.preset}")

    def with_overrides(self, **kw) -> "Scenario":
        return dataclasses.replace(self, **kw)


DEVICE_KINDS = ("machine", "source", "gfl", "gfm", "load")

# Extra device kinds, e.g. hand-written linear systems in tests. They always
# run on the Python path because the compiled kernel only packs built-ins.
_EXTRA_KINDS: dict[str, Callable[[DeviceSpec], Device]] = {}


def register_device_kind(kind: str, factory: Callable[[DeviceSpec], Device]) -> None:
    if kind in DEVICE_KINDS:
        raise ValueError(f"{kind!r} is a built-in device kind")
    _EXTRA_KINDS[kind] = factory


def build_device(spec: DeviceSpec) -> Device:
    p = spec.param_dict()
    if spec.kind in _EXTRA_KINDS:
        return _EXTRA_KINDS[spec.kind](spec)
    try:
        if spec.kind == "machine":
            return SynchronousMachine(spec.name, spec.bus, MachineParams(**p))
        if spec.kind == "gfl":
            return GridFollowingIBR(spec.name, spec.bus, GflParams(**p))
        if spec.kind == "gfm":
            return GridFormingIBR(spec.name, spec.bus, GfmParams(**p))
        if spec.kind == "source":
            return InfiniteSource(spec.name, spec.bus, **p)
        if spec.kind == "load":
            return ExponentialLoad(spec.name, spec.bus, **p)
    except TypeError as exc:
        raise ScenarioError(f"device {spec.name}: {exc}") from exc
    raise ScenarioError(f"device {spec.name}: unknown kind {spec.kind!r}")


# ----------------------------------------------------------------------------
# Runtime records


@dataclass
class SimulationState:
    t: float
    continuous: np.ndarray
    discrete: dict[str, Any]
    bus_voltages: np.ndarray


class TimeSeries:
    """Sampled trajectory; ``ts["name"]`` returns one channel as an array."""

    def __init__(self, names: list[str]):
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        self.names = list(names)
        self._index = {n: i for i, n in enumerate(self.names)}
        self._rows: list[list[float]] = []
        self._t: list[float] = []
        self._cache: np.ndarray | None = None

    def append(self, t: float, row: list[float]) -> None:
        self._t.append(t)
        self._rows.append(row)
        self._cache = None

    @property
    def t(self) -> np.ndarray:
        return np.array(self._t)

    @property
    def data(self) -> np.ndarray:
        if self._cache is None:
            self._cache = np.array(self._rows, dtype=float).reshape(len(self._rows), len(self.names))
        return self._cache

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._index:
            raise KeyError(f"unknown channel {name!r}")
        return self.data[:, self._index[name]]

    def __len__(self) -> int:
        return len(self._t)

    def window(self, t0: float, t1: float) -> np.ndarray:
        t = self.t
        return (t >= t0 - 1e-9) & (t <= t1 + 1e-9)

    def select(self, names: list[str]) -> "TimeSeries":
        out = TimeSeries(names)
        idx = [self._index[n] for n in names]
        for t, row in zip(self._t, self._rows):
            out.append(t, [row[i] for i in idx])
        return out


LTC_MEAS_T = 5.0  # s, voltage transducer lag of the tap changer


class LtcController:
    """Tap-changer logic bound to a branch. The controlled voltage passes
    through a first-order transducer lag so that a fast oscillation riding
    on the distribution voltage does not keep re-entering the deadband and
    resetting the timer."""

    def __init__(self, name: str, branch: str, bus: int, state: LtcState, t_meas: float = LTC_MEAS_T):
        if t_meas < 0:
            raise ValueError("t_meas must be non-negative")
        self.name = name
        self.branch = branch
        self.bus = bus
        self.state = state
        self.t_meas = t_meas
        self.v_meas: float | None = None

    def measure(self, v: float, dt: float) -> float:
        if self.v_meas is None or self.t_meas == 0:
            self.v_meas = v
        else:
            self.v_meas += (v - self.v_meas) * min(dt / self.t_meas, 1.0)
        return self.v_meas


# ----------------------------------------------------------------------------
# Assembled system


class System:
    """Devices bound to a network, with the algebraic solve and the full
    right-hand side ``f(x)`` for the current discrete configuration."""

    def __init__(self, network: NetworkModel, devices: list[Device], ltcs: list[LtcController] | None = None):
        self.network = network.copy()
        self.devices = devices
        self.ltcs = ltcs or []
        self.offsets: list[int] = []
        n = 0
        for d in devices:
            d.bind(self.network.bus_index(d.bus), self.network.base_mva)
            self.offsets.append(n)
            n += d.n_states
        self.n_states = n
        self.n_bus = self.network.n_bus
        self._const = [(d, o) for d, o in zip(devices, self.offsets) if not d.voltage_dependent]
        self._dep = [(d, o) for d, o in zip(devices, self.offsets) if d.voltage_dependent]
        self._dep_buses = sorted({d.k for d, _ in self._dep})
        self._dyn = [(d, o) for d, o in zip(devices, self.offsets) if d.n_states]
        self._solver: NortonNetwork | None = None
        self.state_labels = [f"{d.name}.{s}" for d in devices for s in d.state_names]
        if not any(d.voltage_stiff for d in devices):
            raise ScenarioError("no voltage-stiff device in the network")

    def invalidate(self) -> None:
        self._solver = None

    @property
    def solver(self) -> NortonNetwork:
        if self._solver is None:
            ybus = build_admittance(self.network).matrix
            shunts = [(d.k, d.norton_admittance()) for d in self.devices]
            self._solver = NortonNetwork(ybus, shunts)
        return self._solver

    def voltages(self, x, v_guess=None) -> list[complex]:
        """Bus voltages consistent with states ``x`` (a list)."""
        cur = [0j] * self.n_bus
        for d, o in self._const:
            cur[d.k] += d.source_current(x, o, 0j)
        if not self._dep:
            return self.solver.solve_linear(cur)
        dep = self._dep

        def dependent(v):
            return [(d.k, d.source_current(x, o, v[d.k])) for d, o in dep]

        def sensitivity(v):
            return [(d.k, *d.current_sensitivity(x, o, v[d.k])) for d, o in dep]

        return self.solver.solve_newton(cur, self._dep_buses, dependent, sensitivity, v_guess, NETWORK_TOL, 30)

    def rhs(self, x, v_guess=None) -> tuple[list[float], list[complex]]:
        v = self.voltages(x, v_guess)
        out: list[float] = []
        for d, o in self._dyn:
            out.extend(d.derivatives(x, o, v[d.k]))
        return out, v

    def f(self, x: np.ndarray, v_guess=None) -> np.ndarray:
        return np.array(self.rhs(list(x), v_guess)[0])

    def jacobian(self, x: np.ndarray, v_guess=None, rel: float = 1e-6, floor: float = 1e-8,
                 central: bool = True) -> np.ndarray:
        n = self.n_states
        J = np.empty((n, n))
        xl = list(map(float, x))
        f0 = None if central else np.array(self.rhs(xl, v_guess)[0])
        for i in range(n):
            h = max(rel * abs(xl[i]), floor)
            xp = xl[:]
            xp[i] += h
            fp = np.array(self.rhs(xp, v_guess)[0])
            if central:
                xm = xl[:]
                xm[i] -= h
                fm = np.array(self.rhs(xm, v_guess)[0])
                J[:, i] = (fp - fm) / (2 * h)
            else:
                J[:, i] = (fp - f0) / h
        return J

    def discrete_signature(self) -> tuple:
        taps = tuple(br.tap_ratio for br in self.network.branches)
        status = tuple(br.in_service for br in self.network.branches)
        return taps, status, tuple(d.discrete_signature() for d in self.devices)

    def device(self, name: str) -> Device:
        for d in self.devices:
            if d.name == name:
                return d
        raise KeyError(f"unknown device {name!r}")

    def ltc(self, name: str) -> LtcController:
        for c in self.ltcs:
            if c.name == name:
                return c
        raise KeyError(f"unknown LTC {name!r}")

    # derived quantities -----------------------------------------------------

    def loads(self) -> list[ExponentialLoad]:
        return [d for d in self.devices if isinstance(d, ExponentialLoad)]

    def power_balance(self, x, v) -> float:
        """|sum of device injections - power absorbed by the network| in pu."""
        s_dev = sum(d.power(x, o, v[d.k]) for d, o in zip(self.devices, self.offsets))
        ybus = build_admittance(self.network).matrix
        va = np.array(v)
        s_net = complex(np.sum(va * np.conj(ybus @ va)))
        return abs(s_dev - s_net)


def assemble(scenario: Scenario) -> System:
    devices = [build_device(s) for s in scenario.devices]
    names = [d.name for d in devices]
    if len(set(names)) != len(names):
        raise ScenarioError("duplicate device name")
    net = scenario.network
    for d in devices:
        try:
            net.bus_index(d.bus)
        except NetworkError as exc:
            raise ScenarioError(f"device {d.name}: {exc}") from exc
    load_buses = {d.bus for d in devices if isinstance(d, ExponentialLoad)}
    for b in net.buses:
        if (b.p_load0 or b.q_load0) and b.id not in load_buses:
            devices.append(ExponentialLoad(f"load_{b.id}", b.id))
    ltcs = []
    for spec in scenario.ltcs:
        try:
            br = net.branch(spec.branch)
        except NetworkError as exc:
            raise ScenarioError(f"LTC {spec.name}: {exc}") from exc
        params = dict(spec.params)
        t_meas = float(params.pop("t_meas", LTC_MEAS_T))
        unknown = set(params) - {f.name for f in dataclasses.fields(LtcState)} | ({"tap", "timer", "armed"} & set(params))
        if unknown:
            raise ScenarioError(f"LTC {spec.name}: unsupported parameters {sorted(unknown)}")
        state = LtcState(tap=br.tap_ratio, **params)
        try:
            ltcs.append(LtcController(spec.name, spec.branch, net.bus_index(br.to_bus), state, t_meas))
        except ValueError as exc:
            raise ScenarioError(f"LTC {spec.name}: {exc}") from exc
    return System(net, devices, ltcs)


# ----------------------------------------------------------------------------
# Simulation


class Simulation:
    """Mutable run state: time, states, voltages, discrete configuration and journal."""

    def __init__(self, scenario: Scenario, compiled: bool | None = None):
        self.scenario = scenario
        self.system = assemble(scenario)
        if compiled is None:
            compiled = os.environ.get("MTSDYN_PURE_PYTHON", "") in ("", "0")
        self._kernel: CompiledSystem | None = None
        self._kernel_stale = False
        self.dt = scenario.dt
        self.step_count = 0
        self.t = 0.0
        self.journal: list[JournalEntry] = []
        self.cvr = scenario.cvr
        self.collapsed = False
        self.collapse_reason = ""
        self.collapse_kind = ""
        pending = [dataclasses.replace(e, seq=i) for i, e in enumerate(scenario.events)]
        if self.cvr is not None and self.cvr.mode == "timed":
            pending.append(Event("cvr_activate", self.cvr.t_activate,
                                 {"delta": self.cvr.delta_setpoint}, seq=len(pending)))
        self.pending = sorted(pending, key=Event.sort_key)
        self._jinv: np.ndarray | None = None
        self._jac_key: tuple | None = None
        self._signature: tuple = ()
        self._f_prev: np.ndarray | None = None
        self._f_prev_key: tuple | None = None
        self.newton_iterations = 0
        self.jacobian_updates = 0
        self.last_events: list[Event] = []
        self._initialize()
        self._signature = self.system.discrete_signature()
        # packed after initialization, which fixes references and source emfs
        if compiled and self.system.n_states and CompiledSystem.supports(self.system):
            self._kernel = CompiledSystem(self.system)

    # -- initialization ------------------------------------------------------

    def _initialize(self) -> None:
        sysm = self.system
        net = sysm.network
        flow = solve_power_flow(net)
        v = flow.v
        base = net.base_mva
        gens: dict[int, Device] = {}
        for d in sysm.devices:
            if d.generating:
                if d.k in gens:
                    raise ScenarioError(f"bus {d.bus} has more than one generating device")
                gens[d.k] = d
        for i, b in enumerate(net.buses):
            if b.kind in ("slack", "pv") and i not in gens:
                raise ScenarioError(f"bus {b.id} is {b.kind} but has no generating device")
            if i not in gens and (b.p_gen or b.q_gen):
                raise ScenarioError(f"bus {b.id} schedules generation but has no generating device")

        x: list[float] = []
        for d in sysm.devices:
            vk = complex(v[d.k])
            bus = net.buses[d.k]
            if d.generating:
                s = complex(flow.p_inj[d.k], flow.q_inj[d.k]) + complex(bus.p_load0, bus.q_load0) / base
            else:
                s = complex(bus.p_load0, bus.q_load0) / base
            try:
                x.extend(d.initialize(vk, s))
            except ValueError as exc:
                raise ScenarioError(str(exc)) from exc
        self.x = np.array(x, dtype=float)
        self.v = sysm.voltages(list(self.x), v.tolist())
        for c in sysm.ltcs:
            c.v_meas = abs(self.v[c.bus])
        self.fx = np.array(sysm.rhs(list(self.x), self.v)[0])

    @property
    def state(self) -> SimulationState:
        sysm = self.system
        discrete = {
            "taps": {c.name: c.state.tap for c in sysm.ltcs},
            "oel": {d.name: d.oel.status for d in sysm.devices if isinstance(d, SynchronousMachine)},
            "cvr_applied": bool(self.cvr and self.cvr.applied),
            "branches": {br.id: br.in_service for br in sysm.network.branches},
        }
        return SimulationState(self.t, self.x.copy(), discrete, np.array(self.v))

    # -- continuous step -----------------------------------------------------

    def _refresh_jacobian(self, x: np.ndarray, h: float) -> None:
        if self._kernel is not None:
            jinv, ok = self._kernel.iteration_inverse(x, np.array(self.v), NETWORK_TOL, h)
            if not ok:
                raise NetworkSolveError("network solve failed while forming the Jacobian")
            self._jinv = jinv
        else:
            A = self.system.jacobian(x, self.v, central=False)
            n = len(x)
            self._jinv = np.linalg.inv(np.eye(n) - 0.5 * h * A)
        self._jac_key = (h, self._signature)
        self.jacobian_updates += 1

    def _compiled_trapezoid(self, x0, f0, v0, h, prev, fresh):
        status, x, f, v, iters = self._kernel.step(
            x0, f0, np.array(v0), h, self._jinv, prev, prev is not None, fresh,
            NEWTON_TOL, NEWTON_MAX_ITER, 6, NETWORK_TOL)
        self.newton_iterations += iters
        if status == STEP_OK:
            return x, f, v.tolist()
        return None

    def _broyden_update(self, s: np.ndarray, y: np.ndarray) -> None:
        """Rank-one secant correction of the stored inverse iteration matrix,
        so it follows the Jacobian along an oscillating trajectory."""
        if float(np.max(np.abs(s))) < 1e-11:
            return
        hy = self._jinv @ y
        sh = s @ self._jinv
        denom = float(sh @ y)
        if abs(denom) < 1e-14 * float(np.dot(s, s)) ** 0.5 * float(np.dot(y, y)) ** 0.5 or denom == 0.0:
            return
        self._jinv += np.outer(s - hy, sh) / denom

    def _trapezoid(self, x0: np.ndarray, f0: np.ndarray, v0: list[complex], h: float):
        """One trapezoidal step; returns (x1, f1, v1) or None when Newton fails.

        The returned derivative is the one evaluated at the last iterate,
        which sits within the Newton tolerance of the accepted state.
        """
        sysm = self.system
        if self.system.n_states == 0:
            return x0, f0, sysm.voltages([], v0)
        key = (h, self._signature)
        fresh = False
        if self._kernel is not None and self._kernel_stale:
            self._kernel.refresh()
            self._kernel_stale = False
        if self._jac_key != key:
            self._refresh_jacobian(x0, h)
            fresh = True
        # second-order extrapolation when the previous derivative belongs to
        # the same step size and configuration, explicit Euler otherwise
        prev = self._f_prev if (fresh is False and self._f_prev_key == key) else None
        for attempt in range(2):
            if self._kernel is not None:
                res = self._compiled_trapezoid(x0, f0, v0, h, prev, fresh)
                if res is not None:
                    return res
                if fresh:
                    return None
                self._refresh_jacobian(x0, h)
                fresh = True
                continue
            x = x0 + h * f0 if prev is None else x0 + h * (1.5 * f0 - 0.5 * prev)
            v = v0
            base = x0 + 0.5 * h * f0
            ok = False
            r_prev = None
            try:
                for it in range(NEWTON_MAX_ITER):
                    fl, v = sysm.rhs(x.tolist(), v)
                    f = np.array(fl)
                    r = x - base - 0.5 * h * f
                    if r_prev is not None:
                        self._broyden_update(-dx, r - r_prev)
                    dx = self._jinv @ r
                    r_prev = r
                    x = x - dx
                    self.newton_iterations += 1
                    err = float(np.max(np.abs(dx)))
                    if not math.isfinite(err) or err > 1e3:
                        break
                    if err < NEWTON_TOL:
                        ok = True
                        f_last = f
                        break
                    if it >= 6 and not fresh:
                        break
            except NetworkSolveError:
                ok = False
            if ok:
                return x, f_last, v
            if fresh:
                return None
            self._refresh_jacobian(x0, h)
            fresh = True
        return None

    def _advance(self, h: float) -> None:
        f_start = self.fx
        res = self._trapezoid(self.x, self.fx, self.v, h)
        if res is None:
            self._f_prev = None
            half = 0.5 * h
            res = self._trapezoid(self.x, self.fx, self.v, half)
            if res is not None:
                res = self._trapezoid(res[0], res[1], res[2], half)
            if res is None:
                raise CollapseError("Newton iteration failed at dt and dt/2")
            self._f_prev = None
        else:
            self._f_prev = f_start
            self._f_prev_key = (h, self._signature)
        self.x, self.fx, self.v = res

    def _check_bounds(self) -> None:
        vmin = min(abs(u) for u in self.v)
        if vmin < V_COLLAPSE:
            raise CollapseError(f"bus voltage fell to {vmin:.3f} pu", "divergence")
        for d, o in zip(self.system.devices, self.system.offsets):
            if isinstance(d, SynchronousMachine) and abs(self.x[o + 1]) > OMEGA_LIMIT:
                raise CollapseError(f"{d.name} lost synchronism", "divergence")

    # -- discrete layer ------------------------------------------------------

    def handle_event(self, event: Event) -> None:
        """Apply one event to the discrete configuration and journal it."""
        sysm = self.system
        payload = dict(event.payload)
        if event.kind == "branch_trip":
            br_id = payload["branch"]
            in_service = bool(payload.get("in_service", False))
            try:
                br = sysm.network.branch(br_id)
            except NetworkError as exc:
                raise ScenarioError(str(exc)) from exc
            if br.in_service != in_service:
                sysm.network = apply_branch_event(sysm.network, br_id, in_service)
                sysm.invalidate()
        elif event.kind == "tap_step":
            c = sysm.ltc(payload["ltc"])
            if "to" in payload:
                target = payload["to"]
            else:
                step = int(payload.get("step", 1))
                target = round(c.state.tap + step * c.state.tap_step, 10)
                if not c.state.tap_min - 1e-12 <= target <= c.state.tap_max + 1e-12:
                    payload["result"] = "clamped"
                    target = c.state.tap
                else:
                    c.state = dataclasses.replace(c.state, tap=target)
            br = sysm.network.branch(c.branch)
            if br.tap_ratio != target:
                br.tap_ratio = target
                sysm.invalidate()
        elif event.kind == "oel_limit":
            dev = sysm.device(payload["device"])
            if dev.oel.status != "limiting":
                dev.oel = dataclasses.replace(dev.oel, status="limiting")
        elif event.kind == "cvr_activate":
            cvr = self.cvr or CvrController(delta_setpoint=float(payload.get("delta", 0.05)), t_activate=event.time)
            states, cvr, applied = cvr_apply(cvr, self.t, [c.state for c in sysm.ltcs])
            for c, s in zip(sysm.ltcs, states):
                c.state = s
            self.cvr = cvr
            if not applied:
                payload["result"] = "ignored"
        elif event.kind == "custom":
            if "device" in payload:
                dev = sysm.device(payload["device"])
                attr = payload["param"]
                if not hasattr(dev, attr):
                    raise ScenarioError(f"device {dev.name} has no attribute {attr!r}")
                setattr(dev, attr, payload["value"])
                sysm.invalidate()
        else:
            raise ScenarioError(f"unknown event kind {event.kind!r}")
        self.journal.append(JournalEntry(self.t, event.kind, format_payload(payload)))
        self._signature = sysm.discrete_signature()
        self._kernel_stale = True

    def _discrete_updates(self, h: float) -> list[Event]:
        sysm = self.system
        t = self.t
        due: list[Event] = []
        while self.pending and self.pending[0].time <= t + 1e-9:
            due.append(self.pending.pop(0))
        xl = self.x.tolist()
        seq = 10_000
        for d, o in zip(sysm.devices, sysm.offsets):
            for ev in d.discrete_update(t, h, xl, o, self.v[d.k]):
                ev.seq = seq
                seq += 1
                due.append(ev)
        for c in sysm.ltcs:
            c.state, ev = ltc_update(c.state, c.measure(abs(self.v[c.bus]), h), h)
            if ev is not None:
                ev.time = t
                ev.payload["ltc"] = c.name
                ev.seq = seq
                seq += 1
                due.append(ev)
        due.sort(key=Event.sort_key)
        return due

    def step(self, dt: float | None = None) -> SimulationState:
        h = self.dt if dt is None else dt
        if self.collapsed:
            raise CollapseError(self.collapse_reason)
        sig = self._signature
        try:
            self._advance(h)
            self.step_count += 1
            self.t = self.step_count * self.dt if dt is None else self.t + h
            self._check_bounds()
            events = self._discrete_updates(h)
            for ev in events:
                self.handle_event(ev)
            self.last_events = events
            if events:
                self._signature = self.system.discrete_signature()
            if events or self._signature != sig:
                fl, self.v = self.system.rhs(self.x.tolist(), self.v)
                self.fx = np.array(fl)
                self._f_prev = None
        except (CollapseError, NetworkSolveError) as exc:
            self.collapsed = True
            self.collapse_reason = str(exc)
            self.collapse_kind = getattr(exc, "kind", "solve")
            self.journal.append(JournalEntry(self.t, "custom", format_payload({"collapse": str(exc)})))
            raise CollapseError(str(exc), self.collapse_kind) from exc
        return self.state

    # -- outputs ---------------------------------------------------------------

    def channel_names(self) -> list[str]:
        sysm = self.system
        names = [f"V_{b.id}" for b in sysm.network.buses]
        for d in sysm.devices:
            names.extend(d.channel_names())
        names.extend(f"{c.name}.tap" for c in sysm.ltcs)
        names += ["zone_load_MW", "power_balance"]
        return names

    def channels(self) -> list[float]:
        sysm = self.system
        xl = self.x.tolist()
        v = self.v
        row = [abs(u) for u in v]
        for d, o in zip(sysm.devices, sysm.offsets):
            row.extend(d.channels(xl, o, v[d.k]))
        row.extend(c.state.tap for c in sysm.ltcs)
        row.append(sum(ld.consumption_mw(v[ld.k]) for ld in sysm.loads()))
        row.append(sysm.power_balance(xl, v))
        return row


def initialize(scenario: Scenario) -> Simulation:
    return Simulation(scenario)


def step(sim: Simulation, dt: float | None = None) -> SimulationState:
    return sim.step(dt)


@dataclass
class RunResult:
    timeseries: TimeSeries
    journal: list[JournalEntry]
    verdict: str
    collapsed: bool = False
    collapse_reason: str = ""
    scan: Any = None
    limit_cycle: Any = None
    crossings: list = field(default_factory=list)
    final_state: SimulationState | None = None
    stats: dict = field(default_factory=dict)


def simulate(scenario: Scenario, observer: Callable[[Simulation, list[Event]], None] | None = None,
             sim: Simulation | None = None) -> tuple[Simulation, TimeSeries]:
    """Integrate to ``t_end`` or collapse, sampling every ``stride`` steps."""
    sim = sim or Simulation(scenario)
    names = sim.channel_names()
    ts = TimeSeries(names)
    stride = scenario.outputs.stride
    n_steps = int(round(scenario.t_end / scenario.dt))
    ts.append(0.0, sim.channels())
    if observer is not None:
        observer(sim, [])
    for k in range(1, n_steps + 1):
        try:
            sim.step()
        except CollapseError:
            ts.append(sim.t, sim.channels())
            break
        if k % stride == 0 or k == n_steps:
            ts.append(sim.t, sim.channels())
        if observer is not None:
            observer(sim, sim.last_events)
    return sim, ts


def run_scenario(scenario: Scenario, eigen_scan: bool | None = None) -> RunResult:
    """Run a scenario end to end and classify the outcome."""
    from . import analysis

    scan_on = scenario.outputs.eigen_scan if eigen_scan is None else eigen_scan
    scanner = analysis.EigenScanner(scenario.outputs.scan_interval) if scan_on else None
    sim, ts = simulate(scenario, scanner)
    scan = scanner.result() if scanner else None
    verdict, lc, crossings = analysis.assess_run(ts, scan, sim.journal, sim.collapsed, sim.collapse_kind)
    wanted = scenario.outputs.channels
    if wanted is not None:
        missing = [c for c in wanted if c not in ts]
        if missing:
            raise ScenarioError(f"unknown output channels {missing}")
        ts = ts.select(list(wanted))
    stats = {"steps": sim.step_count, "newton_iterations": sim.newton_iterations,
             "jacobian_updates": sim.jacobian_updates}
    return RunResult(ts, sim.journal, verdict, sim.collapsed, sim.collapse_reason, scan, lc, crossings,
                     sim.state, stats)
