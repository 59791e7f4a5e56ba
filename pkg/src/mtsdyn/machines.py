"""
Synchronous machine (two-axis, fourth order) with first-order exciter,
first-order governor, optional PSS and a fixed-delay over-excitation limiter.

Machine quantities are per unit on the machine rating; the device converts to
the system base at its network interface.
"""

from __future__ import annotations

import cmath
import dataclasses
import math
from dataclasses import dataclass

from .device import Device
from .events import Event

OMEGA_BASE = 2 * math.pi * 50.0


class MachineInitError(Exception):
    pass


@dataclass
class MachineParams:
    mva: float = 100.0
    xd: float = 1.8
    xq: float = 1.7
    xd_p: float = 0.3
    xq_p: float = 0.3
    td0_p: float = 7.0
    tq0_p: float = 0.7
    h: float = 4.0
    d: float = 2.0
    # exciter
    ka: float = 50.0
    ta: float = 0.5
    efd_min: float = 0.0
    efd_max: float = 5.0
    # governor
    droop_r: float = 0.05
    t_gov: float = 1.0
    p_max: float = 1.0
    # over-excitation limiter
    ifd_limit: float = 3.0
    oel_delay: float = 20.0
    oel_enabled: bool = True
    oel_t_meas: float = 1.0  # field-current transducer lag seen by the limiter, s
    # PSS (off when kpss == 0)
    kpss: float = 0.0
    tw: float = 5.0
    t1: float = 0.2
    t2: float = 0.05


@dataclass
class MachineState:
    delta: float
    omega: float
    eq_p: float
    ed_p: float
    efd: float = 0.0
    ifd: float = 0.0


@dataclass
class AvrState:
    x_avr: float
    v_ref: float
    ka: float
    ta: float
    efd_limits: tuple[float, float]


@dataclass
class GovState:
    x_gov: float
    droop_r: float
    p_ref: float
    t_gov: float = 1.0
    p_max: float = 1.0


OEL_STATUSES = ("inactive", "timing", "limiting")


@dataclass(frozen=True)
class OelState:
    status: str = "inactive"
    timer: float = 0.0
    ifd_limit: float = 3.0
    delay: float = 20.0


def to_dq(v: complex, delta: float) -> complex:
    """Network-frame phasor to machine (d + jq) components."""
    return v * 1j * cmath.exp(-1j * delta)


def from_dq(vdq: complex, delta: float) -> complex:
    return vdq * -1j * cmath.exp(1j * delta)


def stator_currents(state: MachineState, v_terminal: complex, p: MachineParams) -> tuple[float, float]:
    """(id, iq) in machine pu from the algebraic stator equations (ra = 0)."""
    vdq = to_dq(v_terminal, state.delta)
    i_d = (state.eq_p - vdq.imag) / p.xd_p
    i_q = (vdq.real - state.ed_p) / p.xq_p
    return i_d, i_q


def field_current(state: MachineState, i_d: float, p: MachineParams) -> float:
    return state.eq_p + (p.xd - p.xd_p) * i_d


def init_machine(v_terminal: complex, s_gen: complex, params: MachineParams) -> tuple[MachineState, AvrState, GovState]:
    """Steady-state back-solve from terminal voltage and generated power.

    ``s_gen`` is in machine pu. Raises MachineInitError when the required
    field voltage falls outside the exciter limits.
    """
    p = params
    i = (s_gen / v_terminal).conjugate()
    eq_axis = v_terminal + 1j * p.xq * i
    delta = cmath.phase(eq_axis)
    vdq = to_dq(v_terminal, delta)
    idq = to_dq(i, delta)
    i_d, i_q = idq.real, idq.imag
    ed_p = (p.xq - p.xq_p) * i_q
    eq_p = vdq.imag + p.xd_p * i_d
    efd = eq_p + (p.xd - p.xd_p) * i_d
    if not p.efd_min <= efd <= p.efd_max:
        raise MachineInitError(f"field voltage {efd:.3f} outside [{p.efd_min}, {p.efd_max}]")
    pm = s_gen.real
    if not 0.0 <= pm <= p.p_max:
        raise MachineInitError(f"mechanical power {pm:.3f} outside [0, {p.p_max}]")
    vm = abs(v_terminal)
    st = MachineState(delta, 0.0, eq_p, ed_p, efd, efd)
    avr = AvrState(efd, vm + efd / p.ka, p.ka, p.ta, (p.efd_min, p.efd_max))
    gov = GovState(pm, p.droop_r, pm, p.t_gov, p.p_max)
    return st, avr, gov


def machine_derivatives(state: MachineState, v_terminal: complex, params: MachineParams,
                        pm: float | None = None) -> tuple[float, float, float, float]:
    """d/dt of (delta, omega, eq_p, ed_p). ``pm`` defaults to the field-free balance pe."""
    p = params
    i_d, i_q = stator_currents(state, v_terminal, p)
    vdq = to_dq(v_terminal, state.delta)
    pe = vdq.real * i_d + vdq.imag * i_q
    if pm is None:
        pm = pe
    d_delta = OMEGA_BASE * state.omega
    d_omega = (pm - pe - p.d * state.omega) / (2.0 * p.h)
    d_eq = (state.efd - state.eq_p - (p.xd - p.xd_p) * i_d) / p.td0_p
    d_ed = (-state.ed_p + (p.xq - p.xq_p) * i_q) / p.tq0_p
    return d_delta, d_omega, d_eq, d_ed


def avr_gov_derivatives(avr: AvrState, gov: GovState, state: MachineState, v_meas: float,
                        pss_signal: float = 0.0, oel: OelState | None = None) -> tuple[float, float, float]:
    """Exciter and governor derivatives plus the clamped field voltage.

    Returns ``(d x_avr, d x_gov, efd)``. With the OEL limiting, the exciter
    target passes through a low-value gate against the field-current limit.
    """
    if v_meas < 0:
        raise ValueError("v_meas must be non-negative")
    lo, hi = avr.efd_limits
    target = avr.ka * (avr.v_ref - v_meas + pss_signal)
    if oel is not None and oel.status == "limiting":
        target = min(target, oel.ifd_limit)
    # Limiting the lag input rather than freezing the state keeps both lags
    # inside their bounds and the right-hand side continuous.
    dx_avr = (min(max(target, lo), hi) - avr.x_avr) / avr.ta
    efd = min(max(avr.x_avr, lo), hi)

    gov_target = min(max(gov.p_ref - state.omega / gov.droop_r, 0.0), gov.p_max)
    dx_gov = (gov_target - gov.x_gov) / gov.t_gov
    return dx_avr, dx_gov, efd


def oel_update(oel: OelState, ifd: float, dt: float) -> tuple[OelState, Event | None]:
    """Advance the limiter timer by ``dt``; emits an ``oel_limit`` event on takeover."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if oel.status == "limiting":
        return oel, None
    if ifd > oel.ifd_limit:
        timer = oel.timer + dt
        if timer >= oel.delay - 1e-9:
            new = dataclasses.replace(oel, status="limiting", timer=timer)
            return new, Event("oel_limit", 0.0, {"ifd": round(ifd, 6)})
        return dataclasses.replace(oel, status="timing", timer=timer), None
    if oel.status == "timing":
        return dataclasses.replace(oel, status="inactive", timer=0.0), None
    return oel, None


class SynchronousMachine(Device):
    """Two-axis machine device with exciter, governor, PSS and OEL."""

    kind = "machine"
    voltage_stiff = True

    def __init__(self, name: str, bus: str, params: MachineParams | None = None):
        super().__init__(name, bus)
        self.params = params or MachineParams()
        self.oel = OelState(ifd_limit=self.params.ifd_limit, delay=self.params.oel_delay)
        self.ifd_meas = 0.0
        self.avr_v_ref = 1.0
        self.p_ref = 0.0
        names = ["delta", "omega", "eq_p", "ed_p", "x_avr", "x_gov"]
        if self.params.kpss:
            names += ["x_w", "x_ll"]
        self.state_names = tuple(names)
        self.voltage_dependent = self.params.xd_p != self.params.xq_p

    @property
    def scale(self) -> float:
        return self.params.mva / self.base_mva

    def norton_admittance(self) -> complex:
        return self.scale / (1j * self.params.xd_p)

    def _state(self, x, o) -> MachineState:
        return MachineState(x[o], x[o + 1], x[o + 2], x[o + 3])

    def source_current(self, x, o, v):
        p = self.params
        delta = x[o]
        e = from_dq(complex(x[o + 3], x[o + 2]), delta)
        if not self.voltage_dependent:
            return self.scale * e / (1j * p.xd_p)
        st = self._state(x, o)
        i_d, i_q = stator_currents(st, v, p)
        i = from_dq(complex(i_d, i_q), delta) * self.scale
        return i + self.norton_admittance() * v

    def _pss(self, x, o) -> tuple[float, float, float]:
        p = self.params
        if not p.kpss:
            return 0.0, 0.0, 0.0
        w, xw, xll = x[o + 1], x[o + 6], x[o + 7]
        u = p.kpss * (w - xw)
        out = xll + (p.t1 / p.t2) * (u - xll)
        out = max(-0.1, min(0.1, out))
        return out, (w - xw) / p.tw, (u - xll) / p.t2

    def derivatives(self, x, o, v):
        p = self.params
        st = self._state(x, o)
        avr = AvrState(x[o + 4], self.avr_v_ref, p.ka, p.ta, (p.efd_min, p.efd_max))
        gov = GovState(x[o + 5], p.droop_r, self.p_ref, p.t_gov, p.p_max)
        pss, d_w, d_ll = self._pss(x, o)
        dx_avr, dx_gov, efd = avr_gov_derivatives(avr, gov, st, abs(v), pss, self.oel)
        st.efd = efd
        pm = min(max(gov.x_gov, 0.0), p.p_max)
        out = list(machine_derivatives(st, v, p, pm))
        out += [dx_avr, dx_gov]
        if p.kpss:
            out += [d_w, d_ll]
        return out

    def initialize(self, v, s):
        p = self.params
        st, avr, gov = init_machine(v, s / self.scale, p)
        self.avr_v_ref = avr.v_ref
        self.p_ref = gov.p_ref
        x = [st.delta, st.omega, st.eq_p, st.ed_p, avr.x_avr, gov.x_gov]
        self.ifd_meas = field_current(st, stator_currents(st, v, p)[0], p)
        if p.kpss:
            x += [0.0, 0.0]
        return x

    def field_current(self, x, o, v) -> float:
        st = self._state(x, o)
        i_d, _ = stator_currents(st, v, self.params)
        return field_current(st, i_d, self.params)

    def channel_names(self):
        n = self.name
        return [f"{n}.delta", f"{n}.omega", f"{n}.efd", f"{n}.ifd", f"{n}.oel", f"{n}.P", f"{n}.Q"]

    def channels(self, x, o, v):
        p = self.params
        efd = min(max(x[o + 4], p.efd_min), p.efd_max)
        s = self.power(x, o, v)
        status = OEL_STATUSES.index(self.oel.status)
        return [x[o], x[o + 1], efd, self.field_current(x, o, v), float(status), s.real, s.imag]

    def discrete_update(self, t, dt, x, o, v):
        if not self.params.oel_enabled:
            return []
        # the limiter acts on a lagged measurement, so a field current that
        # merely ripples across the limit does not keep resetting the timer
        ifd = self.field_current(x, o, v)
        t_meas = self.params.oel_t_meas
        if t_meas > 0:
            self.ifd_meas += (ifd - self.ifd_meas) * min(dt / t_meas, 1.0)
        else:
            self.ifd_meas = ifd
        self.oel, ev = oel_update(self.oel, self.ifd_meas, dt)
        if ev is None:
            return []
        ev.time = t
        ev.payload["device"] = self.name
        return [ev]

    def discrete_signature(self):
        # only the limiting status changes the continuous dynamics
        return (self.oel.status == "limiting",)


class InfiniteSource(Device):
    """Stiff voltage source behind a reactance; no dynamic states."""

    kind = "source"
    voltage_stiff = True

    def __init__(self, name: str, bus: str, x_source: float = 0.01):
        super().__init__(name, bus)
        self.x_source = x_source
        self.emf = 1.0 + 0j

    def norton_admittance(self) -> complex:
        return 1.0 / (1j * self.x_source)

    def source_current(self, x, o, v):
        return self.emf / (1j * self.x_source)

    def initialize(self, v, s):
        i = (s / v).conjugate()
        self.emf = v + 1j * self.x_source * i
        return []

    def channel_names(self):
        return [f"{self.name}.P", f"{self.name}.Q"]

    def channels(self, x, o, v):
        s = self.power(x, o, v)
        return [s.real, s.imag]
