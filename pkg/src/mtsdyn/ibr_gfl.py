"""
Grid-following inverter: SRF-PLL, first-order current lags and a local PI
voltage regulator with constant-power active command.

Current components are expressed in the PLL frame. ``ip`` is aligned with the
estimated voltage phase and positive ``iq`` delivers reactive power to the
grid, so the network injection is ``(ip - j*iq) * exp(j*x2)``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .device import Device

PRIORITIES = ("q_priority", "p_priority")
PLL_ANTIWINDUP_T = 0.005  # s
REGULATOR_ANTIWINDUP_T = 0.005  # s


@dataclass
class PllState:
    x1: float
    x2: float
    kp: float
    ki: float


@dataclass
class CurrentControlState:
    ip: float
    iq: float
    ip_cmd: float
    iq_cmd: float
    t_g: float = 0.02
    i_max: float = 1.1


@dataclass
class OuterControlState:
    x_q: float
    v_ref: float
    kqp: float = 0.0
    kqi: float = 20.0
    priority: str = "q_priority"
    p_ref: float = 1.0
    i_max: float = 1.1
    # reactive droop on the regulated voltage; zero gives pure PI regulation
    kc: float = 0.0

    def __post_init__(self):
        if self.priority not in PRIORITIES:
            raise ValueError(f"unknown priority {self.priority!r}")


def pll_gains_from_bandwidth(bw: float, zeta: float = 0.707) -> tuple[float, float]:
    """Second-order loop design: natural frequency 2*pi*bw with damping ``zeta``."""
    if bw <= 0:
        raise ValueError("PLL bandwidth must be positive")
    if zeta <= 0:
        raise ValueError("damping ratio must be positive")
    wn = 2.0 * math.pi * bw
    return 2.0 * zeta * wn, wn * wn


def pll_error(v_terminal: complex, x2: float) -> float:
    # |V| sin(theta_v - x2), deliberately not normalized by |V|
    return (v_terminal * cmath.exp(-1j * x2)).imag


def pll_derivatives(pll: PllState, v_terminal: complex, w_max: float = math.inf) -> tuple[float, float]:
    """Rates of (x1, x2). ``w_max`` caps the frequency deviation (rad/s) fed to
    the phase integrator. Past the cap, x1 is pulled back by back-calculation,
    which keeps the right-hand side continuous for the implicit solver."""
    e = pll_error(v_terminal, pll.x2)
    dx1 = pll.ki * e
    w = pll.kp * e + pll.x1
    if math.isinf(w_max):
        return dx1, w
    excess = pll.x1 - max(-w_max, min(w_max, pll.x1))
    return dx1 - excess / PLL_ANTIWINDUP_T, max(-w_max, min(w_max, w))


def current_control_derivatives(cc: CurrentControlState) -> tuple[float, float]:
    if cc.t_g <= 0:
        raise ValueError("t_g must be positive")
    return (cc.ip_cmd - cc.ip) / cc.t_g, (cc.iq_cmd - cc.iq) / cc.t_g


def injection_phasor(ip: float, iq: float, x2: float) -> complex:
    return complex(ip, -iq) * cmath.exp(1j * x2)


def allocate_current(ip_cmd: float, iq_cmd: float, i_max: float, priority: str) -> tuple[float, float]:
    """Fit the command pair inside the ``i_max`` circle, favouring one axis."""
    if priority == "q_priority":
        iq_cmd = max(-i_max, min(i_max, iq_cmd))
        room = math.sqrt(max(i_max * i_max - iq_cmd * iq_cmd, 0.0))
        ip_cmd = max(-room, min(room, ip_cmd))
    else:
        ip_cmd = max(-i_max, min(i_max, ip_cmd))
        room = math.sqrt(max(i_max * i_max - ip_cmd * ip_cmd, 0.0))
        iq_cmd = max(-room, min(room, iq_cmd))
    return ip_cmd, iq_cmd


def _regulator(oc: OuterControlState, v_meas: float, q_meas: float) -> tuple[float, float, float, bool]:
    """Returns (ip_cmd, iq_cmd, error, saturated_in_error_direction)."""
    err = oc.v_ref - v_meas - oc.kc * q_meas
    iq_raw = oc.x_q + oc.kqp * err
    ip_raw = oc.p_ref / max(v_meas, 0.1)
    ip_cmd, iq_cmd = allocate_current(ip_raw, iq_raw, oc.i_max, oc.priority)
    clipped = iq_cmd != iq_raw
    winding = clipped and (err > 0) == (iq_raw > iq_cmd)
    return ip_cmd, iq_cmd, err, winding


def outer_control_step(oc: OuterControlState, v_meas: float, dt: float, q_meas: float = 0.0) -> tuple[float, float]:
    """One explicit step of the voltage regulator; updates ``oc.x_q`` in place.

    The integrator is frozen while the reactive command sits on its limit and
    the error would push it further out.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ip_cmd, iq_cmd, err, winding = _regulator(oc, v_meas, q_meas)
    if not winding:
        oc.x_q += dt * oc.kqi * err
    return ip_cmd, iq_cmd


@dataclass
class GflParams:
    mva: float = 100.0
    bw: float = 8.0
    zeta: float = 0.707
    t_g: float = 0.02
    i_max: float = 1.1
    kqp: float = 0.0
    kqi: float = 20.0
    kc: float = 0.0
    priority: str = "q_priority"
    w_max: float = math.inf  # PLL frequency-deviation limit, rad/s


class GridFollowingIBR(Device):
    """PLL-synchronised current source. States: x1, x2, ip, iq and, with a
    nonzero integral gain, the regulator integrator x_q."""

    kind = "gfl"

    def __init__(self, name: str, bus: str, params: GflParams | None = None):
        super().__init__(name, bus)
        self.params = params or GflParams()
        if self.params.priority not in PRIORITIES:
            raise ValueError(f"unknown priority {self.params.priority!r}")
        self.kp, self.ki = pll_gains_from_bandwidth(self.params.bw, self.params.zeta)
        self.p_ref = 1.0
        self.v_ref = 1.0
        self.x_q_fixed = 0.0
        names = ["x1", "x2", "ip", "iq"]
        if self.params.kqi:
            names.append("x_q")
        self.state_names = tuple(names)

    @property
    def scale(self) -> float:
        return self.params.mva / self.base_mva

    def source_current(self, x, o, v):
        return injection_phasor(x[o + 2], x[o + 3], x[o + 1]) * self.scale

    def _outer(self, x, o) -> OuterControlState:
        p = self.params
        x_q = x[o + 4] if p.kqi else self.x_q_fixed
        return OuterControlState(x_q, self.v_ref, p.kqp, p.kqi, p.priority, self.p_ref, p.i_max, p.kc)

    def _q_own(self, x, o, v) -> float:
        i = injection_phasor(x[o + 2], x[o + 3], x[o + 1])
        return (v * i.conjugate()).imag

    def derivatives(self, x, o, v):
        p = self.params
        x1, x2, ip, iq = x[o], x[o + 1], x[o + 2], x[o + 3]
        vm = abs(v)
        oc = self._outer(x, o)
        q = self._q_own(x, o, v) if p.kc else 0.0
        ip_cmd, iq_cmd, err, _ = _regulator(oc, vm, q)
        dx1, dx2 = pll_derivatives(PllState(x1, x2, self.kp, self.ki), v, p.w_max)
        out = [dx1, dx2, (ip_cmd - ip) / p.t_g, (iq_cmd - iq) / p.t_g]
        if p.kqi:
            # back-calculation: the integrator is pulled onto the limit instead
            # of being frozen, so the rate stays continuous in the states
            iq_raw = oc.x_q + p.kqp * err
            out.append(p.kqi * err - (iq_raw - iq_cmd) / REGULATOR_ANTIWINDUP_T)
        return out

    def initialize(self, v, s):
        p = self.params
        s_own = s / self.scale
        vm = abs(v)
        self.p_ref = s_own.real
        ip, iq = s_own.real / vm, s_own.imag / vm
        if math.hypot(ip, iq) > p.i_max + 1e-9:
            raise ValueError(f"{self.name}: dispatch needs {math.hypot(ip, iq):.3f} pu current, above i_max")
        self.v_ref = vm + p.kc * s_own.imag
        # with a pure proportional regulator the offset lives in a fixed bias
        self.x_q_fixed = iq
        x = [0.0, cmath.phase(v), ip, iq]
        if p.kqi:
            x.append(iq)
        return x

    def channel_names(self):
        n = self.name
        return [f"{n}.x1", f"{n}.x2", f"{n}.ip", f"{n}.iq", f"{n}.P", f"{n}.Q"]

    def channels(self, x, o, v):
        s = self.power(x, o, v)
        return [x[o], x[o + 1], x[o + 2], x[o + 3], s.real, s.imag]
