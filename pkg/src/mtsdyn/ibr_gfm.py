"""Droop-controlled grid-forming inverter: a voltage source behind reactance."""

from __future__ import annotations

import cmath
from dataclasses import dataclass

from .device import Device
from .machines import OMEGA_BASE

E_MIN, E_MAX = 0.5, 1.5


@dataclass
class GfmState:
    theta: float
    e_mag: float
    p_filt: float
    q_filt: float
    mp: float = 0.02
    mq: float = 0.05
    t_f: float = 0.05
    x_s: float = 0.15
    i_max: float = 1.2


def droop_voltage(v_set: float, mq: float, q_set: float, q_filt: float) -> float:
    return min(max(v_set + mq * (q_set - q_filt), E_MIN), E_MAX)


def gfm_current_limit(gfm: GfmState, v_terminal: complex) -> complex:
    """Current out of the source, magnitude-clamped to ``i_max`` with its angle kept."""
    e = cmath.rect(gfm.e_mag, gfm.theta)
    i = (e - v_terminal) / (1j * gfm.x_s)
    mag = abs(i)
    if mag > gfm.i_max:
        i *= gfm.i_max / mag
    return i


def gfm_derivatives(gfm: GfmState, v_terminal: complex, p_set: float, q_set: float,
                    v_set: float = 1.0) -> tuple[float, float, float, float]:
    """Returns ``(d theta, d p_filt, d q_filt, e_mag)``.

    The power measured at the terminal uses the limited current, and
    ``e_mag`` is the droop output computed from the current filter state.
    """
    if gfm.t_f <= 0:
        raise ValueError("t_f must be positive")
    s = v_terminal * gfm_current_limit(gfm, v_terminal).conjugate()
    d_theta = OMEGA_BASE * gfm.mp * (p_set - gfm.p_filt)
    d_p = (s.real - gfm.p_filt) / gfm.t_f
    d_q = (s.imag - gfm.q_filt) / gfm.t_f
    return d_theta, d_p, d_q, droop_voltage(v_set, gfm.mq, q_set, gfm.q_filt)


@dataclass
class GfmParams:
    mva: float = 100.0
    mp: float = 0.02
    mq: float = 0.05
    t_f: float = 0.05
    x_s: float = 0.15
    i_max: float = 1.2


class GridFormingIBR(Device):
    kind = "gfm"
    state_names = ("theta", "p_filt", "q_filt")
    voltage_stiff = True
    voltage_dependent = True

    def __init__(self, name: str, bus: str, params: GfmParams | None = None):
        super().__init__(name, bus)
        self.params = params or GfmParams()
        self.p_set = 0.0
        self.q_set = 0.0
        self.v_set = 1.0

    @property
    def scale(self) -> float:
        return self.params.mva / self.base_mva

    def norton_admittance(self) -> complex:
        return self.scale / (1j * self.params.x_s)

    def _state(self, x, o) -> GfmState:
        p = self.params
        e = droop_voltage(self.v_set, p.mq, self.q_set, x[o + 2])
        return GfmState(x[o], e, x[o + 1], x[o + 2], p.mp, p.mq, p.t_f, p.x_s, p.i_max)

    def source_current(self, x, o, v):
        st = self._state(x, o)
        return gfm_current_limit(st, v) * self.scale + self.norton_admittance() * v

    def derivatives(self, x, o, v):
        d_theta, d_p, d_q, _ = gfm_derivatives(self._state(x, o), v, self.p_set, self.q_set, self.v_set)
        return [d_theta, d_p, d_q]

    def initialize(self, v, s):
        p = self.params
        s_own = s / self.scale
        i = (s_own / v).conjugate()
        if abs(i) > p.i_max + 1e-9:
            raise ValueError(f"{self.name}: dispatch exceeds current limit")
        e = v + 1j * p.x_s * i
        self.p_set, self.q_set = s_own.real, s_own.imag
        self.v_set = abs(e)
        if not E_MIN <= self.v_set <= E_MAX:
            raise ValueError(f"{self.name}: internal voltage {self.v_set:.3f} outside droop range")
        return [cmath.phase(e), s_own.real, s_own.imag]

    def channel_names(self):
        n = self.name
        return [f"{n}.theta", f"{n}.e_mag", f"{n}.P", f"{n}.Q"]

    def channels(self, x, o, v):
        s = self.power(x, o, v)
        return [x[o], self._state(x, o).e_mag, s.real, s.imag]

