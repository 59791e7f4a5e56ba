"""
Long-term dynamics: tap changer logic, exponential loads and the timed
voltage-reduction (CVR) controller.

Tap convention: the tap sits on the transmission (from) side of the
transformer branch, so the distribution voltage is roughly the transmission
voltage divided by the tap. Lowering the tap raises the distribution voltage.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Sequence

from .device import Device
from .events import Event


@dataclass(frozen=True)
class LtcState:
    tap: float = 1.0
    tap_step: float = 0.01
    tap_min: float = 0.85
    tap_max: float = 1.15
    v_target: float = 1.0
    deadband: float = 0.01
    delay_first: float = 30.0
    delay_next: float = 10.0
    timer: float = 0.0
    armed: bool = False  # True once a step has been taken in the current excursion

    def __post_init__(self):
        if not self.tap_min <= self.tap <= self.tap_max:
            raise ValueError(f"tap {self.tap} outside [{self.tap_min}, {self.tap_max}]")


def ltc_update(ltc: LtcState, v_dist: float, dt: float) -> tuple[LtcState, Event | None]:
    """Advance the tap-changer timer; returns the new state and a tap event on expiry.

    The returned state already carries the moved tap. When the tap is at the
    end of its range the timer saturates at its delay and no event is issued.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    error = v_dist - ltc.v_target
    if abs(error) <= ltc.deadband:
        if ltc.timer == 0.0 and not ltc.armed:
            return ltc, None
        return dataclasses.replace(ltc, timer=0.0, armed=False), None

    delay = ltc.delay_next if ltc.armed else ltc.delay_first
    timer = ltc.timer + dt
    if timer < delay - 1e-9:
        return dataclasses.replace(ltc, timer=timer), None

    direction = -1 if error < 0 else 1
    new_tap = round(ltc.tap + direction * ltc.tap_step, 10)
    if new_tap < ltc.tap_min - 1e-12 or new_tap > ltc.tap_max + 1e-12:
        return dataclasses.replace(ltc, timer=min(timer, delay)), None
    new = dataclasses.replace(ltc, tap=new_tap, timer=0.0, armed=True)
    ev = Event("tap_step", 0.0, {"from": ltc.tap, "to": new_tap, "step": direction})
    return new, ev


@dataclass(frozen=True)
class LoadState:
    p0: float  # MW at v0
    q0: float  # MVAr at v0
    alpha: float = 1.0
    beta: float = 2.0
    v0: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("load exponents must be non-negative")
        if self.v0 <= 0:
            raise ValueError("v0 must be positive")


def load_injection(load: LoadState, v: float) -> tuple[float, float]:
    """Consumption (MW, MVAr) at voltage magnitude ``v``."""
    if v < 0:
        raise ValueError("voltage magnitude must be non-negative")
    r = v / load.v0
    if r == 0.0:
        return (load.p0 if load.alpha == 0 else 0.0, load.q0 if load.beta == 0 else 0.0)
    return load.p0 * r ** load.alpha, load.q0 * r ** load.beta


def restoration_deficit(zone_loads: Sequence[LoadState], v_now: Sequence[float]) -> float:
    """MW still missing from the zone relative to nominal consumption."""
    if len(zone_loads) != len(v_now):
        raise ValueError("one voltage per load required")
    return sum(ld.p0 for ld in zone_loads) - sum(load_injection(ld, v)[0] for ld, v in zip(zone_loads, v_now))


CVR_MODES = ("off", "timed")


@dataclass(frozen=True)
class CvrController:
    mode: str = "timed"
    t_activate: float = 300.0
    delta_setpoint: float = 0.05
    applied: bool = False

    def __post_init__(self):
        if self.mode not in CVR_MODES:
            raise ValueError(f"unknown CVR mode {self.mode!r}")
        if not 0.0 <= self.delta_setpoint < 1.0:
            raise ValueError("delta_setpoint must lie in [0, 1)")


def cvr_apply(cvr: CvrController, t: float, ltcs: Iterable[LtcState]) -> tuple[list[LtcState], CvrController, bool]:
    """Scale every registered LTC target by ``1 - delta_setpoint`` once ``t`` is reached.

    Returns the (possibly updated) LTC states, the controller and whether the
    reduction was applied by this call.
    """
    ltcs = list(ltcs)
    if cvr.mode == "off" or cvr.applied or t < cvr.t_activate - 1e-9:
        return ltcs, cvr, False
    factor = 1.0 - cvr.delta_setpoint
    out = [dataclasses.replace(s, v_target=s.v_target * factor, timer=0.0, armed=False) for s in ltcs]
    return out, dataclasses.replace(cvr, applied=True), True


class ExponentialLoad(Device):
    """Voltage-dependent load. The nominal admittance at ``v0`` goes into the
    network matrix and the remainder is a voltage-dependent correction current."""

    kind = "load"
    voltage_dependent = True
    generating = False

    def __init__(self, name: str, bus: str, alpha: float = 1.0, beta: float = 2.0):
        super().__init__(name, bus)
        self.alpha = alpha
        self.beta = beta
        # a constant-impedance load is fully represented by its admittance
        self.voltage_dependent = not (alpha == 2.0 and beta == 2.0)
        self.load = LoadState(0.0, 0.0, alpha, beta)
        self._y = 0j
        self._p = self._q = 0.0  # system pu at v0

    def norton_admittance(self) -> complex:
        return self._y

    def source_current(self, x, o, v):
        vm = abs(v)
        if vm == 0.0:
            return 0j
        r = vm / self.load.v0
        s = complex(self._p * r ** self.alpha, self._q * r ** self.beta)
        return self._y * v - (s / v).conjugate()

    def current_sensitivity(self, x, o, v):
        vm = abs(v)
        if vm == 0.0:
            return self._y, 0j
        r = vm / self.load.v0
        s_conj = complex(self._p * r ** self.alpha, -self._q * r ** self.beta)
        # d conj(S) / d|V|
        c = complex(self.alpha * self._p * r ** self.alpha, -self.beta * self._q * r ** self.beta) / vm
        vc = v.conjugate()
        a = self._y - c / (2.0 * vm)
        b = -(c * v / (2.0 * vm * vc) - s_conj / (vc * vc))
        return a, b

    def initialize(self, v, s):
        """``s`` is the consumed power in system pu."""
        vm = abs(v)
        self.load = LoadState(s.real * self.base_mva, s.imag * self.base_mva, self.alpha, self.beta, vm)
        self._p, self._q = s.real, s.imag
        self._y = s.conjugate() / (vm * vm)
        return []

    def consumption_mw(self, v: complex) -> float:
        return load_injection(self.load, abs(v))[0]

    def channel_names(self):
        return [f"{self.name}.P_MW", f"{self.name}.Q_MVAr"]

    def channels(self, x, o, v):
        return list(load_injection(self.load, abs(v)))
