"""
Common interface between dynamic devices and the simulation engine.

A device sits at one bus, owns a contiguous block of the continuous state
vector and talks to the network through a Norton equivalent: a constant
admittance folded into the augmented bus matrix plus a source current that
may depend on the terminal voltage.
"""

from __future__ import annotations

from typing import Sequence


class Device:
    kind = "device"
    state_names: tuple[str, ...] = ()
    # True when source_current depends on the terminal voltage.
    voltage_dependent = False
    # Devices carrying a fixed internal EMF make the network solvable.
    voltage_stiff = False
    # Generating devices take the power-flow injection of their bus.
    generating = True

    def __init__(self, name: str, bus: str):
        self.name = name
        self.bus = bus
        self.k = -1  # bus index, set by bind()
        self.base_mva = 100.0

    def bind(self, bus_index: int, base_mva: float) -> None:
        self.k = bus_index
        self.base_mva = base_mva

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    def norton_admittance(self) -> complex:
        return 0j

    def source_current(self, x: Sequence[float], o: int, v: complex) -> complex:
        return 0j

    def current_sensitivity(self, x: Sequence[float], o: int, v: complex) -> tuple[complex, complex]:
        """Coefficients ``(a, b)`` with ``dI = a*dV + b*conj(dV)`` for the source current.

        The default differences the source current along the real and
        imaginary voltage directions; devices with a closed form override it.
        """
        h = 1e-7 * max(abs(v), 1.0)
        i0 = self.source_current(x, o, v)
        d_re = (self.source_current(x, o, v + h) - i0) / h
        d_im = (self.source_current(x, o, v + 1j * h) - i0) / h
        return 0.5 * (d_re - 1j * d_im), 0.5 * (d_re + 1j * d_im)

    def derivatives(self, x: Sequence[float], o: int, v: complex) -> list[float]:
        return []

    def initialize(self, v: complex, s: complex) -> list[float]:
        """Back-solve steady-state values from terminal voltage and power (system pu)."""
        return []

    def injected_current(self, x: Sequence[float], o: int, v: complex) -> complex:
        return self.source_current(x, o, v) - self.norton_admittance() * v

    def power(self, x: Sequence[float], o: int, v: complex) -> complex:
        """Complex power injected into the network, system pu."""
        return v * self.injected_current(x, o, v).conjugate()

    def channel_names(self) -> list[str]:
        return [f"{self.name}.{s}" for s in self.state_names]

    def channels(self, x: Sequence[float], o: int, v: complex) -> list[float]:
        return [x[o + i] for i in range(self.n_states)]

    def discrete_update(self, t: float, dt: float, x: Sequence[float], o: int, v: complex) -> list:
        return []

    def discrete_signature(self) -> tuple:
        """Hashable summary of the discrete state that shapes the derivatives."""
        return ()
