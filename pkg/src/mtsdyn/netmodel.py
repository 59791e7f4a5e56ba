"""
Phasor network: bus/branch data, admittance assembly, Newton-Raphson power
flow and the algebraic network solution used at every integration step.

All impedances are per unit on ``NetworkModel.base_mva``; bus powers are in
MW / MVAr.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NetworkError(Exception):
    """Invalid network description or topology change."""


class PowerFlowError(Exception):
    """Power flow did not converge or hit a singular Jacobian."""


class NetworkSolveError(Exception):
    """Fixed-point iteration of the network equations did not converge."""


BUS_KINDS = ("slack", "pv", "pq")


@dataclass
class Bus:
    id: str
    base_kv: float = 400.0
    kind: str = "pq"
    v_setpoint: float = 1.0
    p_load0: float = 0.0
    q_load0: float = 0.0
    p_gen: float = 0.0
    q_gen: float = 0.0

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise NetworkError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.base_kv <= 0:
            raise NetworkError(f"bus {self.id}: base_kv must be positive")
        if not 0.8 <= self.v_setpoint <= 1.2:
            raise NetworkError(f"bus {self.id}: v_setpoint {self.v_setpoint} outside [0.8, 1.2]")


@dataclass
class Branch:
    id: str
    from_bus: str
    to_bus: str
    r: float = 0.0
    x: float = 0.1
    b_shunt: float = 0.0
    tap_ratio: float = 1.0
    in_service: bool = True

    def __post_init__(self):
        if self.x == 0:
            raise NetworkError(f"branch {self.id}: zero reactance")
        if not 0.8 <= self.tap_ratio <= 1.2:
            raise NetworkError(f"branch {self.id}: tap_ratio {self.tap_ratio} outside [0.8, 1.2]")


@dataclass
class NetworkModel:
    buses: list[Bus]
    branches: list[Branch] = field(default_factory=list)
    base_mva: float = 100.0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus id")
        ids = [b.id for b in self.branches]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate branch id")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: str) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise NetworkError(f"unknown bus {bus_id!r}")

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise NetworkError(f"unknown branch {branch_id!r}")

    def slack_index(self) -> int:
        slacks = [i for i, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slacks) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            [dataclasses.replace(b) for b in self.buses],
            [dataclasses.replace(br) for br in self.branches],
            self.base_mva,
        )


@dataclass(frozen=True)
class AdmittanceMatrix:
    bus_ids: tuple[str, ...]
    matrix: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.bus_ids)


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    mismatch_inf_norm: float
    iterations: int
    p_inj: np.ndarray  # net injection, per unit
    q_inj: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def build_admittance(network: NetworkModel) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix from in-service branches.

    Branches use the pi model with an off-nominal tap ``t`` on the from side:
    ``Yff = (y + jb/2)/t**2``, ``Yft = Ytf = -y/t``, ``Ytt = y + jb/2``.
    """
    n = network.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        if not br.in_service:
            continue
        if br.r == 0 and br.x == 0:
            raise NetworkError(f"branch {br.id}: zero impedance")
        f = network.bus_index(br.from_bus)
        t = network.bus_index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        a = br.tap_ratio
        Y[f, f] += (y + ysh) / (a * a)
        Y[t, t] += y + ysh
        Y[f, t] -= y / a
        Y[t, f] -= y / a
    return AdmittanceMatrix(tuple(b.id for b in network.buses), Y)


def connected_to_slack(network: NetworkModel) -> set[int]:
    """Indices of buses reachable from the slack through in-service branches."""
    n = network.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in network.branches:
        if br.in_service:
            f, t = network.bus_index(br.from_bus), network.bus_index(br.to_bus)
            adj[f].append(t)
            adj[t].append(f)
    start = network.slack_index()
    seen = {start}
    stack = [start]
    while stack:
        k = stack.pop()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


def apply_branch_event(network: NetworkModel, branch_id: str, in_service: bool) -> NetworkModel:
    """Return a copy of ``network`` with one branch switched in or out.

    Raises NetworkError when the switching would island any bus from the slack.
    """
    net = network.copy()
    br = net.branch(branch_id)
    if br.in_service == in_service:
        return net
    br.in_service = in_service
    if not in_service and len(connected_to_slack(net)) != net.n_bus:
        raise NetworkError(f"tripping {branch_id} islands part of the network from the slack")
    return net


def _power_injections(Y: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v * np.conj(Y @ v)


def solve_power_flow(network: NetworkModel, tol: float = 1e-10, max_iter: int = 30) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow from a flat start.

    PV buses hold ``v_setpoint`` and the scheduled ``p_gen - p_load0``; PQ
    buses hold both scheduled powers. Raises PowerFlowError on divergence.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    slack = network.slack_index()
    Y = build_admittance(network).matrix
    base = network.base_mva
    n = network.n_bus
    p_sch = np.array([(b.p_gen - b.p_load0) / base for b in network.buses])
    q_sch = np.array([(b.q_gen - b.q_load0) / base for b in network.buses])
    kinds = [b.kind for b in network.buses]
    pv = [i for i in range(n) if kinds[i] == "pv"]
    pq = [i for i in range(n) if kinds[i] == "pq"]
    pvpq = pv + pq

    vm = np.array([b.v_setpoint if b.kind in ("slack", "pv") else 1.0 for b in network.buses])
    va = np.zeros(n)

    def mismatch(vm, va):
        s = _power_injections(Y, vm * np.exp(1j * va))
        return np.concatenate([p_sch[pvpq] - s.real[pvpq], q_sch[pq] - s.imag[pq]])

    it = 0
    f = mismatch(vm, va)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError(f"no convergence after {max_iter} iterations (mismatch {norm:.3e})")
        v = vm * np.exp(1j * va)
        ibus = Y @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(v / np.abs(v))
        dS_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
        dS_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
        J = np.block([
            [dS_dva.real[np.ix_(pvpq, pvpq)], dS_dvm.real[np.ix_(pvpq, pq)]],
            [dS_dva.imag[np.ix_(pq, pvpq)], dS_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power-flow Jacobian") from exc
        if not np.all(np.isfinite(dx)):
            raise PowerFlowError("singular power-flow Jacobian")
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        it += 1
        f = mismatch(vm, va)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm) or np.any(vm <= 0):
            raise PowerFlowError("power flow diverged")
    va -= va[slack]
    s = _power_injections(Y, vm * np.exp(1j * va))
    return PowerFlowSolution(vm.copy(), va.copy(), norm, it, s.real.copy(), s.imag.copy())


class NortonNetwork:
    """Network with device Norton admittances folded in and the impedance
    matrix cached, ready for repeated solves with changing source currents.

    Works on plain Python lists; at desk scale this beats numpy call overhead.
    """

    def __init__(self, ybus: np.ndarray, shunts: Sequence[tuple[int, complex]] = ()):
        yaug = np.array(ybus, dtype=complex)
        for bus, y in shunts:
            yaug[bus, bus] += y
        try:
            z = np.linalg.inv(yaug)
        except np.linalg.LinAlgError as exc:
            raise NetworkSolveError("singular augmented admittance matrix") from exc
        if not np.all(np.isfinite(z)):
            raise NetworkSolveError("singular augmented admittance matrix")
        self.n = yaug.shape[0]
        self.yaug = yaug
        self.z = z.tolist()
        self.zcols = z.T.tolist()

    def solve_linear(self, current: Sequence[complex]) -> list[complex]:
        v = [0j] * self.n
        for j, i in enumerate(current):
            if i:
                col = self.zcols[j]
                v = [a + c * i for a, c in zip(v, col)]
        return v

    def solve(
        self,
        current: Sequence[complex],
        dependent: Callable[[list[complex]], Sequence[tuple[int, complex]]] | None = None,
        v0: Sequence[complex] | None = None,
        tol: float = 1e-8,
        max_iter: int = 50,
    ) -> list[complex]:
        """Solve with constant bus currents plus voltage-dependent ``(bus, current)`` terms.

        Iteration stops when the dependent currents move less than ``tol``
        between successive voltage iterates, which bounds the KCL residual.
        """
        base = self.solve_linear(current)
        if dependent is None:
            return base
        n = self.n
        v = list(v0) if v0 is not None else base
        prev = dependent(v)
        for _ in range(max_iter):
            v = base[:]
            for bus, i in prev:
                col = self.zcols[bus]
                for r in range(n):
                    v[r] += col[r] * i
            nxt = dependent(v)
            delta = max((abs(a[1] - b[1]) for a, b in zip(nxt, prev)), default=0.0)
            if delta < tol:
                return v
            if delta != delta or delta > 1e6:
                break
            prev = nxt
        raise NetworkSolveError(f"network fixed point did not converge in {max_iter} iterations")

    def solve_newton(
        self,
        current: Sequence[complex],
        buses: Sequence[int],
        dependent: Callable[[list[complex]], Sequence[tuple[int, complex]]],
        sensitivity: Callable[[list[complex]], Sequence[tuple[int, complex, complex]]],
        v0: Sequence[complex] | None = None,
        tol: float = 1e-8,
        max_iter: int = 30,
    ) -> list[complex]:
        """Same problem as :meth:`solve`, with Newton steps on the voltages of ``buses``.

        ``sensitivity(v)`` gives ``(bus, a, b)`` per dependent device such that
        its current moves by ``a*dV + b*conj(dV)``. Stops once the voltages
        implied by the dependent currents differ from the iterate by less
        than ``tol`` and returns the implied voltages.
        """
        base = self.solve_linear(current)
        n = self.n
        m = len(buses)
        v = list(v0) if v0 is not None else base[:]
        pos = {b: k for k, b in enumerate(buses)}
        for _ in range(max_iter):
            implied = base[:]
            for bus, i in dependent(v):
                col = self.zcols[bus]
                for r in range(n):
                    implied[r] += col[r] * i
            resid = [v[b] - implied[b] for b in buses]
            err = max(abs(e) for e in resid)
            if err < tol:
                return implied
            if err != err or err > 1e6:
                break
            # accumulate dI/dV per dependent bus
            a_bus = [0j] * m
            b_bus = [0j] * m
            for bus, a, b in sensitivity(v):
                a_bus[pos[bus]] += a
                b_bus[pos[bus]] += b
            if m == 1:
                z = self.z[buses[0]][buses[0]]
                p = 1.0 - z * a_bus[0]
                q = -z * b_bus[0]
                r0 = resid[0]
                det = abs(p) ** 2 - abs(q) ** 2
                if det == 0.0:
                    break
                dv = [(-r0 * p.conjugate() + q * r0.conjugate()) / det]
            else:
                jac = np.zeros((2 * m, 2 * m))
                rhs = np.empty(2 * m)
                for r, br in enumerate(buses):
                    rhs[2 * r], rhs[2 * r + 1] = -resid[r].real, -resid[r].imag
                    for c, bc in enumerate(buses):
                        z = self.z[br][bc]
                        p = (1.0 if r == c else 0.0) - z * a_bus[c]
                        q = -z * b_bus[c]
                        # d(res) = p dv + q conj(dv), split into real parts
                        jac[2 * r, 2 * c] = p.real + q.real
                        jac[2 * r, 2 * c + 1] = -p.imag + q.imag
                        jac[2 * r + 1, 2 * c] = p.imag + q.imag
                        jac[2 * r + 1, 2 * c + 1] = p.real - q.real
                try:
                    sol = np.linalg.solve(jac, rhs)
                except np.linalg.LinAlgError:
                    break
                dv = [complex(sol[2 * k], sol[2 * k + 1]) for k in range(m)]
            v = implied
            for k, b in enumerate(buses):
                v[b] = v[b] + resid[k] + dv[k]
        raise NetworkSolveError(f"network Newton solve did not converge in {max_iter} iterations")


def solve_network(
    adm: AdmittanceMatrix,
    injections: Sequence[complex] | Callable[[np.ndarray], np.ndarray] | None = None,
    fixed_sources: Sequence[tuple[int, complex, complex]] = (),
    v0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> np.ndarray:
    """Solve ``Y V = I(V)`` for the bus voltage phasors.

    ``fixed_sources`` are voltage-stiff devices given as ``(bus, E, z)``: an
    internal EMF behind series impedance, folded into ``Y`` as a Norton
    equivalent. ``injections`` is either a constant vector of bus current
    injections or a callable returning the injections for a voltage guess
    (voltage-dependent loads); the latter is iterated to a fixed point.
    """
    if not fixed_sources:
        raise NetworkSolveError("no voltage-stiff source in the network")
    n = adm.dimension
    i_src = [0j] * n
    shunts = []
    for bus, e, z in fixed_sources:
        y = 1.0 / z
        shunts.append((bus, y))
        i_src[bus] += y * e
    net = NortonNetwork(adm.matrix, shunts)

    if injections is None:
        return np.array(net.solve_linear(i_src))
    if not callable(injections):
        inj = np.asarray(injections, dtype=complex)
        return np.array(net.solve_linear([a + b for a, b in zip(i_src, inj.tolist())]))

    def dependent(v):
        return list(enumerate(np.asarray(injections(np.array(v)), dtype=complex).tolist()))

    start = None if v0 is None else np.asarray(v0, dtype=complex).tolist()
    return np.array(net.solve(i_src, dependent, start, tol, max_iter))
