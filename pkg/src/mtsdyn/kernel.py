"""
Compiled fast path for the time-stepping loop.

The device classes remain the reference models. This module packs a bound
:class:`~mtsdyn.engine.System` into flat arrays and evaluates the same
equations inside numba-compiled functions, so a whole trapezoidal step
(predictor, quasi-Newton iterations, network solves) runs without returning
to the interpreter. ``tests/test_kernel.py`` checks the packed right-hand
side against the device classes.

Only configurations the kernel knows are accepted. When
:meth:`CompiledSystem.supports` says no, or numba is missing, the engine
falls back to the Python path.
"""

from __future__ import annotations

import math

import numpy as np

try:  # numba is optional; without it the engine uses the Python path
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

from .ibr_gfl import PLL_ANTIWINDUP_T, REGULATOR_ANTIWINDUP_T, GridFollowingIBR
from .ibr_gfm import E_MAX, E_MIN, GridFormingIBR
from .machines import OMEGA_BASE, InfiniteSource, SynchronousMachine
from .slowdyn import ExponentialLoad

MACHINE, GFL, GFM, SOURCE, LOAD = 0, 1, 2, 3, 4
N_PARAMS = 24

STEP_OK, STEP_FAILED, STEP_STALLED = 0, 1, 2


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# ----------------------------------------------------------------------------
# device equations


@_jit
def _clip(a, lo, hi):
    return lo if a < lo else (hi if a > hi else a)


@_jit
def _gfm_current(x, o, prm, v):
    """Limited GFM output current in device pu."""
    e_mag = _clip(prm[8] + prm[2] * (prm[7] - x[o + 2]), E_MIN_K, E_MAX_K)
    th = x[o]
    e = complex(e_mag * math.cos(th), e_mag * math.sin(th))
    i = (e - v) / complex(0.0, prm[4])
    mag = abs(i)
    if mag > prm[5]:
        i = i * (prm[5] / mag)
    return i


@_jit
def _device_current(kind, x, o, prm, v):
    if kind == MACHINE:
        d = x[o]
        e = complex(x[o + 3], x[o + 2]) * complex(0.0, -1.0) * complex(math.cos(d), math.sin(d))
        return prm[0] * e / complex(0.0, prm[3])
    if kind == GFL:
        x2 = x[o + 1]
        return complex(x[o + 2], -x[o + 3]) * complex(math.cos(x2), math.sin(x2)) * prm[0]
    if kind == GFM:
        y = prm[0] / complex(0.0, prm[4])
        return _gfm_current(x, o, prm, v) * prm[0] + y * v
    if kind == SOURCE:
        return complex(prm[0], prm[1]) / complex(0.0, prm[2])
    # exponential load
    vm = abs(v)
    if vm == 0.0:
        return 0j
    y = complex(prm[0], prm[1])
    r = vm / prm[6]
    s = complex(prm[2] * r ** prm[4], prm[3] * r ** prm[5])
    return y * v - (s / v).conjugate()


@_jit
def _device_sensitivity(kind, x, o, prm, v):
    """(a, b) with dI = a dV + b conj(dV)."""
    if kind == LOAD:
        vm = abs(v)
        y = complex(prm[0], prm[1])
        if vm == 0.0:
            return y, 0j
        r = vm / prm[6]
        s_conj = complex(prm[2] * r ** prm[4], -prm[3] * r ** prm[5])
        c = complex(prm[4] * prm[2] * r ** prm[4], -prm[5] * prm[3] * r ** prm[5]) / vm
        vc = v.conjugate()
        a = y - c / (2.0 * vm)
        b = -(c * v / (2.0 * vm * vc) - s_conj / (vc * vc))
        return a, b
    h = 1e-7 * max(abs(v), 1.0)
    i0 = _device_current(kind, x, o, prm, v)
    d_re = (_device_current(kind, x, o, prm, v + h) - i0) / h
    d_im = (_device_current(kind, x, o, prm, v + complex(0.0, h)) - i0) / h
    return 0.5 * (d_re - 1j * d_im), 0.5 * (d_re + 1j * d_im)


@_jit
def _device_derivatives(kind, x, o, prm, v, out):
    if kind == MACHINE:
        d, w, eq, ed = x[o], x[o + 1], x[o + 2], x[o + 3]
        vdq = v * complex(0.0, 1.0) * complex(math.cos(d), -math.sin(d))
        i_d = (eq - vdq.imag) / prm[3]
        i_q = (vdq.real - ed) / prm[4]
        pss = 0.0
        if prm[16] != 0.0:
            xw, xll = x[o + 6], x[o + 7]
            u = prm[16] * (w - xw)
            pss = _clip(xll + (prm[18] / prm[19]) * (u - xll), -0.1, 0.1)
            out[o + 6] = (w - xw) / prm[17]
            out[o + 7] = (u - xll) / prm[19]
        target = prm[9] * (prm[20] - abs(v) + pss)
        if prm[22] != 0.0 and target > prm[23]:
            target = prm[23]
        out[o + 4] = (_clip(target, prm[11], prm[12]) - x[o + 4]) / prm[10]
        efd = _clip(x[o + 4], prm[11], prm[12])
        gov_target = _clip(prm[21] - w / prm[13], 0.0, prm[15])
        out[o + 5] = (gov_target - x[o + 5]) / prm[14]
        pm = _clip(x[o + 5], 0.0, prm[15])
        pe = vdq.real * i_d + vdq.imag * i_q
        out[o] = OMEGA_BASE_K * w
        out[o + 1] = (pm - pe - prm[8] * w) / (2.0 * prm[7])
        out[o + 2] = (efd - eq - (prm[1] - prm[3]) * i_d) / prm[5]
        out[o + 3] = (-ed + (prm[2] - prm[4]) * i_q) / prm[6]
    elif kind == GFL:
        x1, x2, ip, iq = x[o], x[o + 1], x[o + 2], x[o + 3]
        rot = complex(math.cos(x2), -math.sin(x2))
        e = (v * rot).imag
        vm = abs(v)
        has_xq = prm[6] != 0.0
        x_q = x[o + 4] if has_xq else prm[12]
        q = 0.0
        if prm[7] != 0.0:
            inj = complex(ip, -iq) * complex(math.cos(x2), math.sin(x2))
            q = (v * inj.conjugate()).imag
        err = prm[11] - vm - prm[7] * q
        iq_raw = x_q + prm[5] * err
        ip_raw = prm[10] / max(vm, 0.1)
        i_max = prm[4]
        if prm[8] == 0.0:
            iq_cmd = _clip(iq_raw, -i_max, i_max)
            room = math.sqrt(max(i_max * i_max - iq_cmd * iq_cmd, 0.0))
            ip_cmd = _clip(ip_raw, -room, room)
        else:
            ip_cmd = _clip(ip_raw, -i_max, i_max)
            room = math.sqrt(max(i_max * i_max - ip_cmd * ip_cmd, 0.0))
            iq_cmd = _clip(iq_raw, -room, room)
        w_max = prm[9]
        dx1 = prm[2] * e
        wdev = prm[1] * e + x1
        if math.isinf(w_max):
            out[o] = dx1
            out[o + 1] = wdev
        else:
            out[o] = dx1 - (x1 - _clip(x1, -w_max, w_max)) / PLL_AW_K
            out[o + 1] = _clip(wdev, -w_max, w_max)
        out[o + 2] = (ip_cmd - ip) / prm[3]
        out[o + 3] = (iq_cmd - iq) / prm[3]
        if has_xq:
            out[o + 4] = prm[6] * err - (iq_raw - iq_cmd) / REG_AW_K
    elif kind == GFM:
        i = _gfm_current(x, o, prm, v)
        s = v * i.conjugate()
        out[o] = OMEGA_BASE_K * prm[1] * (prm[6] - x[o + 1])
        out[o + 1] = (s.real - x[o + 1]) / prm[3]
        out[o + 2] = (s.imag - x[o + 2]) / prm[3]


# constants captured by the compiled functions
OMEGA_BASE_K = OMEGA_BASE
PLL_AW_K = PLL_ANTIWINDUP_T
REG_AW_K = REGULATOR_ANTIWINDUP_T
E_MIN_K = E_MIN
E_MAX_K = E_MAX


# ----------------------------------------------------------------------------
# network and right-hand side


@_jit
def _network(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol, max_iter):
    """Bus voltages for states ``x``; returns (v, ok)."""
    n = z.shape[0]
    nd = kinds.shape[0]
    base = np.zeros(n, dtype=np.complex128)
    for k in range(nd):
        if not dep[k]:
            i = _device_current(kinds[k], x, offs[k], prm[k], 0j)
            if i != 0j:
                b = buses[k]
                for r in range(n):
                    base[r] += z[r, b] * i
    m = dep_buses.shape[0]
    if m == 0:
        return base, True
    v = v_guess.copy()
    implied = np.empty(n, dtype=np.complex128)
    resid = np.empty(m, dtype=np.complex128)
    a_bus = np.empty(m, dtype=np.complex128)
    b_bus = np.empty(m, dtype=np.complex128)
    for _ in range(max_iter):
        for r in range(n):
            implied[r] = base[r]
        for k in range(nd):
            if dep[k]:
                b = buses[k]
                i = _device_current(kinds[k], x, offs[k], prm[k], v[b])
                for r in range(n):
                    implied[r] += z[r, b] * i
        err = 0.0
        for j in range(m):
            resid[j] = v[dep_buses[j]] - implied[dep_buses[j]]
            err = max(err, abs(resid[j]))
        if err < tol:
            return implied.copy(), True
        if not err < 1e6:
            return implied.copy(), False
        a_bus[:] = 0j
        b_bus[:] = 0j
        for k in range(nd):
            if dep[k]:
                b = buses[k]
                a, bb = _device_sensitivity(kinds[k], x, offs[k], prm[k], v[b])
                for j in range(m):
                    if dep_buses[j] == b:
                        a_bus[j] += a
                        b_bus[j] += bb
        jac = np.zeros((2 * m, 2 * m))
        rhs = np.empty(2 * m)
        for r in range(m):
            rhs[2 * r] = -resid[r].real
            rhs[2 * r + 1] = -resid[r].imag
            for c in range(m):
                zz = z[dep_buses[r], dep_buses[c]]
                p = (1.0 if r == c else 0.0) - zz * a_bus[c]
                q = -zz * b_bus[c]
                jac[2 * r, 2 * c] = p.real + q.real
                jac[2 * r, 2 * c + 1] = -p.imag + q.imag
                jac[2 * r + 1, 2 * c] = p.imag + q.imag
                jac[2 * r + 1, 2 * c + 1] = p.real - q.real
        sol = np.linalg.solve(jac, rhs)
        for r in range(n):
            v[r] = implied[r]
        for j in range(m):
            b = dep_buses[j]
            v[b] = v[b] + resid[j] + complex(sol[2 * j], sol[2 * j + 1])
    return implied.copy(), False


@_jit
def _rhs(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol):
    v, ok = _network(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol, 30)
    f = np.zeros(x.shape[0])
    for k in range(kinds.shape[0]):
        _device_derivatives(kinds[k], x, offs[k], prm[k], v[buses[k]], f)
    return f, v, ok


@_jit
def _jacobian(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol, f0):
    n = x.shape[0]
    jac = np.empty((n, n))
    xp = x.copy()
    for i in range(n):
        h = max(1e-6 * abs(x[i]), 1e-8)
        xp[i] = x[i] + h
        fp, _, ok = _rhs(xp, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol)
        xp[i] = x[i]
        if not ok:
            return jac, False
        for r in range(n):
            jac[r, i] = (fp[r] - f0[r]) / h
    return jac, True


@_jit
def _iteration_inverse(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol, h):
    f0, v0, ok = _rhs(x, kinds, buses, offs, prm, dep, z, dep_buses, v_guess, tol)
    n = x.shape[0]
    if not ok:
        return np.eye(n), False
    a, ok = _jacobian(x, kinds, buses, offs, prm, dep, z, dep_buses, v0, tol, f0)
    if not ok:
        return np.eye(n), False
    m = np.eye(n) - 0.5 * h * a
    return np.linalg.inv(m), True


@_jit
def _broyden(jinv, s, y):
    smax = 0.0
    for i in range(s.shape[0]):
        smax = max(smax, abs(s[i]))
    if smax < 1e-11:
        return
    hy = jinv @ y
    sh = s @ jinv
    denom = sh @ y
    scale = math.sqrt((s @ s) * (y @ y))
    if denom == 0.0 or abs(denom) < 1e-14 * scale:
        return
    jinv += np.outer(s - hy, sh) / denom


@_jit
def _trap_step(x0, f0, v0, h, jinv, f_prev, use_prev, fresh, newton_tol, max_iter, stall_iter,
               kinds, buses, offs, prm, dep, z, dep_buses, net_tol):
    """One trapezoidal step. Returns (status, x1, f1, v1, iterations)."""
    n = x0.shape[0]
    if use_prev:
        x = x0 + h * (1.5 * f0 - 0.5 * f_prev)
    else:
        x = x0 + h * f0
    base = x0 + 0.5 * h * f0
    v = v0.copy()
    r_prev = np.zeros(n)
    dx = np.zeros(n)
    for it in range(max_iter):
        f, v, ok = _rhs(x, kinds, buses, offs, prm, dep, z, dep_buses, v, net_tol)
        if not ok:
            return STEP_FAILED, x, f, v, it + 1
        r = x - base - 0.5 * h * f
        if it > 0:
            _broyden(jinv, -dx, r - r_prev)
        dx = jinv @ r
        r_prev = r
        x = x - dx
        err = 0.0
        for i in range(n):
            err = max(err, abs(dx[i]))
        if not err < 1e3:
            return STEP_FAILED, x, f, v, it + 1
        if err < newton_tol:
            return STEP_OK, x, f, v, it + 1
        if it >= stall_iter and not fresh:
            return STEP_STALLED, x, f, v, it + 1
    return STEP_FAILED, x, f, v, max_iter


# ----------------------------------------------------------------------------
# packing


def _pack_device(d) -> tuple[int, list[float]] | None:
    if isinstance(d, SynchronousMachine):
        p = d.params
        if d.voltage_dependent:
            return None
        limiting = 1.0 if d.oel.status == "limiting" else 0.0
        return MACHINE, [d.scale, p.xd, p.xq, p.xd_p, p.xq_p, p.td0_p, p.tq0_p, p.h, p.d, p.ka, p.ta,
                         p.efd_min, p.efd_max, p.droop_r, p.t_gov, p.p_max, p.kpss, p.tw, p.t1, p.t2,
                         d.avr_v_ref, d.p_ref, limiting, d.oel.ifd_limit]
    if isinstance(d, GridFollowingIBR):
        p = d.params
        return GFL, [d.scale, d.kp, d.ki, p.t_g, p.i_max, p.kqp, p.kqi, p.kc,
                     0.0 if p.priority == "q_priority" else 1.0, p.w_max, d.p_ref, d.v_ref, d.x_q_fixed]
    if isinstance(d, GridFormingIBR):
        p = d.params
        return GFM, [d.scale, p.mp, p.mq, p.t_f, p.x_s, p.i_max, d.p_set, d.q_set, d.v_set]
    if isinstance(d, InfiniteSource):
        return SOURCE, [d.emf.real, d.emf.imag, d.x_source]
    if isinstance(d, ExponentialLoad):
        return LOAD, [d._y.real, d._y.imag, d._p, d._q, d.alpha, d.beta, d.load.v0]
    return None


class CompiledSystem:
    """Flat-array snapshot of a :class:`System` for the compiled step.

    Rebuild it with :meth:`refresh` whenever the network or any device
    parameter changes (events, custom parameter edits).
    """

    def __init__(self, system):
        self.system = system
        self.refresh()

    @staticmethod
    def supports(system) -> bool:
        if numba is None:
            return False
        return all(type(d) in (SynchronousMachine, GridFollowingIBR, GridFormingIBR, InfiniteSource, ExponentialLoad)
                   and _pack_device(d) is not None for d in system.devices)

    def refresh(self) -> None:
        sysm = self.system
        nd = len(sysm.devices)
        self.kinds = np.empty(nd, dtype=np.int64)
        self.buses = np.empty(nd, dtype=np.int64)
        self.offs = np.array(sysm.offsets, dtype=np.int64)
        self.dep = np.empty(nd, dtype=np.bool_)
        self.prm = np.zeros((nd, N_PARAMS))
        for k, d in enumerate(sysm.devices):
            packed = _pack_device(d)
            if packed is None:
                raise ValueError(f"device {d.name} is not supported by the compiled path")
            kind, values = packed
            self.kinds[k] = kind
            self.buses[k] = d.k
            self.dep[k] = d.voltage_dependent
            self.prm[k, :len(values)] = values
        self.z = np.array(sysm.solver.z, dtype=np.complex128)
        self.dep_buses = np.array(sorted({d.k for d in sysm.devices if d.voltage_dependent}), dtype=np.int64)

    def _args(self):
        return self.kinds, self.buses, self.offs, self.prm, self.dep, self.z, self.dep_buses

    def rhs(self, x: np.ndarray, v_guess: np.ndarray, tol: float):
        return _rhs(np.asarray(x, dtype=float), *self._args(), np.asarray(v_guess, dtype=np.complex128), tol)

    def iteration_inverse(self, x: np.ndarray, v_guess: np.ndarray, tol: float, h: float):
        return _iteration_inverse(np.asarray(x, dtype=float), *self._args(),
                                  np.asarray(v_guess, dtype=np.complex128), tol, h)

    def step(self, x0, f0, v0, h, jinv, f_prev, use_prev, fresh, newton_tol, max_iter, stall_iter, net_tol):
        fp = f_prev if f_prev is not None else f0
        return _trap_step(x0, f0, np.asarray(v0, dtype=np.complex128), h, jinv, fp, use_prev, fresh,
                          newton_tol, max_iter, stall_iter, *self._args(), net_tol)
