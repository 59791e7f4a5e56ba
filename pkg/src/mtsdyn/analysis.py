"""
Small-signal and signal-level analysis of simulation runs.

Eigen snapshots freeze the discrete configuration (taps, limiter status,
topology), locate the short-term equilibrium for that configuration and
linearize the continuous dynamics there by central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import JournalEntry
from .netmodel import NetworkSolveError

HOPF_IMAG_FLOOR = 0.5  # rad/s
LIMIT_CYCLE_THRESHOLD = 1e-3
ENVELOPE_TOLERANCE = 0.10


class AnalysisError(Exception):
    pass


# ----------------------------------------------------------------------------
# phase plane


@dataclass
class PhaseTrace:
    channel_a: str
    channel_b: str
    times: np.ndarray
    samples: np.ndarray  # shape (n, 2)
    window: tuple[float, float]
    annotation_channel: str | None = None
    annotation: np.ndarray | None = None


def extract_phase_trace(ts, a: str, b: str, window: tuple[float, float] | None = None,
                        annotation: str | None = None) -> PhaseTrace:
    for name in (a, b) + ((annotation,) if annotation else ()):
        if name not in ts:
            raise AnalysisError(f"unknown channel {name!r}")
    t = ts.t
    if window is None:
        window = (float(t[0]), float(t[-1]))
    t0, t1 = window
    if t1 <= t0:
        raise AnalysisError("empty window")
    mask = ts.window(t0, t1)
    if not mask.any():
        raise AnalysisError("no samples inside the window")
    samples = np.column_stack([ts[a][mask], ts[b][mask]])
    ann = ts[annotation][mask] if annotation else None
    return PhaseTrace(a, b, t[mask], samples, (t0, t1), annotation, ann)


# ----------------------------------------------------------------------------
# linearization and spectra


def linearize_fast(system, x: np.ndarray, v_guess=None, rel: float = 1e-6, floor: float = 1e-8) -> np.ndarray:
    """Jacobian of the continuous dynamics with the discrete configuration frozen.

    The network is re-solved for every perturbed state, so algebraic
    variables are eliminated. Raises AnalysisError when a perturbed network
    solve fails, which signals proximity to a singular point.
    """
    try:
        return system.jacobian(np.asarray(x, dtype=float), v_guess, rel=rel, floor=floor, central=True)
    except NetworkSolveError as exc:
        raise AnalysisError(f"network solve failed during perturbation: {exc}") from exc


def eigen_spectrum(jacobian: np.ndarray) -> np.ndarray:
    """All eigenvalues, sorted by descending real part (ties: descending imaginary)."""
    a = np.asarray(jacobian, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AnalysisError("Jacobian must be square")
    if a.size == 0:
        return np.zeros(0, dtype=complex)
    try:
        ev = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError("eigenvalue iteration did not converge") from exc
    ev = np.asarray(ev, dtype=complex)
    order = np.lexsort((-ev.imag, -ev.real))
    return ev[order]


def short_term_equilibrium(system, x0: np.ndarray, v_guess=None, tol: float = 1e-9,
                           max_iter: int = 40, noise_floor: float = 1e-6) -> np.ndarray | None:
    """Damped Newton search for f(x) = 0 with the discrete state frozen.

    Returns None when no equilibrium is found near ``x0``. The network solve
    leaves a small residual that stiff integrators amplify, so a search that
    stalls below ``noise_floor`` counts as converged.
    """
    x = np.array(x0, dtype=float)
    try:
        f = system.f(x, v_guess)
    except NetworkSolveError:
        return None
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    for _ in range(max_iter):
        if norm < tol:
            return x
        try:
            J = system.jacobian(x, v_guess, central=False)
            dx = np.linalg.lstsq(J, -f, rcond=None)[0]
        except (NetworkSolveError, np.linalg.LinAlgError):
            return None
        lam = 1.0
        while lam > 1e-4:
            xn = x + lam * dx
            try:
                fn = system.f(xn, v_guess)
                nn = float(np.max(np.abs(fn)))
            except NetworkSolveError:
                nn = np.inf
            if nn < norm:
                break
            lam *= 0.5
        else:
            return x if norm < noise_floor else None
        x, f, norm = xn, fn, nn
    return x if norm < noise_floor else None


@dataclass
class Crossing:
    time: float
    kind: str  # "hopf" or "snb"
    imag: float
    direction: int  # +1 destabilizing, -1 restabilizing


@dataclass
class EigenScan:
    times: list[float] = field(default_factory=list)
    spectra: list[np.ndarray] = field(default_factory=list)
    equilibrium_found: list[bool] = field(default_factory=list)
    crossings: list[Crossing] = field(default_factory=list)

    @property
    def rightmost(self) -> list[complex]:
        """Rightmost eigenvalue per snapshot (NaN where no equilibrium was found)."""
        out = []
        for ok, sp in zip(self.equilibrium_found, self.spectra):
            out.append(complex(sp[0]) if ok and len(sp) else complex(np.nan, np.nan))
        return out

    @property
    def rightmost_complex_pair(self) -> list[complex]:
        """Rightmost eigenvalue with imaginary part above the Hopf floor, per snapshot."""
        out = []
        for ok, sp in zip(self.equilibrium_found, self.spectra):
            osc = [z for z in sp if z.imag > HOPF_IMAG_FLOOR] if ok else []
            out.append(complex(osc[0]) if osc else complex(np.nan, np.nan))
        return out

    def add(self, t: float, spectrum: np.ndarray | None) -> None:
        self.times.append(t)
        if spectrum is None:
            self.spectra.append(np.zeros(0, dtype=complex))
            self.equilibrium_found.append(False)
        else:
            self.spectra.append(spectrum)
            self.equilibrium_found.append(True)


def detect_crossings(scan: EigenScan) -> list[Crossing]:
    """Sign changes of the rightmost real part between adjacent snapshots.

    A snapshot whose equilibrium vanished after a found one counts as a
    saddle-node crossing placed at the later snapshot.
    """
    if len(scan.times) < 2:
        raise AnalysisError("at least two snapshots are required")
    out: list[Crossing] = []
    prev = None  # (time, eigenvalue)
    for t, ok, sp in zip(scan.times, scan.equilibrium_found, scan.spectra):
        if not ok or len(sp) == 0:
            if prev is not None and prev[1].real < 0:
                out.append(Crossing(t, "snb", 0.0, +1))
            prev = None
            continue
        lam = complex(sp[0])
        if prev is not None:
            t0, l0 = prev
            r0, r1 = l0.real, lam.real
            if (r0 < 0) != (r1 < 0) and r0 != r1:
                tc = t0 + (t - t0) * (0 - r0) / (r1 - r0)
                unstable = lam if r1 >= 0 else l0
                imag = abs(unstable.imag)
                kind = "hopf" if imag > HOPF_IMAG_FLOOR else "snb"
                out.append(Crossing(tc, kind, imag, +1 if r1 >= 0 else -1))
        prev = (t, lam)
    return out


class EigenScanner:
    """Engine observer taking snapshots every ``interval`` seconds and right
    after any step that produced events."""

    def __init__(self, interval: float = 5.0):
        if interval <= 0:
            raise ValueError("interval must be positive")
        self.interval = interval
        self.scan = EigenScan()
        self._next = 0.0
        self._x_eq: np.ndarray | None = None
        self.equilibria: list[np.ndarray | None] = []

    def __call__(self, sim, events) -> None:
        if sim.t < self._next - 1e-9 and not events:
            return
        if sim.t >= self._next - 1e-9:
            self._next += self.interval * (1 + int((sim.t - self._next + 1e-9) // self.interval))
        self.snapshot(sim)

    def snapshot(self, sim) -> None:
        system = sim.system
        x_eq = None
        for start in ([self._x_eq] if self._x_eq is not None else []) + [sim.x]:
            x_eq = short_term_equilibrium(system, start, sim.v)
            if x_eq is not None:
                break
        spectrum = None
        if x_eq is not None:
            try:
                spectrum = eigen_spectrum(linearize_fast(system, x_eq, sim.v))
                self._x_eq = x_eq
            except AnalysisError:
                x_eq = None
        self.equilibria.append(x_eq)
        self.scan.add(sim.t, spectrum)

    def result(self) -> EigenScan:
        if len(self.scan.times) >= 2:
            self.scan.crossings = detect_crossings(self.scan)
        return self.scan


# ----------------------------------------------------------------------------
# limit cycles


@dataclass
class LimitCycleReport:
    exists: bool
    amplitude: float  # peak to peak after detrending
    period: float
    window: tuple[float, float]
    channel: str = ""
    envelope_change: float = 0.0

    def as_text(self) -> str:
        return (f"limit_cycle exists={str(self.exists).lower()} channel={self.channel} "
                f"amplitude_pkpk={self.amplitude:.6g} period_s={self.period:.6g} "
                f"window={self.window[0]:.3f}-{self.window[1]:.3f}")


def _detrend(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    if len(t) < 2:
        return y - y.mean()
    tau = t - t[0]
    coef = np.polyfit(tau, y, 1)
    d = y - np.polyval(coef, tau)
    # A straight-line fit alone leaks part of an oscillation into the slope,
    # so refit the line together with the dominant sinusoid and strip only
    # the line.
    period = _zero_crossing_period(t, d)
    if period > 0:
        w = 2 * np.pi / period
        basis = np.column_stack([np.ones_like(tau), tau, np.sin(w * tau), np.cos(w * tau)])
        c = np.linalg.lstsq(basis, y, rcond=None)[0]
        d = y - c[0] - c[1] * tau
    return d


def _zero_crossing_period(t: np.ndarray, y: np.ndarray) -> float:
    s = np.signbit(y)
    idx = np.nonzero(s[1:] != s[:-1])[0]
    if len(idx) < 3:
        return 0.0
    tc = t[idx] - y[idx] * (t[idx + 1] - t[idx]) / (y[idx + 1] - y[idx])
    return 2.0 * float(np.mean(np.diff(tc)))


def limit_cycle_from_samples(t: np.ndarray, y: np.ndarray, threshold: float = LIMIT_CYCLE_THRESHOLD,
                             channel: str = "") -> LimitCycleReport:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    window = (float(t[0]), float(t[-1]))
    if len(t) < 16:
        raise AnalysisError("window too short")
    d = _detrend(t, y)
    amp = float(np.ptp(d))
    period = _zero_crossing_period(t, d)
    mid = t[0] + 0.5 * (t[-1] - t[0])
    q3 = t[0] + 0.75 * (t[-1] - t[0])
    a3 = np.ptp(d[(t >= mid) & (t < q3)]) if np.any((t >= mid) & (t < q3)) else 0.0
    a4 = np.ptp(d[t >= q3]) if np.any(t >= q3) else 0.0
    ref = max(a3, a4)
    change = abs(a4 - a3) / ref if ref > 0 else 0.0
    exists = amp > threshold and change < ENVELOPE_TOLERANCE and period > 0
    return LimitCycleReport(bool(exists), amp, period, window, channel, float(change))


def detect_limit_cycle(ts, channel: str, window: tuple[float, float] | None = None,
                       threshold: float = LIMIT_CYCLE_THRESHOLD,
                       expected_period: float | None = None) -> LimitCycleReport:
    """Sustained-oscillation test on one channel over ``window`` (default: last second)."""
    if channel not in ts:
        raise AnalysisError(f"unknown channel {channel!r}")
    t = ts.t
    if window is None:
        window = (float(t[-1]) - 1.0, float(t[-1]))
    t0, t1 = window
    if expected_period is not None and t1 - t0 < 5 * expected_period - 1e-12:
        raise AnalysisError("window shorter than five expected periods")
    mask = ts.window(t0, t1)
    if mask.sum() < 16:
        raise AnalysisError("window too short")
    return limit_cycle_from_samples(t[mask], ts[channel][mask], threshold, channel)


def default_oscillation_channel(ts) -> str:
    for name in ts.names:
        if name.endswith(".x1"):
            return name
    for name in ts.names:
        if name.startswith("V_"):
            return name
    raise AnalysisError("no channel suitable for oscillation detection")


def first_sustained_window(ts, channel: str, t_from: float, length: float = 1.0,
                           step: float = 5.0) -> LimitCycleReport | None:
    t_end = float(ts.t[-1])
    t0 = t_from
    while t0 + length <= t_end + 1e-9:
        rep = detect_limit_cycle(ts, channel, (t0, t0 + length))
        if rep.exists:
            return rep
        t0 += step
    return None


def oscillation_onset(ts, channel: str, t_from: float, event_times: Sequence[float] = (),
                      length: float = 1.0, step: float = 0.5, growth: float = 1.05,
                      threshold: float = LIMIT_CYCLE_THRESHOLD) -> float | None:
    """Start of the first pair of adjacent windows, free of discrete events,
    over which the oscillation envelope grows by more than ``growth``.

    Near a Hopf point a ringdown excited by a tap step decays very slowly and
    can pass a one-window persistence test. Growth between events cannot
    happen while the rightmost pair is still damped, so it marks the onset.
    """
    if channel not in ts:
        raise AnalysisError(f"unknown channel {channel!r}")
    t, y = ts.t, ts[channel]
    events = np.sort(np.asarray(list(event_times), dtype=float))
    t_end = float(t[-1])
    t0 = t_from
    while t0 + 2 * length <= t_end + 1e-9:
        t2 = t0 + 2 * length
        k = np.searchsorted(events, t0, side="left")
        if k < len(events) and events[k] <= t2:
            t0 = float(events[k]) + step
            continue
        m1 = (t >= t0) & (t < t0 + length)
        m2 = (t >= t0 + length) & (t <= t2)
        if m1.sum() >= 16 and m2.sum() >= 16:
            a1 = float(np.ptp(_detrend(t[m1], y[m1])))
            a2 = float(np.ptp(_detrend(t[m2], y[m2])))
            if a1 > threshold and a2 > growth * a1:
                return t0
        t0 += step
    return None


# ----------------------------------------------------------------------------
# verdict

SLOW_EVENT_KINDS = ("oel_limit", "tap_step", "cvr_activate")


def assess_run(ts, scan: EigenScan | None, journal: Sequence[JournalEntry], collapsed: bool = False,
               collapse_kind: str = "solve", channel: str | None = None):
    """Returns ``(verdict, final-window LimitCycleReport, crossings)``."""
    channel = channel or default_oscillation_channel(ts)
    final = None
    if len(ts) >= 16 and ts.t[-1] - ts.t[0] >= 1.0:
        final = detect_limit_cycle(ts, channel)
    crossings = scan.crossings if scan is not None else []
    slow_times = [e.time for e in journal if e.kind in SLOW_EVENT_KINDS]

    if collapsed:
        if collapse_kind == "divergence" and slow_times:
            return "s_lt1", final, crossings
        return "collapse", final, crossings

    hopf = [c for c in crossings if c.kind == "hopf" and c.direction > 0]
    if hopf:
        if first_sustained_window(ts, channel, hopf[0].time) is not None:
            return "s_lt3", final, crossings
    elif scan is None and final is not None and final.exists:
        return "s_lt3", final, crossings
    snb = [c for c in crossings if c.kind == "snb" and c.direction > 0]
    if snb and slow_times and min(slow_times) <= snb[0].time:
        return "s_lt1", final, crossings
    return "stable", final, crossings


def classify_instability(ts, scan: EigenScan | None, journal: Sequence[JournalEntry],
                         collapsed: bool = False, collapse_kind: str = "solve") -> str:
    """One of ``stable``, ``s_lt1``, ``s_lt3`` or ``collapse``."""
    return assess_run(ts, scan, journal, collapsed, collapse_kind)[0]
