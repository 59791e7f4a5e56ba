import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsdyn.analysis import (
    AnalysisError,
    Crossing,
    EigenScan,
    assess_run,
    detect_crossings,
    detect_limit_cycle,
    eigen_spectrum,
    extract_phase_trace,
    limit_cycle_from_samples,
    linearize_fast,
    oscillation_onset,
)
from mtsdyn.engine import Simulation, TimeSeries
from mtsdyn.events import JournalEntry

from support import linear_scenario


def series(t, **channels):
    ts = TimeSeries(list(channels))
    for k, tk in enumerate(t):
        ts.append(float(tk), [float(v[k]) for v in channels.values()])
    return ts


A3 = [[-1.0, 2.0, 0.0], [-2.0, -1.0, 0.5], [0.0, 0.3, -4.0]]


def test_linearization_recovers_known_matrix():
    sim = Simulation(linear_scenario(A3, [0.2, -0.1, 0.05]))
    J = linearize_fast(sim.system, sim.x, sim.v)
    np.testing.assert_allclose(J, A3, atol=1e-5)


def test_linearization_is_step_insensitive():
    sim = Simulation(linear_scenario(A3, [0.2, -0.1, 0.05]))
    a = linearize_fast(sim.system, sim.x, sim.v, rel=1e-6)
    b = linearize_fast(sim.system, sim.x, sim.v, rel=5e-7)
    assert np.max(np.abs(a - b)) < 1e-4


def test_spectrum_of_diagonal_matrix():
    ev = eigen_spectrum(np.diag([-1.0, -2.0, -3.0]))
    np.testing.assert_allclose(ev, [-1.0, -2.0, -3.0])


def test_spectrum_of_rotation():
    w = 2 * math.pi * 5
    ev = eigen_spectrum([[0.1, w], [-w, 0.1]])
    np.testing.assert_allclose(ev, [0.1 + 1j * w, 0.1 - 1j * w])


def test_empty_and_nonsquare():
    assert eigen_spectrum(np.zeros((0, 0))).size == 0
    with pytest.raises(AnalysisError):
        eigen_spectrum(np.zeros((2, 3)))


def mp_eigenvalues(a):
    mpmath.mp.dps = 40
    ev, _ = mpmath.eig(mpmath.matrix(a.tolist()))
    return [complex(z) for z in ev]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_spectrum_matches_high_precision_oracle(seed):
    a = np.random.default_rng(seed).standard_normal((10, 10))
    ours = list(eigen_spectrum(a))
    ref = mp_eigenvalues(a)
    assert len(ours) == len(ref) == 10
    for z in ref:
        k = int(np.argmin([abs(z - o) for o in ours]))
        assert abs(z - ours.pop(k)) < 1e-8
    # ordering contract
    back = eigen_spectrum(a)
    assert all(back[i].real >= back[i + 1].real - 1e-12 for i in range(9))


def scan_of(points):
    s = EigenScan()
    for t, lam in points:
        s.add(t, None if lam is None else np.array([lam, -10.0]))
    return s


def test_crossing_is_interpolated_between_snapshots():
    out = detect_crossings(scan_of([(0.0, -0.1 + 30j), (5.0, 0.1 + 30j)]))
    assert len(out) == 1
    assert out[0].time == pytest.approx(2.5)
    assert out[0].kind == "hopf" and out[0].direction == 1
    assert out[0].imag == pytest.approx(30.0)


def test_no_crossing_on_stable_path():
    assert detect_crossings(scan_of([(0.0, -0.3 + 30j), (5.0, -0.2 + 30j), (10.0, -0.1 + 30j)])) == []


def test_lost_equilibrium_is_a_saddle_node():
    out = detect_crossings(scan_of([(0.0, -0.01), (5.0, None)]))
    assert [(c.time, c.kind) for c in out] == [(5.0, "snb")]


def test_real_eigenvalue_crossing_is_saddle_node():
    out = detect_crossings(scan_of([(0.0, -0.2 + 0j), (5.0, 0.2 + 0j)]))
    assert out[0].kind == "snb"


def test_single_snapshot_rejected():
    with pytest.raises(AnalysisError):
        detect_crossings(scan_of([(0.0, -1.0)]))


def test_limit_cycle_amplitude_and_period():
    t = np.arange(0.0, 1.0 + 1e-9, 0.002)
    rep = limit_cycle_from_samples(t, 0.05 * np.sin(2 * math.pi * 12 * t))
    assert rep.exists
    assert rep.amplitude == pytest.approx(0.1, rel=0.01)
    assert rep.period == pytest.approx(1 / 12, rel=0.01)


def test_decaying_oscillation_is_not_a_limit_cycle():
    t = np.arange(0.0, 1.0 + 1e-9, 0.002)
    rep = limit_cycle_from_samples(t, 0.05 * np.exp(-3 * t) * np.sin(2 * math.pi * 12 * t))
    assert not rep.exists


def test_ramp_alone_is_not_a_limit_cycle():
    t = np.arange(0.0, 1.0 + 1e-9, 0.002)
    assert not limit_cycle_from_samples(t, 0.3 * t).exists


def test_window_must_hold_five_expected_periods():
    t = np.arange(0.0, 1.0 + 1e-9, 0.002)
    ts = series(t, y=np.sin(2 * math.pi * 2 * t))
    with pytest.raises(AnalysisError):
        detect_limit_cycle(ts, "y", (0.0, 1.0), expected_period=0.5)


def test_phase_trace_of_constant_channel_is_a_point():
    t = np.arange(0.0, 2.0, 0.01)
    tr = extract_phase_trace(series(t, a=np.full_like(t, 0.3), b=np.full_like(t, -0.2)), "a", "b")
    assert np.ptp(tr.samples, axis=0).max() == 0.0


def test_phase_trace_of_circle_closes():
    dt = 0.002
    t = np.arange(0.0, 1.0 + 1e-9, dt)
    w = 2 * math.pi
    tr = extract_phase_trace(series(t, a=np.cos(w * t), b=np.sin(w * t)), "a", "b", (0.0, 1.0))
    gap = np.linalg.norm(tr.samples[-1] - tr.samples[0])
    assert gap < w * dt
    r = np.linalg.norm(tr.samples, axis=1)
    np.testing.assert_allclose(r, 1.0, atol=1e-12)


def test_phase_trace_rejects_bad_input():
    t = np.arange(0.0, 1.0, 0.01)
    ts = series(t, a=t, b=t)
    with pytest.raises(AnalysisError):
        extract_phase_trace(ts, "a", "nope")
    with pytest.raises(AnalysisError):
        extract_phase_trace(ts, "a", "b", (0.5, 0.5))


# verdicts on synthetic records


def _osc_series(onset):
    t = np.arange(0.0, 60.0, 0.002)
    y = np.where(t >= onset, 0.5 * np.sin(2 * math.pi * 5 * t), 0.0)
    return series(t, **{"ibr.x1": y})


def test_hopf_with_sustained_window_is_small_signal():
    scan = EigenScan(crossings=[Crossing(20.0, "hopf", 31.0, 1)])
    verdict, final, _ = assess_run(_osc_series(25.0), scan, [])
    assert verdict == "s_lt3"
    assert final.exists


def test_hopf_without_oscillation_is_not_reported():
    scan = EigenScan(crossings=[Crossing(20.0, "hopf", 31.0, 1)])
    assert assess_run(_osc_series(1e9), scan, [])[0] == "stable"


def test_saddle_node_after_slow_events_is_long_term():
    scan = EigenScan(crossings=[Crossing(40.0, "snb", 0.0, 1)])
    journal = [JournalEntry(30.0, "tap_step", "ltc=x;step=-1")]
    assert assess_run(_osc_series(1e9), scan, journal)[0] == "s_lt1"
    # without slow events the same saddle-node is not attributed to them
    assert assess_run(_osc_series(1e9), scan, [])[0] == "stable"


def test_collapse_verdicts():
    ts = _osc_series(1e9)
    slow = [JournalEntry(30.0, "oel_limit", "")]
    assert assess_run(ts, None, slow, collapsed=True, collapse_kind="divergence")[0] == "s_lt1"
    assert assess_run(ts, None, [], collapsed=True, collapse_kind="divergence")[0] == "collapse"


def test_onset_marks_the_start_of_growth():
    t = np.arange(0.0, 40.0, 0.002)
    env = np.where(t < 20.0, 0.2 * np.exp(-0.5 * (t % 10.0)), 0.01 * np.exp(0.3 * (t - 20.0)))
    ts = series(t, y=env * np.sin(2 * math.pi * 4 * t))
    onset = oscillation_onset(ts, "y", 1.0, event_times=[10.0, 20.0])
    assert onset is not None and 20.0 < onset <= 21.0


def test_ringdowns_between_events_have_no_onset():
    t = np.arange(0.0, 40.0, 0.002)
    y = 0.2 * np.exp(-0.05 * (t % 10.0)) * np.sin(2 * math.pi * 4 * t)
    assert oscillation_onset(series(t, y=y), "y", 1.0, event_times=[10.0, 20.0, 30.0]) is None
    # the same record without event information shows spurious growth at the kicks
    assert oscillation_onset(series(t, y=y), "y", 1.0) is not None
