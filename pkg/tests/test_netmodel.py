import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtsdyn.netmodel import (
    AdmittanceMatrix,
    Branch,
    Bus,
    NetworkError,
    NetworkModel,
    NetworkSolveError,
    PowerFlowError,
    apply_branch_event,
    build_admittance,
    solve_network,
    solve_power_flow,
)

from support import two_bus_network, two_bus_voltage


def test_two_bus_admittance_entries():
    Y = build_admittance(two_bus_network(x=0.1)).matrix
    assert Y[0, 1] == pytest.approx(10j)
    assert Y[1, 0] == pytest.approx(10j)
    assert Y[0, 0] == pytest.approx(-10j)
    assert Y[1, 1] == pytest.approx(-10j)


def test_empty_branch_set_gives_zero_matrix():
    net = NetworkModel([Bus("A", kind="slack"), Bus("B"), Bus("C")], [], 100.0)
    Y = build_admittance(net).matrix
    assert Y.shape == (3, 3)
    assert not Y.any()


def test_off_nominal_tap_scales_from_side():
    plain = build_admittance(two_bus_network(x=0.1)).matrix
    tapped = build_admittance(two_bus_network(x=0.1, tap=1.05)).matrix
    assert tapped[0, 0] == pytest.approx(plain[0, 0] / 1.05**2)
    assert tapped[0, 1] == pytest.approx(plain[0, 1] / 1.05)
    assert tapped[1, 1] == pytest.approx(plain[1, 1])


def parallel_pair():
    return NetworkModel(
        [Bus("A", kind="slack"), Bus("B")],
        [Branch("L1", "A", "B", x=0.2), Branch("L2", "A", "B", x=0.2)],
        100.0,
    )


def test_tripping_one_of_two_parallel_lines_halves_coupling():
    net = parallel_pair()
    before = build_admittance(net).matrix[0, 1]
    after = build_admittance(apply_branch_event(net, "L2", False)).matrix[0, 1]
    assert after == pytest.approx(before / 2)


def test_tripping_an_open_branch_is_idempotent():
    once = apply_branch_event(parallel_pair(), "L2", False)
    twice = apply_branch_event(once, "L2", False)
    np.testing.assert_array_equal(build_admittance(once).matrix, build_admittance(twice).matrix)
    assert not twice.branch("L2").in_service


def test_tripping_only_path_raises_islanding():
    net = apply_branch_event(parallel_pair(), "L1", False)
    with pytest.raises(NetworkError, match="island"):
        apply_branch_event(net, "L2", False)


def test_switching_does_not_mutate_input():
    net = parallel_pair()
    apply_branch_event(net, "L1", False)
    assert net.branch("L1").in_service


def test_flat_no_load_power_flow():
    net = NetworkModel([Bus("S", kind="slack"), Bus("R")], [Branch("SR", "S", "R", x=0.1)], 100.0)
    sol = solve_power_flow(net)
    np.testing.assert_allclose(sol.v_mag, [1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(sol.v_ang, [0.0, 0.0], atol=1e-14)
    assert sol.iterations == 0


def test_two_bus_matches_closed_form():
    sol = solve_power_flow(two_bus_network(100.0, 50.0, 0.1))
    oracle = two_bus_voltage(1.0, 0.5, 0.1)
    assert oracle == pytest.approx(0.94122, abs=1e-5)
    assert abs(sol.v_mag[1] - oracle) < 1e-8


def test_load_past_nose_point_fails_to_converge():
    # lossless two-bus at fixed power factor q = r p: the quadratic's discriminant
    # vanishes at p = (sqrt(1 + r^2) - r) / (2 x)
    x, ratio = 0.1, 0.5
    p_max = (math.sqrt(1 + ratio**2) - ratio) / (2 * x)
    assert two_bus_voltage(0.999 * p_max, 0.999 * ratio * p_max, x) is not None
    assert two_bus_voltage(1.001 * p_max, 1.001 * ratio * p_max, x) is None
    solve_power_flow(two_bus_network(95.0 * p_max, 95.0 * ratio * p_max, x))
    with pytest.raises(PowerFlowError):
        solve_power_flow(two_bus_network(105.0 * p_max, 105.0 * ratio * p_max, x))


def test_solve_network_machine_without_load():
    adm = AdmittanceMatrix(("G",), np.zeros((1, 1), dtype=complex))
    v = solve_network(adm, None, [(0, 1.0 + 0j, 0.3j)])
    assert v[0] == pytest.approx(1.0 + 0j)


def test_solve_network_constant_current_load():
    adm = AdmittanceMatrix(("G",), np.zeros((1, 1), dtype=complex))
    load = -1.0 + 0j  # 1 pu drawn from the bus
    v = solve_network(adm, [load], [(0, 1.0 + 0j, 0.3j)])
    assert v[0] == pytest.approx(1.0 - 0.3j * 1.0)


def test_solve_network_divergence_under_heavy_constant_power():
    adm = AdmittanceMatrix(("G",), np.zeros((1, 1), dtype=complex))

    def const_power(s):
        return lambda v: -np.conj(s / v)

    v_ok = solve_network(adm, const_power(1.0), [(0, 1.0 + 0j, 0.3j)])
    assert abs(v_ok[0]) > 0.5
    # a unity power factor load behind jx peaks at E^2 / (2 x)
    with pytest.raises(NetworkSolveError):
        solve_network(adm, const_power(1.2 / (2 * 0.3)), [(0, 1.0 + 0j, 0.3j)])


def test_solve_network_needs_stiff_source():
    adm = AdmittanceMatrix(("G",), np.zeros((1, 1), dtype=complex))
    with pytest.raises(NetworkSolveError):
        solve_network(adm, [0j], [])


def test_bad_bus_and_branch_data_rejected():
    with pytest.raises(NetworkError):
        Bus("X", kind="swing")
    with pytest.raises(NetworkError):
        Branch("B", "A", "C", x=0.0)
    with pytest.raises(NetworkError):
        Branch("B", "A", "C", tap_ratio=1.5)


lines = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 3), st.floats(0.01, 1.0), st.floats(0.8, 1.2)),
    min_size=1, max_size=8,
).map(lambda ls: [t for t in ls if t[0] != t[1]])


@settings(max_examples=60, deadline=None)
@given(lines)
def test_admittance_is_symmetric_and_lossless(branch_data):
    buses = [Bus(f"B{i}", kind="slack" if i == 0 else "pq") for i in range(4)]
    branches = [Branch(f"L{k}", f"B{f}", f"B{t}", x=x, tap_ratio=a) for k, (f, t, x, a) in enumerate(branch_data)]
    Y = build_admittance(NetworkModel(buses, branches, 100.0)).matrix
    np.testing.assert_allclose(Y, Y.T, atol=1e-12)
    assert np.all(np.abs(Y.real) < 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 150.0), st.floats(-40.0, 60.0), st.floats(0.02, 0.2))
def test_power_flow_agrees_with_closed_form(p, q, x):
    oracle = two_bus_voltage(p / 100, q / 100, x)
    if oracle is None or oracle < 0.75:
        return
    sol = solve_power_flow(two_bus_network(p, q, x))
    assert abs(sol.v_mag[1] - oracle) < 1e-8
    # lossless line: slack supplies exactly the load
    assert sol.p_inj[0] == pytest.approx(p / 100, abs=1e-9)
