import json

import numpy as np
import pytest

from neurogrid.grid.cases import BUILTIN_CASES, CaseError, case_from_dict, load_case, save_case
from neurogrid.grid.network import (
    Branch,
    Bus,
    NetworkError,
    NetworkEvent,
    NetworkModel,
    SingularNetworkError,
    apply_event,
    build_admittance,
    solve_network,
)
from neurogrid.grid.powerflow import PowerFlowError, newton_power_flow


def two_bus(load=(0.5, 0.1), x=0.1):
    return case_from_dict({
        "name": "two",
        "buses": [{"id": 1, "kind": "slack", "vm": 1.0}, {"id": 2, "kind": "PQ"}],
        "branches": [{"from": 1, "to": 2, "r": 0.0, "x": x}],
        "loads": [{"bus": 2, "p": load[0], "q": load[1]}] if load else [],
    })


def gauss_seidel_two_bus(p, q, x, tol=1e-15):
    y = 1 / (1j * x)
    V1, V2 = 1.0 + 0j, 1.0 + 0j
    S2 = -complex(p, q)
    for _ in range(10000):
        new = (np.conj(S2) / np.conj(V2) + y * V1) / y
        if abs(new - V2) < tol:
            return new
        V2 = new
    raise AssertionError("oracle did not converge")


# --- admittance ---------------------------------------------------------------------


def test_empty_admittance():
    Y = build_admittance([Bus(1), Bus(2)], [])
    assert Y.nnz == 0 and Y.shape == (2, 2)


def test_single_branch_admittance():
    Y = build_admittance([Bus(1), Bus(2)], [Branch(1, 2, 0.0, 0.1)]).toarray()
    assert np.allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_shunt_is_additive():
    buses, branches = [Bus(1), Bus(2), Bus(3)], [Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.02, 0.2, b=0.1)]
    Y0 = build_admittance(buses, branches).toarray()
    extra = np.zeros(3, complex)
    extra[1] = -50j
    Y1 = build_admittance(buses, branches, extra).toarray()
    diff = Y1 - Y0
    assert diff[1, 1] == pytest.approx(-50j)
    diff[1, 1] = 0
    assert not np.any(diff)


def test_tap_and_charging_stamps():
    br = Branch(1, 2, 0.0, 0.2, b=0.4, tap=1.1)
    yff, yft, ytf, ytt = br.stamps()
    y = 1 / 0.2j
    assert yff == pytest.approx((y + 0.2j) / 1.21)
    assert yft == pytest.approx(-y / 1.1) and ytf == yft
    assert ytt == pytest.approx(y + 0.2j)


def test_zero_impedance_branch_rejected():
    with pytest.raises(NetworkError):
        Branch(1, 2, 0.0, 0.0)


def test_solve_identity_and_hand_case():
    V, _ = solve_network(np.eye(3, dtype=complex), np.array([1, 2j, -1]))
    assert np.allclose(V, [1, 2j, -1])
    # 2-bus line plus 1 p.u. shunts to ground at both ends makes Y invertible:
    # [[1-10j, 10j], [10j, 1-10j]] V = [1, -1]  ->  V1 = -V2 = 1 / (1 - 20j)
    Y = build_admittance([Bus(1, g_sh=1.0), Bus(2, g_sh=1.0)], [Branch(1, 2, 0.0, 0.1)])
    V, _ = solve_network(Y, np.array([1.0, -1.0]))
    assert np.allclose(V, [1 / (1 - 20j), -1 / (1 - 20j)], atol=1e-14)
    assert np.max(np.abs(Y @ V - np.array([1.0, -1.0]))) <= 1e-10


def test_singular_matrix_names_pivot():
    with pytest.raises(SingularNetworkError) as err:
        solve_network(np.zeros((2, 2), complex), np.ones(2))
    assert err.value.pivot == 0
    Y = build_admittance([Bus(1), Bus(2)], [Branch(1, 2, 0.0, 0.1)])  # floating network
    with pytest.raises(SingularNetworkError):
        solve_network(Y, np.ones(2), bus_ids=[1, 2])


# --- events -------------------------------------------------------------------------


def test_fault_apply_clear_restores_y(ieee9):
    net = NetworkModel(ieee9.buses, ieee9.branches)
    Y0 = net.Y.toarray()
    apply_event(net, NetworkEvent(1.0, "fault_apply", bus=7))
    assert net.Y.toarray()[6, 6] != Y0[6, 6]
    apply_event(net, NetworkEvent(1.1, "fault_clear", bus=7))
    assert np.array_equal(net.Y.toarray(), Y0)


def test_branch_trip_isolates_two_bus():
    net = NetworkModel([Bus(1, "slack"), Bus(2)], [Branch(1, 2, 0.0, 0.1)])
    net.set_shunt("load", 2, 0.5 - 0.1j)
    net.solve(np.array([1.0, 0.0]))
    apply_event(net, NetworkEvent(0.5, "branch_trip", branch=0))
    with pytest.raises(SingularNetworkError):
        net.solve(np.array([1.0, 0.0]))


def test_load_scale_and_errors(ieee9):
    net = NetworkModel(ieee9.buses, ieee9.branches)
    net.set_shunt("load", 5, 0.9 - 0.3j)
    apply_event(net, NetworkEvent(1.0, "load_scale", bus=5, factor=1.5))
    assert net.shunt("load", 5) == pytest.approx(1.35 - 0.45j)
    with pytest.raises(NetworkError):
        apply_event(net, NetworkEvent(1.0, "load_scale", bus=4, factor=1.5))
    with pytest.raises(NetworkError):
        apply_event(net, NetworkEvent(1.0, "fault_clear", bus=4))
    with pytest.raises(NetworkError):
        NetworkEvent(1.0, "explode", bus=4)


def test_event_dict_round_trip():
    ev = NetworkEvent(1.25, "fault_apply", bus=3, admittance=-1e4j)
    back = NetworkEvent.from_dict(json.loads(json.dumps(ev.to_dict())))
    assert back == ev


# --- power flow ---------------------------------------------------------------------


def test_two_bus_matches_gauss_seidel():
    pf = newton_power_flow(two_bus())
    assert pf.mismatch <= 1e-8
    V2 = gauss_seidel_two_bus(0.5, 0.1, 0.1)
    assert abs(pf.voltage(2) - V2) <= 1e-8


def test_flat_profile_without_load():
    pf = newton_power_flow(two_bus(load=None))
    assert pf.iterations == 0
    assert np.allclose(pf.V, 1.0)


def test_infeasible_load_fails():
    with pytest.raises(PowerFlowError):
        newton_power_flow(two_bus(load=(1000.0, 0.0), x=0.5))


@pytest.mark.parametrize("name", BUILTIN_CASES)
def test_builtin_cases_converge(name):
    case = load_case(name)
    pf = newton_power_flow(case)
    assert pf.mismatch <= 1e-8
    S = pf.V * np.conj(build_admittance(case.buses, case.branches) @ pf.V)
    for g in case.generators:
        assert abs(abs(pf.voltage(g.bus)) - g.vset) < 1e-12
    # slack absorbs the losses: total generation exceeds total load
    load = sum(ld.p for ld in case.loads)
    gen = sum(pf.p_gen.values()) + sum(d.p for d in case.devices)
    assert gen > load
    assert abs(S.real.sum() - (gen - load)) < 1e-8


def test_rerun_from_solution_needs_no_iterations(ieee9):
    pf = newton_power_flow(ieee9)
    again = newton_power_flow(ieee9, v0=pf.V)
    assert again.iterations == 0


# --- case files ---------------------------------------------------------------------


def test_case_round_trip(tmp_path, ieee9_region):
    path = tmp_path / "c.json"
    save_case(ieee9_region, path)
    back = load_case(str(path))
    assert back.to_dict() == ieee9_region.to_dict()


def test_case_validation():
    good = two_bus().to_dict()
    with pytest.raises(CaseError):
        case_from_dict({**good, "colour": "blue"})
    bad = json.loads(json.dumps(good))
    bad["buses"][1]["kind"] = "slack"
    with pytest.raises(CaseError):
        case_from_dict(bad)
    bad = json.loads(json.dumps(good))
    bad["loads"][0]["bus"] = 9
    with pytest.raises(CaseError):
        case_from_dict(bad)
    with pytest.raises(CaseError):
        load_case("no_such_case")


def test_exciter_profiles(ieee9):
    case = ieee9.copy().set_exciter_profile(3, "limited")
    assert (case.exciter(3).efd_min, case.exciter(3).efd_max) == (0.0, 3.3)
    assert case.exciter(2).efd_max == float("inf")
    with pytest.raises(CaseError):
        case.set_exciter_profile(3, "turbo")


def test_without_region(ieee9_region):
    ext = ieee9_region.without_region("region")
    assert {b.id for b in ext.buses} == set(range(1, 10))
    assert all(g.bus != 13 for g in ext.generators)
    assert not ext.regions
