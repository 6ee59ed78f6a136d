import math

import numpy as np
import pytest

from neurogrid.components import (
    ComponentError,
    ConverterGroup,
    ExciterGroup,
    GeneratorGroup,
    Port,
    converter_commands,
    device_current,
    device_derivatives,
    device_init,
    exciter_derivatives,
    exciter_init,
    extract_portal,
    generator_current,
    generator_derivatives,
    generator_init,
    portal_dims,
)
from neurogrid.grid.cases import DeviceData, ExciterData, GeneratorData
from neurogrid.grid.network import NetworkEvent
from neurogrid.simulator import simulate

GEN = GeneratorData(bus=1, p=1.0, vset=1.0, p_min=0, p_max=2, H=4.0, D=2.0, xd=1.2, xq=0.9, xd_p=0.25,
                    xq_p=0.4, Td0_p=6.0, Tq0_p=0.5)
WS = 2 * math.pi * 60


def test_open_circuit_alignment_gives_zero_current():
    v = 1.02 * np.exp(0.3j)
    delta = 0.3  # q axis on v
    i = generator_current(delta, abs(v), 0.0, v, 0.25, 0.4)
    assert abs(i) < 1e-15


def test_round_rotor_hand_case():
    # delta = pi/2 puts the machine frame on the network frame: E' = E'd + j E'q
    i = generator_current(math.pi / 2, 1.1, 0.0, 1.0 + 0j, 0.2, 0.2)
    assert i == pytest.approx((1.1j - 1.0) / 0.2j)
    assert i == pytest.approx(5.5 + 5j)


def test_mirror_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(20):
        delta, eq, ed = rng.uniform(-3, 3), rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5)
        v = complex(*rng.normal(size=2))
        i = generator_current(delta, eq, ed, v, 0.25, 0.4)
        mirrored = generator_current(-delta, eq, -ed, np.conj(v), 0.25, 0.4)
        # conjugation turns the reactances capacitive, hence the sign
        assert mirrored == pytest.approx(-np.conj(i), abs=1e-13)


def test_generator_equilibrium():
    v0 = 1.03 * np.exp(0.2j)
    i0 = np.conj((0.8 + 0.3j) / v0)
    state, pm, efd = generator_init(GEN, v0, i0)
    assert pm == pytest.approx(0.8)
    assert np.max(np.abs(generator_derivatives(GEN, state, v0, pm, efd, WS))) <= 1e-10
    assert generator_current(state[0], state[2], state[3], v0, GEN.xd_p, GEN.xq_p) == pytest.approx(i0)
    # a mechanical step shows up in the speed derivative only
    d = generator_derivatives(GEN, state, v0, pm + 0.1, efd, WS)
    assert d[1] == pytest.approx(0.1 / (2 * GEN.H))
    assert np.max(np.abs(d[[0, 2, 3]])) <= 1e-10


def test_generator_group_sweep_solves_trapezoid():
    gens = [GEN, GeneratorData(**{**GEN.__dict__, "bus": 2, "H": 2.0})]
    grp = GeneratorGroup(gens, 60.0)
    v = np.array([1.0 * np.exp(0.1j), 0.98 * np.exp(-0.05j)])
    y0 = np.zeros((2, 4))
    efd = np.zeros(2)
    for k, g in enumerate(gens):
        i0 = np.conj((0.7 + 0.2j) / v[k])
        y0[k], grp.pm[k], efd[k] = generator_init(g, v[k], i0)
    grp.pm *= 1.2
    f0 = grp.derivatives(y0, v, efd)
    h = 0.01
    y = y0.copy()
    for _ in range(50):
        y = grp.trap_sweep(y0, f0, y, v, efd, h)
    # fixed point satisfies y = y0 + h/2 (f0 + f(y))
    assert np.max(np.abs(y - y0 - 0.5 * h * (f0 + grp.derivatives(y, v, efd)))) < 1e-13


EXC = ExciterData(gen_bus=1, km=1.0, tm=0.02, ka=1.0, ta=0.05, ke=1.0, te=0.4, kf=1.0, tf=1.0)


def test_exciter_references_by_hand():
    refs = exciter_init(EXC, 1.0, 1.8)
    assert refs.vref == 1.0 and refs.efd_ref == 1.8
    assert np.array_equal(refs.state, [1.0, 0.0, 1.8, 0.0])
    d = exciter_derivatives(EXC, refs.state, 1.0, 0.0, refs.vref, refs.efd_ref)
    assert np.max(np.abs(d)) <= 1e-10


def test_exciter_limits():
    lim = ExciterData(gen_bus=1, efd_min=0.0, efd_max=3.3)
    with pytest.raises(ComponentError):
        exciter_init(lim, 1.0, 3.4)
    with pytest.raises(ComponentError):
        exciter_derivatives(lim, np.zeros(4), 1.0, 0.0, None, None)
    # a large regulator output pushes Efd up against its ceiling
    d = exciter_derivatives(lim, np.array([0.9, 50.0, 3.3, 0.0]), 0.9, 0.0, 1.0, 3.0)
    assert d[2] == 0.0
    grp = ExciterGroup([lim])
    refs = exciter_init(lim, 1.0, 3.2)
    grp.vref[:], grp.efd_ref[:] = refs.vref, refs.efd_ref
    y = refs.state[None, :].copy()
    for _ in range(200):  # terminal voltage sag of 0.2
        f0 = grp.derivatives(y, np.array([0.8]), np.zeros(1))
        y = grp.trap_sweep(y, f0, y, np.array([0.8]), np.zeros(1), 0.01)
        assert y[0, 2] <= 3.3
    assert y[0, 2] == 3.3


def test_exciter_group_step_is_exact():
    grp = ExciterGroup([EXC, ExciterData(gen_bus=2)])
    y0 = np.array([[1.0, 0.1, 1.8, 0.01], [1.02, -0.2, 2.1, 0.0]])
    grp.vref[:] = [1.0, 1.05]
    grp.efd_ref[:] = [1.8, 2.0]
    V, Vs, h = np.array([0.95, 1.0]), np.zeros(2), 0.01
    f0 = grp.derivatives(y0, V, Vs)
    y = grp.trap_sweep(y0, f0, y0, V, Vs, h)
    assert np.max(np.abs(y - y0 - 0.5 * h * (f0 + grp.derivatives(y, V, Vs)))) < 1e-14


DEV = DeviceData(bus=1, p=0.3, q=0.05, tc=0.12, i_max=1.5, v_floor=0.4)


def test_converter_setpoint_and_step():
    v0 = 1.01 * np.exp(0.2j)
    s = device_init(DEV, v0)
    assert np.max(np.abs(device_derivatives(DEV, s, v0))) == 0.0
    assert v0 * np.conj(device_current(s, v0, DEV.v_floor)) == pytest.approx(0.3 + 0.05j)
    # a setpoint step relaxes with time constant tc
    grp = ConverterGroup([DeviceData(**{**DEV.__dict__, "p": 0.6})])
    y = s[None, :].copy()
    h, T = 0.001, 0.36
    for _ in range(int(round(T / h))):
        f0 = grp.derivatives(y, np.array([v0]))
        y = grp.trap_sweep(y, f0, y, np.array([v0]), h)
    target = 0.6 / abs(v0)
    expected = target + (s[0] - target) * math.exp(-T / DEV.tc)
    assert y[0, 0] == pytest.approx(expected, abs=1e-6)


def test_converter_under_bolted_fault():
    cd, cq = converter_commands(DEV.p * 10, DEV.q * 10, 0.0 + 0j, DEV.i_max, DEV.v_floor)
    assert math.hypot(cd, cq) == pytest.approx(DEV.i_max)
    assert device_current(np.array([1.0, 0.5]), 0.0 + 0j, DEV.v_floor) == 0


def test_port_parsing(ieee9_region):
    assert Port.parse("exciter:3") == Port("exciter", 3)
    assert Port.parse("region:region", ieee9_region) == Port("region", 8, "region")
    with pytest.raises(ComponentError):
        Port.parse("exciter:x")
    with pytest.raises(ComponentError):
        Port("breaker", 2)
    assert portal_dims(Port("device", 6)) == {"dim_x": 0, "dim_i": 2, "dim_v": 2, "dim_z": 4}


def test_portal_records(ieee9, ieee9_region):
    flat = simulate(ieee9, [], _short())
    s = extract_portal(flat, Port("device", 6))
    assert np.array_equal(s.z, np.tile(s.z[0], (len(s.t), 1)))
    assert np.array_equal(s.z[0], np.concatenate([s.v[0], s.i[0]]))
    e = extract_portal(flat, Port("exciter", 2))
    assert e.x.shape == (len(s.t), 1) and e.z[0, 4] == e.x[0, 0]

    ev = [NetworkEvent(0.5, "fault_apply", bus=7), NetworkEvent(0.58, "fault_clear", bus=7)]
    tr = simulate(ieee9, ev, _short())
    s = extract_portal(tr, Port("device", 6))
    assert s.t_event == [0.5, 0.58]
    k = 50
    # the sample at t_e is pre-event, the fault drives the step out of it
    assert abs(s.v[k] - s.v[0]).max() < 1e-9
    assert abs(s.v[k + 1] - s.v[k]).max() > 0.5

    reg = simulate(ieee9_region, ev, _short())
    port = Port.parse("region:region", ieee9_region)
    r = extract_portal(reg, port)
    net_i = reg.port_current(port)
    assert np.allclose(r.i[:, 0] + 1j * r.i[:, 1], net_i)
    # the current into the boundary bus from the region equals minus the branch current leaving bus 8
    from neurogrid.grid.network import NetworkModel
    case = ieee9_region
    net = NetworkModel(case.buses, case.branches)
    k = net.find_branch(8, 10)
    i_from, _ = net.branch_current(k, reg.V[200])
    assert net_i[200] == pytest.approx(-i_from, abs=1e-12)


def _short():
    from neurogrid.simulator import SimulationConfig

    return SimulationConfig(T=2.0)
