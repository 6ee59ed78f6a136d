import csv
import math
from pathlib import Path

import numpy as np
import pytest

from neurogrid.components import Port
from neurogrid.grid.network import NetworkEvent
from neurogrid.neural.models import IoSpec, make_model
from neurogrid.simulator import (
    TRAJECTORY_FORMAT,
    ModelHost,
    SimulationConfig,
    SimulationError,
    compare_trajectories,
    detect_instability,
    simulate,
)

DATA = Path(__file__).parent / "data"


def fault(bus=7, t=1.0, clear=0.08):
    return [NetworkEvent(t, "fault_apply", bus=bus), NetworkEvent(t + clear, "fault_clear", bus=bus)]


@pytest.fixture(scope="module")
def faulted(ieee9):
    return simulate(ieee9, fault(), SimulationConfig(T=3.0))


def read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], np.array(rows[1:], dtype=float)


@pytest.mark.parametrize("name", ["ieee9_case", "ieee9_region_case"])
def test_equilibrium_hold(request, name):
    case = request.getfixturevalue(name.replace("_case", ""))
    tr = simulate(case, [], SimulationConfig(T=2.0))
    assert tr.stable and tr.T_s is None
    for col in tr.columns().values():
        assert np.max(np.abs(col - col[0])) < 1e-6


def test_golden_fault(faulted):
    header, golden = read_csv(DATA / "golden_fault7.csv")
    cols = faulted.columns()
    assert header[1:-1] == list(cols)
    fresh = np.column_stack([faulted.t, *cols.values()])
    assert fresh.shape == golden[:, :-1].shape
    assert np.max(np.abs(fresh - golden[:, :-1])) < 1e-7
    assert np.nonzero(golden[:, -1])[0].tolist() == [100, 108]


def test_fault_stability(ieee9, faulted):
    assert faulted.stable
    assert faulted.event_times == [1.0, 1.08]
    swing = faulted.angles()
    assert np.ptp(swing[:, 1]) > 0.1  # the disturbance is real
    long = simulate(ieee9, fault(clear=0.3), SimulationConfig(T=3.0))
    assert not long.stable
    assert 1.3 < long.T_s < 3.0
    assert long.t[-1] == pytest.approx(long.T_s)  # run stops at the detection instant
    spread = long.angles()[-1].max() - long.angles()[-1].min()
    assert spread > 2 * math.pi


def test_detect_instability():
    t = np.arange(5) * 0.1
    a = np.array([[0, 0], [0, 3], [0, 6], [0, 6.5], [0, 9]], dtype=float)
    assert detect_instability(a, t) == pytest.approx(0.3)
    assert detect_instability(a[:3], t[:3]) is None
    assert detect_instability(a[:, :1], t) is None
    online = np.ones_like(a, dtype=bool)
    online[3:, 1] = False
    assert detect_instability(a, t, online) is None
    # exactly 360 degrees is not yet a loss of synchronism
    assert detect_instability(np.array([[0, 2 * math.pi]]), t[:1]) is None


def test_events_validated(ieee9):
    with pytest.raises(SimulationError):
        simulate(ieee9, [NetworkEvent(5.0, "fault_apply", bus=7)], SimulationConfig(T=1.0))
    with pytest.raises(ValueError):
        SimulationConfig(predictor="cubic")


def test_csv_format(faulted, tmp_path):
    p = tmp_path / "run.csv"
    faulted.to_csv(p)
    first, second = p.read_text().splitlines()[:2]
    assert first == f"# format: {TRAJECTORY_FORMAT}"
    assert second == "# stable: True; T_s: None"
    header, data = read_csv(p)
    assert header[0] == "t" and header[-1] == "event"
    assert data.shape == (301, len(header))
    assert np.allclose(data[:, 0], np.arange(301) * 0.01)


def _dae(seed=3):
    return make_model("dae", "autoencoder", IoSpec(dim_x=4, dim_z=4, dim_i=2, dim_v=2, n_d=6), seed=seed)


def test_host_bind_unbind_restores_topology(ieee9_region):
    host = ModelHost(ieee9_region.copy())
    before = host.network().Y.toarray()
    port = Port.parse("region:region", ieee9_region)
    host.bind(port, _dae())
    reduced = host.network()
    assert reduced.n < len(ieee9_region.buses)
    host.unbind(port)
    assert np.array_equal(host.network().Y.toarray(), before)
    with pytest.raises(ValueError):
        host.bind(Port("device", 6), make_model("ode_e", "regular", IoSpec(dim_x=1, dim_z=5, n_d=4)))
    with pytest.raises(ValueError):
        host.bind(Port("device", 4), _dae())
    host.bind(Port("device", 6), _dae())
    with pytest.raises(ValueError):
        host.bind(Port("device", 6), _dae())


def test_fictitious_susceptance_is_neutral(ieee9):
    ev = fault(clear=0.08, t=0.3)
    cfg = SimulationConfig(T=0.8, v_tol=1e-12, max_iter=60)
    port = Port("device", 6)
    runs = [simulate(ModelHost(ieee9.copy()).bind(port, _dae(), bp), ev, cfg) for bp in (-50.0, 0.0)]
    assert np.max(np.abs(runs[0].V - runs[1].V)) < 1e-8
    assert np.abs(runs[0].neural_current[6]).max() > 0


def test_compare_trajectories(faulted, ieee9):
    keys = {"efd_1": ("efd", 1), "i6": ("current", Port("device", 6))}
    same = compare_trajectories(faulted, faulted, keys)
    assert same.delta_x == {"efd_1": 0.0, "i6": 0.0}
    assert same.agree and same.delta_Ts == 0.0 and same.n_compared == 301

    shifted = simulate(ieee9, fault(), SimulationConfig(T=3.0))
    shifted.gen_efd = shifted.gen_efd + 0.01
    c = compare_trajectories(faulted, shifted, keys)
    assert c.delta_x["efd_1"] == pytest.approx(0.01)

    long = simulate(ieee9, fault(clear=0.3), SimulationConfig(T=3.0))
    c = compare_trajectories(faulted, long, keys)
    assert not c.agree and math.isnan(c.delta_Ts)
    assert c.n_compared == int(np.searchsorted(long.t, long.T_s - 1e-9))
    with pytest.raises(ValueError):
        compare_trajectories(faulted, simulate(ieee9, [], SimulationConfig(T=1.0, dt=0.02)), keys)
