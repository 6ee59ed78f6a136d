"""Acceptance criteria on the shipped 9-bus cases.

The study criteria (7 to 10) build datasets and train models, so this module
takes the better part of an hour on one core. Set NEUROGRID_ACCEPTANCE_CACHE
to a directory to keep the datasets and trained bundles between runs.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, fd_worst, perturb, random_sample
from test_grid import gauss_seidel_two_bus, two_bus
from neurogrid.components import Port
from neurogrid.dataset import (
    build_dataset,
    check_dataset,
    compare_scenarios,
    load_dataset,
    policy_kinds,
    sample_scenarios,
    scenarios_from_manifest,
)
from neurogrid.grid.cases import BUILTIN_CASES, load_case
from neurogrid.grid.network import NetworkEvent
from neurogrid.grid.powerflow import newton_power_flow
from neurogrid.neural.dynamics import integrate_forward, loss_and_grads
from neurogrid.neural.models import IoSpec, NeuralModel, load_bundle, make_model, save_bundle
from neurogrid.neural.training import TrainingConfig, evaluate, train
from neurogrid.nn import MlpParams, MlpSpec
from neurogrid.samples import TrajectorySample, collate
from neurogrid.simulator import ModelHost, SimulationConfig, simulate

pytestmark = pytest.mark.slow

EXC_PORT = Port("exciter", 3)
DEV_PORT = Port("device", 6)
N_SAMPLES = 400  # 320 train / 80 test
EXC_SEED = LIM_SEED = 11
DEV_SEED = 13
LIM_ND, LIM_STAGES = 64, (300, 100)
STUDY_SEED = 21


def verdict(cid, ok, detail):
    ACCEPTANCE[cid] = (bool(ok), detail)
    assert ok, f"{cid}: {detail}"


def workdir(factory, name) -> Path:
    root = os.environ.get("NEUROGRID_ACCEPTANCE_CACHE")
    path = Path(root) / name if root else factory.mktemp(name)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cached_dataset(factory, name, case, port, seed):
    out = workdir(factory, name)
    if not (out / "manifest.json").exists():
        build_dataset(case, port, "B", N_SAMPLES, out, seed=seed)
    return out


def cached_model(path: Path, fit):
    """Load a trained bundle or fit it; returns (model, training seconds)."""
    meta = path.with_suffix(".time.json")
    if path.exists() and meta.exists():
        return load_bundle(path), json.loads(meta.read_text())["seconds"]
    t0 = time.perf_counter()
    model = fit()
    seconds = time.perf_counter() - t0
    save_bundle(model, path)
    meta.write_text(json.dumps({"seconds": seconds}))
    return model, seconds


# --- datasets and models shared by the study criteria -----------------------------------


@pytest.fixture(scope="module")
def exc_data(tmp_path_factory):
    return cached_dataset(tmp_path_factory, "exciter_unlimited", load_case("ieee9"), EXC_PORT, EXC_SEED)


@pytest.fixture(scope="module")
def lim_case():
    return load_case("ieee9").set_exciter_profile(3, "limited")


@pytest.fixture(scope="module")
def lim_data(tmp_path_factory, lim_case):
    return cached_dataset(tmp_path_factory, "exciter_limited", lim_case, EXC_PORT, LIM_SEED)


@pytest.fixture(scope="module")
def dev_data(tmp_path_factory):
    return cached_dataset(tmp_path_factory, "converter", load_case("ieee9"), DEV_PORT, DEV_SEED)


def fit_exciter(data_dir, n_d, E, N_r=200):
    ds = load_dataset(data_dir)
    io = IoSpec(dim_x=1, dim_z=5, n_d=n_d)
    model = make_model("ode_e", "autoencoder", io, seed=0)
    cfg = TrainingConfig(N_r=N_r, m=32, E=E, delta_E=E // 10, lr=0.005, gamma=0.7, seed=0)
    train(model, ds.train, ds.test, cfg)
    return model


@pytest.fixture(scope="module")
def exc_model(exc_data):
    return cached_model(exc_data / "model.json", lambda: fit_exciter(exc_data, 16, 400))


def fit_limited(data_dir, n_d):
    # a short window first so the clamp transients carry weight, then the full horizon
    ds = load_dataset(data_dir)
    model = make_model("ode_e", "autoencoder", IoSpec(dim_x=1, dim_z=5, n_d=n_d), seed=0)
    model, _ = train(model, ds.train, ds.test,
                     TrainingConfig(N_r=200, m=8, E=LIM_STAGES[0], delta_E=LIM_STAGES[0] // 10, T=3.0, seed=0))
    model, _ = train(model, ds.train, ds.test,
                     TrainingConfig(N_r=200, m=8, E=LIM_STAGES[1], delta_E=LIM_STAGES[1] // 10, lr=0.002, seed=0))
    return model


@pytest.fixture(scope="module")
def lim_model(lim_data):
    return cached_model(lim_data / "model.json", lambda: fit_limited(lim_data, LIM_ND))


def fit_converter(data_dir):
    ds = load_dataset(data_dir)
    io = IoSpec(dim_x=4, dim_i=2, dim_v=2, dim_z=4, n_d=32)
    model = make_model("dae", "regular", io, seed=0, learner=True)
    cfg = TrainingConfig(N_r=320, m=32, E=100, delta_E=10, lr=0.005, gamma=0.7, seed=0)
    train(model, ds.train, ds.test, cfg)
    return model


@pytest.fixture(scope="module")
def dev_model(dev_data):
    return cached_model(dev_data / "model.json", lambda: fit_converter(dev_data))


# --- 1-3: gradients and solvers ---------------------------------------------------------


def identity_pair(model: NeuralModel, name: str, shift: float = 10.0):
    """Make enc_name/dec_name an exact round trip: zero-padded identities with the ELU kept linear."""
    for block in (model.blocks[f"enc_{name}"], model.blocks[f"dec_{name}"]):
        for W, b in zip(block.weights, block.biases):
            W[...] = np.eye(*W.shape)
            b[...] = 0.0
        block.biases[0] += shift
        block.biases[-1] -= shift


def test_c01_adjoint_gradient_oracle():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for module in ("ode_e", "dae"):
        for variant in ("regular", "autoencoder"):
            rng = np.random.default_rng([1, module == "dae", variant == "autoencoder"])
            for _ in range(20):
                dae = module == "dae"
                small = dae and variant == "autoencoder"
                io = IoSpec(dim_x=int(rng.integers(1, 3)), dim_z=int(rng.integers(0, 3)),
                            dim_i=int(rng.integers(1, 3)) if dae else 0, dim_v=int(rng.integers(1, 3)) if dae else 0,
                            n_d=int(rng.integers(2, 3 if small else 5)))
                model = perturb(make_model(module, variant, io, rng), rng)
                # T = 0.5 s on a 0.01 s grid with one event
                batch = collate([random_sample(rng, io, 51, events=(int(rng.integers(1, 50)),))])
                _, grads, _ = loss_and_grads(model, batch)
                worst = max(worst, fd_worst(model, batch, grads))
                count += 1
    elapsed = time.perf_counter() - t0
    verdict("C1", worst <= 1e-3 and elapsed < 120,
            f"{count} instances, worst relative deviation {worst:.2e} (limit 1e-3), {elapsed:.0f} s (limit 120 s)")


def exact_data(model, sample):
    pred = integrate_forward(model, sample)
    if model.is_dae:
        return TrajectorySample(sample.t, sample.x, pred.i[:, 0], sample.v, sample.z, sample.t_event)
    return TrajectorySample(sample.t, pred.x[:, 0], sample.i, sample.v, sample.z, sample.t_event)


def test_c02_zero_residual_gradients():
    norms = {}
    for module in ("ode_e", "dae"):
        for variant in ("regular", "autoencoder"):
            rng = np.random.default_rng(2)
            dae = module == "dae"
            io = IoSpec(dim_x=2, dim_z=2, dim_i=2 if dae else 0, dim_v=2 if dae else 0, n_d=4)
            model = perturb(make_model(module, variant, io, rng), rng, 0.05)
            if variant == "autoencoder":
                for name in ("x", "i") if dae else ("x",):
                    identity_pair(model, name)
            s = random_sample(rng, io, 51, events=(20,))
            _, grads, _ = loss_and_grads(model, exact_data(model, s))
            norms[f"{module}/{variant}"] = math.sqrt(sum(float(np.sum(g * g)) for g in model.flat_grads(grads)))
    worst = max(norms.values())
    verdict("C2", worst < 1e-12, "largest gradient norm " + f"{worst:.1e} (limit 1e-12) over " + ", ".join(norms))


def decay_model():
    ode = MlpParams(MlpSpec((1, 1)), [np.array([[-1.0]])], [np.zeros(1)])
    return NeuralModel("ode_e", "regular", IoSpec(dim_x=1), {"ode": ode})


def test_c03_solver_order():
    ratios = {}
    for solver in ("euler", "rk4"):
        errs = []
        for dt in (0.02, 0.01):
            K = int(round(1.0 / dt)) + 1
            t = np.arange(K) * dt
            s = TrajectorySample(t, np.exp(-t)[:, None], *(np.zeros((K, 0)),) * 3)
            errs.append(abs(integrate_forward(decay_model(), s, solver).x[-1, 0, 0] - math.exp(-1.0)))
        ratios[solver] = errs[0] / errs[1]
    ok = abs(ratios["euler"] / 2 - 1) <= 0.2 and abs(ratios["rk4"] / 16 - 1) <= 0.2
    verdict("C3", ok, f"error ratios euler {ratios['euler']:.3f} (2 +-20%), rk4 {ratios['rk4']:.3f} (16 +-20%)")


# --- 4-6: grid and simulator ------------------------------------------------------------


def test_c04_power_flow():
    mism = {name: newton_power_flow(load_case(name)).mismatch for name in BUILTIN_CASES}
    pf = newton_power_flow(two_bus())
    gap = abs(pf.voltage(2) - gauss_seidel_two_bus(0.5, 0.1, 0.1))
    ok = max(mism.values()) <= 1e-8 and gap <= 1e-8
    verdict("C4", ok, f"mismatch {max(mism.values()):.1e} p.u. over {len(mism)} cases, two-bus gap {gap:.1e}")


def test_c05_equilibrium_hold():
    drift = {}
    for name in BUILTIN_CASES:
        tr = simulate(load_case(name), [], SimulationConfig(T=10.0))
        drift[name] = max(float(np.max(np.abs(c - c[0]))) for c in tr.columns().values())
        assert len(tr.t) == 1001
    worst = max(drift.values())
    verdict("C5", worst <= 1e-6, f"largest drift over 10 s {worst:.1e} p.u. (limit 1e-6)")


def test_c06_fictitious_susceptance_neutrality():
    case = load_case("ieee9")
    model = make_model("dae", "autoencoder", IoSpec(dim_x=4, dim_i=2, dim_v=2, dim_z=4, n_d=8), seed=3,
                       learner=True)
    events = [NetworkEvent(1.0, "fault_apply", bus=7), NetworkEvent(1.08, "fault_clear", bus=7)]
    cfg = SimulationConfig(T=3.0, v_tol=1e-12, max_iter=80)
    runs = [simulate(ModelHost(case.copy()).bind(DEV_PORT, model, bp), events, cfg) for bp in (-50.0, 0.0)]
    n = min(len(r.t) for r in runs)
    gap = float(np.max(np.abs(runs[0].V[:n] - runs[1].V[:n])))
    verdict("C6", gap <= 1e-8 and n == 301, f"largest bus-voltage gap {gap:.1e} p.u. over {n} steps (limit 1e-8)")


# --- 7-10: studies ----------------------------------------------------------------------


def test_c07_exciter_study(exc_data, exc_model):
    model, seconds = exc_model
    ds = load_dataset(exc_data)
    err = float(evaluate(model, ds.test).delta_x[0])
    ok = len(ds.train) == 320 and len(ds.test) == 80 and err <= 5e-2 and seconds < 1800
    verdict("C7", ok, f"held-out Efd error {err:.3e} p.u. per step (limit 5e-2), training {seconds:.0f} s")


def test_c08_limit_capture(lim_data, lim_model):
    model, _ = lim_model
    ds = load_dataset(lim_data)
    batch = collate(ds.test)
    pred = integrate_forward(model, batch).x[..., 0]
    valid = batch.mask.astype(bool)
    lo, hi = float(pred[valid].min()), float(pred[valid].max())
    truth_hi = max(float(s.x.max()) for s in ds.test)
    err = float(evaluate(model, ds.test).delta_x[0])
    verdict("C8", lo >= -0.05 and hi <= 3.35,
            f"predicted Efd in [{lo:.3f}, {hi:.3f}] (bounds [-0.05, 3.35]), data max {truth_hi:.2f}, "
            f"error {err:.3e} p.u.")


def test_c09_stability_agreement(exc_model):
    model, _ = exc_model
    case = load_case("ieee9")
    fresh = sample_scenarios(case, "A", 50, seed=STUDY_SEED)
    host = ModelHost(case.copy()).bind(EXC_PORT, model)
    rows, summary = compare_scenarios(case, [s.spec for s in fresh], host, keys={"efd": ("efd", 3)})
    agree, dts = summary["agreement"], summary["mean_delta_Ts"]
    verdict("C9", summary["n"] >= 50 and agree >= 0.9,
            f"agreement {agree:.0%} over {summary['n']} scenarios (limit 90%), mean dT_s {dts:.2e} s over "
            f"{summary['n_both_unstable']} unstable pairs, mean Efd delta {summary['delta_efd']:.2e}")


def test_c10_dae_converter(dev_data, dev_model):
    model, _ = dev_model
    m = json.loads((dev_data / "manifest.json").read_text())
    specs = [s for s in scenarios_from_manifest(m, "test") if s.stable]
    case = load_case("ieee9")
    host = ModelHost(case.copy()).bind(DEV_PORT, model, -50.0)
    rows, summary = compare_scenarios(case, specs, host, keys={"i": ("current", DEV_PORT)})
    ok = summary["failures"] == 0 and summary["delta_i"] <= 0.2
    verdict("C10", ok, f"{len(specs)} held-out stable scenarios, {summary['failures']} iteration failures, "
                       f"portal-current error {summary['delta_i']:.3e} p.u. (limit 0.2)")


# --- 11: dataset integrity --------------------------------------------------------------


def test_c11_dataset_integrity(exc_data, lim_data, dev_data, tmp_path):
    problems = {p.name: check_dataset(p) for p in (exc_data, lim_data, dev_data)}
    case = load_case("ieee9")
    cfg = SimulationConfig(T=3.0)
    a = build_dataset(case, EXC_PORT, "A", 4, tmp_path / "a1", seed=5, cfg=cfg)
    b = build_dataset(case, EXC_PORT, "A", 4, tmp_path / "a2", seed=5, cfg=cfg, jobs=2)
    same = a == b and all((tmp_path / "a1" / f["file"]).read_bytes() == (tmp_path / "a2" / f["file"]).read_bytes()
                          for f in a["files"])
    problems["policy_a"] = check_dataset(tmp_path / "a1")
    truncated = all(f["T_s"] is None or f["n_points"] == int(round(f["T_s"] / 0.01)) for f in a["files"])
    unstable = sum(not f["stable"] for f in a["files"])
    kinds = policy_kinds("B", N_SAMPLES, 0)
    bad = {k: v for k, v in problems.items() if v}
    ok = not bad and same and truncated and unstable == 2 and kinds.count("fault") == 80
    verdict("C11", ok, f"{len(problems)} datasets checked, violations {bad or 'none'}, "
                       f"byte-identical rebuild {same}, policy A unstable {unstable}/4")
