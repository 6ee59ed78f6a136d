"""Scenario sampling, ground-truth simulation and dataset files.

A sample file is little-endian and laid out as::

    magic   4 bytes   b"NGTS"
    version u16       1
    hlen    u32       length of the JSON header in bytes
    header  hlen      UTF-8 JSON: n_points, dims {x, i, v, z}, t_event,
                      stable, T_s, meta (keys sorted, no whitespace)
    t       float64[n_points]
    x, i, v, z        float64[n_points, dim], row-major, in that order

The manifest is a JSON file next to the samples holding the split, the
per-file sha256 and the scenario descriptors.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .components import Port, extract_portal
from .grid.cases import Case, CaseError
from .grid.network import NetworkError, NetworkEvent
from .grid.powerflow import PowerFlowError, newton_power_flow
from .samples import TrajectorySample
from .simulator import ModelHost, SimulationConfig, SimulationError, compare_trajectories, simulate

log = logging.getLogger(__name__)

MAGIC = b"NGTS"
SAMPLE_VERSION = 1
MANIFEST_FORMAT = "neurogrid-dataset/1"
POLICIES = ("A", "B")

V_RANGE = (0.94, 1.06)
LOAD_RANGE = (0.5, 1.5)
CHANGE_RANGE = (0.1, 0.9)
FAULT_SHARE_B = 0.2
CLEARING_A = (0.05, 0.6)
CLEARING_B = (0.05, 0.2)
EVENT_WINDOW = (0.5, 1.5)


class DatasetError(RuntimeError):
    pass


@dataclass
class ScenarioSpec:
    index: int
    gen_v: dict[int, float]
    gen_p: dict[int, float]
    load_scale: dict[int, list[float]]
    contingency: dict
    seed: list[int]
    stable: bool | None = None
    T_s: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("gen_v", "gen_p", "load_scale"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        for key in ("gen_v", "gen_p", "load_scale"):
            d[key] = {int(k): v for k, v in d[key].items()}
        return cls(**d)

    def apply(self, base: Case) -> Case:
        case = base.copy()
        for g in case.generators:
            if g.bus in self.gen_v:
                g.vset = self.gen_v[g.bus]
            if g.bus in self.gen_p:
                g.p = self.gen_p[g.bus]
        for ld in case.loads:
            if ld.bus in self.load_scale:
                sp, sq = self.load_scale[ld.bus]
                ld.p *= sp
                ld.q *= sq
        return case

    def events(self) -> list[NetworkEvent]:
        c = self.contingency
        kind = c["kind"]
        t0 = c["time"]
        if kind == "fault":
            return [NetworkEvent(t0, "fault_apply", bus=c["bus"]),
                    NetworkEvent(t0 + c["clearing"], "fault_clear", bus=c["bus"])]
        if kind == "gen_change":
            return [NetworkEvent(t0, "gen_scale", bus=c["bus"], factor=c["factor"])]
        if kind == "load_change":
            return [NetworkEvent(t0, "load_scale", bus=c["bus"], factor=c["factor"])]
        if kind == "none":
            return []
        raise DatasetError(f"unknown contingency kind {kind!r}")


def _on_grid(value: float, dt: float) -> float:
    return round(round(value / dt) * dt, 10)


def _operating_point(base: Case, rng: np.random.Generator):
    gen_v = {g.bus: float(rng.uniform(*V_RANGE)) for g in base.generators}
    slack = next(b.id for b in base.buses if b.kind == "slack")
    gen_p = {g.bus: float(rng.uniform(g.p_min, g.p_max)) for g in base.generators if g.bus != slack}
    load_scale = {ld.bus: [float(rng.uniform(*LOAD_RANGE)), float(rng.uniform(*LOAD_RANGE))] for ld in base.loads}
    return gen_v, gen_p, load_scale


def _contingency(base: Case, kind: str, rng: np.random.Generator, dt: float, clearing: tuple[float, float]):
    t0 = _on_grid(rng.uniform(*EVENT_WINDOW), dt)
    if kind == "fault":
        bus = int(rng.choice([b.id for b in base.buses]))
        return {"kind": "fault", "bus": bus, "time": t0, "clearing": _on_grid(rng.uniform(*clearing), dt)}
    sign = 1.0 if rng.random() < 0.5 else -1.0
    factor = 1.0 + sign * float(rng.uniform(*CHANGE_RANGE))
    if kind == "gen_change":
        return {"kind": kind, "bus": int(rng.choice([g.bus for g in base.generators])), "time": t0, "factor": factor}
    return {"kind": kind, "bus": int(rng.choice([ld.bus for ld in base.loads])), "time": t0, "factor": factor}


def feasible(spec: ScenarioSpec, base: Case) -> bool:
    """Power flow solves, the slack stays within its limits and every exciter can hold its Efd0."""
    case = spec.apply(base)
    try:
        pf = newton_power_flow(case)
    except PowerFlowError:
        return False
    slack = next(b.id for b in case.buses if b.kind == "slack")
    g = case.generator(slack)
    if not g.p_min <= pf.p_gen[slack] <= g.p_max:
        return False
    return bool(np.all(np.abs(pf.V) > 0.85))


@dataclass
class SimulatedScenario:
    spec: ScenarioSpec
    trajectory: object = field(repr=False, default=None)
    error: str | None = None


def run_scenario(base: Case, spec: ScenarioSpec, cfg: SimulationConfig, host: ModelHost | None = None):
    """Simulate one scenario, optionally with the neural models bound in ``host``."""
    case = spec.apply(base)
    if host is not None:
        bound = ModelHost(case)
        for entry in host.entries.values():
            bound.bind(entry.port, entry.model, entry.b_prime)
        case = bound
    return simulate(case, spec.events(), cfg, meta={"scenario": spec.index})


def _simulate_checked(args) -> SimulatedScenario:
    base, spec, cfg = args
    if not feasible(spec, base):
        return SimulatedScenario(spec, None, "infeasible operating point")
    try:
        tr = run_scenario(base, spec, cfg)
    except (SimulationError, NetworkError, CaseError, ValueError) as exc:
        return SimulatedScenario(spec, None, str(exc))
    spec.stable, spec.T_s = tr.stable, tr.T_s
    return SimulatedScenario(spec, tr)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def draw_scenario(base: Case, kind: str, seed_key, dt: float, clearing) -> ScenarioSpec:
    """One candidate; ``seed_key`` alone fixes every random choice."""
    rng = np.random.default_rng(seed_key)
    gv, gp, ls = _operating_point(base, rng)
    cont = _contingency(base, kind, rng, dt, clearing)
    return ScenarioSpec(-1, gv, gp, ls, cont, [int(k) for k in seed_key])


def policy_kinds(policy: str, n: int, seed: int) -> list[str]:
    """Contingency kind per slot; policy A uses faults throughout."""
    if policy == "A":
        return ["fault"] * n
    n_fault = int(round(FAULT_SHARE_B * n))
    kinds = ["fault"] * n_fault + [("gen_change", "load_change")[k % 2] for k in range(n - n_fault)]
    order = np.random.default_rng([seed, 1]).permutation(n)
    return [kinds[k] for k in order]


def sample_scenarios(
    base: Case,
    policy: str,
    n: int,
    seed: int = 0,
    cfg: SimulationConfig | None = None,
    budget_factor: int = 20,
    jobs: int = 1,
) -> list[SimulatedScenario]:
    """Draw and simulate ``n`` scenarios following a composition policy.

    Policy A draws faults until half the scenarios are stable and half unstable
    (with odd ``n`` the extra one is stable). Policy B keeps only stable runs:
    round(0.2 n) faults, the rest generation or load changes of 10-90 %.
    Results do not depend on ``jobs``.
    """
    if policy not in POLICIES:
        raise DatasetError(f"unknown policy {policy!r}")
    if n < 0:
        raise DatasetError("n must be nonnegative")
    cfg = cfg or SimulationConfig()
    budget = max(budget_factor * n, 10)
    if policy == "A":
        out = _sample_a(base, n, seed, cfg, budget, jobs)
    else:
        out = _sample_b(base, n, seed, cfg, budget, jobs)
    for k, sim in enumerate(out):
        sim.spec.index = k
        sim.trajectory.meta["scenario"] = k
    return out


def _sample_a(base, n, seed, cfg, budget, jobs):
    want = {True: n - n // 2, False: n // 2}
    out, tries = [], 0
    while len(out) < n:
        if tries >= budget:
            have = sum(s.spec.stable for s in out)
            raise DatasetError(f"rejection budget of {budget} draws exhausted with {len(out)}/{n} scenarios "
                               f"({have} stable, {len(out) - have} unstable)")
        chunk = min(max(jobs, 1) * 2, budget - tries)
        cands = [(base, draw_scenario(base, "fault", [seed, 0, tries + j], cfg.dt, CLEARING_A), cfg)
                 for j in range(chunk)]
        tries += chunk
        for sim in _map(_simulate_checked, cands, jobs):
            if sim.error is not None:
                log.info("candidate %s skipped: %s", sim.spec.seed, sim.error)
            elif want[sim.spec.stable] > 0 and len(out) < n:
                want[sim.spec.stable] -= 1
                out.append(sim)
    return out


def _sample_b(base, n, seed, cfg, budget, jobs):
    kinds = policy_kinds("B", n, seed)
    slots: dict[int, SimulatedScenario] = {}
    attempt = dict.fromkeys(range(n), 0)
    tries = 0
    while len(slots) < n:
        open_slots = [s for s in range(n) if s not in slots]
        if tries + len(open_slots) > budget:
            raise DatasetError(f"rejection budget of {budget} draws exhausted with {len(slots)}/{n} "
                               f"stable scenarios")
        cands = [(base, draw_scenario(base, kinds[s], [seed, 1 + s, attempt[s]], cfg.dt, CLEARING_B), cfg)
                 for s in open_slots]
        tries += len(cands)
        for s, sim in zip(open_slots, _map(_simulate_checked, cands, jobs)):
            attempt[s] += 1
            if sim.error is not None:
                log.info("candidate %s skipped: %s", sim.spec.seed, sim.error)
            elif sim.spec.stable:
                slots[s] = sim
    return [slots[s] for s in range(n)]


# --- sample files ----------------------------------------------------------------------


def _header(sample: TrajectorySample) -> bytes:
    head = {
        "n_points": len(sample.t),
        "dims": {k: int(getattr(sample, k).shape[1]) for k in ("x", "i", "v", "z")},
        "t_event": sample.t_event,
        "stable": bool(sample.stable),
        "T_s": sample.T_s,
        "meta": sample.meta,
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode()


def encode_sample(sample: TrajectorySample) -> bytes:
    head = _header(sample)
    parts = [MAGIC, struct.pack("<HI", SAMPLE_VERSION, len(head)), head]
    for name in ("t", "x", "i", "v", "z"):
        parts.append(np.ascontiguousarray(getattr(sample, name), dtype="<f8").tobytes())
    return b"".join(parts)


def decode_sample(blob: bytes, source: str = "<bytes>") -> TrajectorySample:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise DatasetError(f"{source}: not a sample file")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != SAMPLE_VERSION:
        raise DatasetError(f"{source}: unsupported sample version {version}")
    try:
        head = json.loads(blob[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{source}: corrupt header ({exc})") from None
    n = head["n_points"]
    dims = head["dims"]
    need = 10 + hlen + 8 * n * (1 + sum(dims[k] for k in ("x", "i", "v", "z")))
    if len(blob) != need:
        raise DatasetError(f"{source}: expected {need} bytes, found {len(blob)}")
    off = 10 + hlen
    arrays = {}
    for name in ("t", "x", "i", "v", "z"):
        width = 1 if name == "t" else dims[name]
        count = n * width
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(float)
        arrays[name] = arr if name == "t" else arr.reshape(n, width)
        off += 8 * count
    return TrajectorySample(arrays["t"], arrays["x"], arrays["i"], arrays["v"], arrays["z"],
                            head["t_event"], head["stable"], head["T_s"], head["meta"])


def write_sample(sample: TrajectorySample, path) -> str:
    blob = encode_sample(sample)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_sample(path) -> TrajectorySample:
    return decode_sample(Path(path).read_bytes(), str(path))


# --- datasets ---------------------------------------------------------------------------


def truncate_before_instability(sample: TrajectorySample) -> TrajectorySample:
    if sample.T_s is None:
        return sample
    keep = int(np.searchsorted(sample.t, sample.T_s - 1e-9))
    return sample.truncated(keep)


def portal_sample(sim: SimulatedScenario, port: Port) -> TrajectorySample:
    sample = extract_portal(sim.trajectory, port)
    sample.meta.update({"scenario": sim.spec.index, "contingency": sim.spec.contingency["kind"]})
    return truncate_before_instability(sample)


@dataclass
class Dataset:
    train: list[TrajectorySample]
    test: list[TrajectorySample]
    manifest: dict


def split_indices(n: int, seed: int, test_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_test = int(round(test_fraction * n))
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def generate_dataset(
    base: Case,
    port: Port,
    scenarios: Sequence[SimulatedScenario | ScenarioSpec],
    outdir,
    cfg: SimulationConfig | None = None,
    seed: int = 0,
    policy: str | None = None,
    test_fraction: float = 0.2,
    jobs: int = 1,
) -> dict:
    """Write one sample file per scenario plus ``manifest.json``.

    Bare specs are simulated first; a failing simulation is skipped and logged.
    """
    cfg = cfg or SimulationConfig()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    todo = [k for k, s in enumerate(scenarios) if isinstance(s, ScenarioSpec)]
    sims = list(scenarios)
    for k, sim in zip(todo, _map(_simulate_checked, [(base, scenarios[k], cfg) for k in todo], jobs)):
        sims[k] = sim
    kept = []
    for sim in sims:
        if sim.error is not None:
            log.warning("scenario %d skipped: %s", sim.spec.index, sim.error)
        else:
            kept.append(sim)
    train_idx, test_idx = split_indices(len(kept), seed, test_fraction)
    split = {k: "train" for k in train_idx} | {k: "test" for k in test_idx}
    files = []
    for k, sim in enumerate(kept):
        sample = portal_sample(sim, port)
        name = f"sample_{k:05d}.ngts"
        digest = write_sample(sample, outdir / name)
        files.append({
            "file": name, "split": split[k], "sha256": digest, "stable": bool(sim.spec.stable),
            "T_s": sim.spec.T_s, "n_points": len(sample.t), "scenario": sim.spec.to_dict(),
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "component": port.label,
        "port": {"kind": port.kind, "bus": port.bus, "region": port.region},
        "case": base.name,
        "policy": policy,
        "seed": seed,
        "counts": {"total": len(files), "train": len(train_idx), "test": len(test_idx)},
        "skipped": len(sims) - len(kept),
        "sim_config": {"dt": cfg.dt, "T": cfg.T},
        "files": files,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def build_dataset(base: Case, port: Port, policy: str, n: int, outdir, seed: int = 0,
                  cfg: SimulationConfig | None = None, jobs: int = 1) -> dict:
    scen = sample_scenarios(base, policy, n, seed, cfg, jobs=jobs)
    return generate_dataset(base, port, scen, outdir, cfg, seed, policy, jobs=jobs)


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    root = path.parent
    train, test = [], []
    seen = set()
    for entry in manifest["files"]:
        if entry["file"] in seen:
            raise DatasetError(f"{entry['file']} listed twice")
        seen.add(entry["file"])
        fp = root / entry["file"]
        if not fp.exists():
            raise DatasetError(f"missing sample file {fp}")
        blob = fp.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise DatasetError(f"checksum mismatch for {fp}")
        sample = decode_sample(blob, str(fp))
        if len(sample.t) != entry["n_points"]:
            raise DatasetError(f"{fp}: length does not match the manifest")
        (train if entry["split"] == "train" else test).append(sample)
    counts = manifest["counts"]
    if len(train) != counts["train"] or len(test) != counts["test"] or len(seen) != counts["total"]:
        raise DatasetError("sample counts do not match the manifest")
    return Dataset(train, test, manifest)


def check_dataset(manifest_path) -> list[str]:
    """Invariant violations of a generated dataset (empty when it is sound)."""
    ds = load_dataset(manifest_path)
    m = ds.manifest
    problems = []
    for s in ds.train + ds.test:
        if s.T_s is not None and len(s.t) and s.t[-1] >= s.T_s - 1e-9:
            problems.append(f"sample {s.meta.get('scenario')} has points at or after T_s")
        if not len(s.t):
            continue
        if m["port"]["kind"] == "exciter":
            ok = (s.z[:, 2] == s.z[0, 0]).all() and (s.z[:, 3] == s.z[0, 1]).all() and (s.z[:, 4] == s.x[0, 0]).all()
        else:
            ok = (s.z == np.concatenate([s.v[0], s.i[0]])).all()
        if not ok:
            problems.append(f"sample {s.meta.get('scenario')}: steady-state entries differ from t=0 values")
    n = m["counts"]["total"]
    stable = sum(f["stable"] for f in m["files"])
    if m["policy"] == "A" and n and stable != n - n // 2:
        problems.append(f"policy A split is {stable} stable of {n}")
    if m["policy"] == "B":
        if stable != n:
            problems.append(f"policy B has {n - stable} unstable samples")
        faults = sum(f["scenario"]["contingency"]["kind"] == "fault" for f in m["files"])
        if faults != int(round(FAULT_SHARE_B * n)):
            problems.append(f"policy B has {faults} fault scenarios, expected {int(round(FAULT_SHARE_B * n))}")
    return problems


# --- comparative studies ---------------------------------------------------------------


def default_keys(port: Port) -> dict[str, tuple]:
    if port.kind == "exciter":
        return {"efd": ("efd", port.bus)}
    return {"current": ("current", port)}


def compare_scenarios(
    base: Case,
    specs: Sequence[ScenarioSpec],
    host: ModelHost,
    cfg: SimulationConfig | None = None,
    keys: dict[str, tuple] | None = None,
) -> tuple[list[dict], dict]:
    """Run every scenario with the analytical models and with the models bound in ``host``.

    Returns per-scenario rows and the aggregate: mean delta per key, stability
    agreement rate and mean delta T_s over scenarios both runs call unstable.
    A neural run that fails counts as a disagreement and is reported in ``error``.
    """
    cfg = cfg or SimulationConfig()
    if keys is None:
        ports = list(host.entries)
        keys = default_keys(ports[0]) if len(ports) == 1 else {}
    rows = []
    for spec in specs:
        orig = run_scenario(base, spec, cfg)
        row = {"scenario": spec.index, "kind": spec.contingency["kind"], "stable_orig": orig.stable,
               "T_s_orig": orig.T_s, "error": ""}
        try:
            neural = run_scenario(base, spec, cfg, host)
        except (SimulationError, NetworkError) as exc:
            row.update({"stable_neural": None, "T_s_neural": None, "agree": False, "delta_Ts": math.nan,
                        "n_compared": 0, "error": str(exc)})
            row.update({f"delta_{k}": math.nan for k in keys})
            rows.append(row)
            continue
        cmp = compare_trajectories(orig, neural, keys)
        row.update({"stable_neural": neural.stable, "T_s_neural": neural.T_s, "agree": cmp.agree,
                    "delta_Ts": cmp.delta_Ts, "n_compared": cmp.n_compared})
        row.update({f"delta_{k}": v for k, v in cmp.delta_x.items()})
        rows.append(row)
    return rows, summarize_comparison(rows, keys)


def summarize_comparison(rows: list[dict], keys) -> dict:
    ok = [r for r in rows if not r["error"]]
    both_unstable = [r["delta_Ts"] for r in ok if r["agree"] and not r["stable_orig"]]
    out = {
        "n": len(rows),
        "failures": len(rows) - len(ok),
        "agreement": (sum(r["agree"] for r in rows) / len(rows)) if rows else math.nan,
        "mean_delta_Ts": float(np.mean(both_unstable)) if both_unstable else math.nan,
        "n_both_unstable": len(both_unstable),
    }
    for k in keys:
        vals = [r[f"delta_{k}"] for r in ok]
        out[f"delta_{k}"] = float(np.mean(vals)) if vals else math.nan
    return out


def scenarios_from_manifest(manifest: dict, split: str | None = None) -> list[ScenarioSpec]:
    return [ScenarioSpec.from_dict(f["scenario"]) for f in manifest["files"] if split in (None, f["split"])]
