"""``neurogrid`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
Settings come from an optional JSON file (``--config``) with command-line
flags taking precedence. ``NEUROGRID_SEED`` is the seed when none is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .components import ComponentError, Port, portal_dims
from .dataset import (
    DatasetError,
    ScenarioSpec,
    build_dataset,
    check_dataset,
    compare_scenarios,
    default_keys,
    load_dataset,
    read_sample,
    sample_scenarios,
    scenarios_from_manifest,
)
from .grid.cases import CaseError, load_case
from .grid.network import NetworkError, NetworkEvent, SingularNetworkError
from .grid.powerflow import PowerFlowError, newton_power_flow
from .neural.dynamics import IntegrationDiverged, LossWeights
from .neural.models import IoSpec, bundle_from_dict, load_bundle, make_model, save_bundle
from .neural.training import (
    TrainingConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    train,
    write_metrics_csv,
)
from .simulator import ModelHost, SimulationConfig, SimulationError, simulate

log = logging.getLogger("neurogrid")

REPORT_FORMAT = "neurogrid-report/1"
SAMPLE_CSV_FORMAT = "neurogrid-sample/1"


class CliError(Exception):
    """Invalid input; exit code 1."""


# --- configuration ---------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimulationSettings(_Strict):
    dt: float = Field(0.01, gt=0)
    T: float = Field(10.0, gt=0)
    v_tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(20, ge=1)
    accelerate: bool = True


class TrainingSettings(_Strict):
    N_r: Optional[int] = Field(None, ge=1)
    m: int = Field(32, ge=1)
    E: int = Field(100, ge=0)
    delta_E: int = Field(10, ge=1)
    lr: float = Field(0.005, gt=0)
    gamma: float = Field(0.7, gt=0, le=1)
    solver: Literal["euler", "midpoint", "rk4"] = "euler"
    max_global_norm: Optional[float] = Field(1.0, gt=0)


class ModelSettings(_Strict):
    module: Literal["ode_e", "dae"] = "ode_e"
    variant: Literal["regular", "autoencoder"] = "autoencoder"
    n_d: int = Field(16, ge=1)
    dim_x: Optional[int] = Field(None, ge=1)


class DatasetSettings(_Strict):
    policy: Literal["A", "B"] = "B"
    n: int = Field(400, ge=0)


class RunConfig(_Strict):
    """Every section is optional; values given on the command line win."""

    seed: Optional[int] = None
    jobs: int = Field(1, ge=1)
    simulation: SimulationSettings = SimulationSettings()
    training: TrainingSettings = TrainingSettings()
    model: ModelSettings = ModelSettings()
    dataset: DatasetSettings = DatasetSettings()

    def sim_config(self) -> SimulationConfig:
        return SimulationConfig(**self.simulation.model_dump())

    def training_config(self, seed: int) -> TrainingConfig:
        d = self.training.model_dump()
        clip = {"max_global_norm": d.pop("max_global_norm")}
        return TrainingConfig(**d, clip=clip, dt=self.simulation.dt, T=self.simulation.T, seed=seed)


# flag dest -> (section, key)
_OVERRIDES = {
    "dt": ("simulation", "dt"), "T": ("simulation", "T"), "v_tol": ("simulation", "v_tol"),
    "max_iter": ("simulation", "max_iter"),
    "epochs": ("training", "E"), "batch": ("training", "m"), "lr": ("training", "lr"),
    "gamma": ("training", "gamma"), "delta_e": ("training", "delta_E"), "n_train": ("training", "N_r"),
    "solver": ("training", "solver"), "clip": ("training", "max_global_norm"),
    "module": ("model", "module"), "variant": ("model", "variant"), "n_d": ("model", "n_d"),
    "dim_x": ("model", "dim_x"),
    "policy": ("dataset", "policy"), "n": ("dataset", "n"),
    "seed": (None, "seed"), "jobs": (None, "jobs"),
}


def build_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CliError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            data[key] = value
        else:
            sec = data.setdefault(section, {})
            if not isinstance(sec, dict):
                raise CliError(f"config section {section!r} must be an object")
            sec[key] = value
    cfg = RunConfig.model_validate(data)
    if cfg.seed is None:
        env = os.environ.get("NEUROGRID_SEED")
        try:
            cfg.seed = int(env) if env is not None else 0
        except ValueError:
            raise CliError(f"NEUROGRID_SEED={env!r} is not an integer") from None
    return cfg


# --- helpers ---------------------------------------------------------------------------


def _case(args):
    case = load_case(args.case)
    for item in getattr(args, "exciter_profile", None) or []:
        bus, _, profile = item.partition(":")
        try:
            case.set_exciter_profile(int(bus), profile)
        except ValueError as exc:
            raise CliError(f"--exciter-profile {item!r}: {exc}") from None
    return case


def _events(args) -> list[NetworkEvent]:
    events = []
    if getattr(args, "events", None):
        try:
            raw = json.loads(Path(args.events).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise CliError(f"events file {args.events}: {exc}") from None
        try:
            events = [NetworkEvent.from_dict(e) for e in raw]
        except (TypeError, KeyError, ValueError) as exc:
            raise CliError(f"events file {args.events}: {exc}") from None
    if getattr(args, "fault", None) is not None:
        t0, tc = args.fault_time, args.clear_after
        events += [NetworkEvent(t0, "fault_apply", bus=args.fault), NetworkEvent(t0 + tc, "fault_clear", bus=args.fault)]
    return events


def _host(case, args) -> ModelHost:
    host = ModelHost(case)
    for spec in args.model or []:
        port_text, _, path = spec.partition("=")
        if not path:
            raise CliError(f"--model expects PORT=BUNDLE, got {spec!r}")
        host.bind(Port.parse(port_text, case), load_bundle(path), args.b_prime)
    return host


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_report_csv(path, rows: list[dict], summary: dict) -> None:
    cols = list(rows[0]) if rows else ["scenario"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# format: {REPORT_FORMAT}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
        fh.write("# aggregate: " + json.dumps(summary, sort_keys=True, default=_fmt) + "\n")


def _emit(obj, out):
    text = json.dumps(obj, indent=2, default=_fmt)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --- commands --------------------------------------------------------------------------


def cmd_powerflow(args, cfg: RunConfig) -> int:
    case = _case(args)
    pf = newton_power_flow(case)
    if args.json:
        _emit(pf.to_dict(), args.out)
        return 0
    lines = [f"{case.name}: converged in {pf.iterations} iterations, mismatch {pf.mismatch:.3e} p.u.",
             f"{'bus':>5} {'vm':>9} {'va_deg':>10} {'p_inj':>9} {'q_inj':>9}"]
    for row in pf.to_dict()["buses"]:
        lines.append(f"{row['id']:>5} {row['vm']:9.5f} {row['va_deg']:10.4f} {row['p_inj']:9.4f} {row['q_inj']:9.4f}")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    case = _case(args)
    target = _host(case, args) if args.model else case
    tr = simulate(target, _events(args), cfg.sim_config())
    tr.to_csv(args.out)
    state = "stable" if tr.stable else f"unstable at t={tr.T_s:.2f}s"
    print(f"wrote {len(tr.t)} rows to {args.out} ({state})")
    return 0


def cmd_gen_data(args, cfg: RunConfig) -> int:
    case = _case(args)
    port = Port.parse(args.component, case)
    m = build_dataset(case, port, cfg.dataset.policy, cfg.dataset.n, args.outdir, cfg.seed, cfg.sim_config(),
                      jobs=cfg.jobs)
    problems = check_dataset(args.outdir)
    for p in problems:
        log.error(p)
    c = m["counts"]
    print(f"{c['total']} samples ({c['train']} train / {c['test']} test) in {args.outdir}")
    return 1 if problems else 0


def _dims_for(manifest) -> dict:
    p = manifest["port"]
    return portal_dims(Port(p["kind"], p["bus"], p["region"]))


def cmd_train(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.manifest)
    tcfg = cfg.training_config(cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model = bundle_from_dict(resume["model"])
    else:
        dims = _dims_for(ds.manifest)
        ms = cfg.model
        if ms.module == "dae":
            dims["dim_x"] = ms.dim_x or 4
        elif dims["dim_x"] == 0:
            raise CliError("an ODE-E model needs measurable states; use --module dae for power devices")
        model = make_model(ms.module, ms.variant, IoSpec(n_d=ms.n_d, **dims), cfg.seed)
    model, history = train(model, ds.train, ds.test, tcfg, LossWeights(), checkpoint=args.checkpoint, resume=resume)
    save_bundle(model, args.out)
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    write_metrics_csv(metrics, history)
    last = history[-1] if history else None
    print(f"saved {args.out}; metrics in {metrics}" + (f"; final test loss {last.test_loss:.4g}" if last else ""))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.manifest)
    model = load_bundle(args.model)
    samples = ds.test if args.split == "test" else ds.train
    res = evaluate(model, samples, cfg.training.solver)
    _emit({"split": args.split, **res.to_dict()}, args.out)
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    case = _case(args)
    if not args.model:
        raise CliError("compare needs --model PORT=BUNDLE (or --model self for analytical against analytical)")
    host = _host(case, args) if args.model != ["self"] else ModelHost(case)
    scfg = cfg.sim_config()
    if args.scenarios:
        ds_manifest = json.loads(Path(args.scenarios).read_text()) if Path(args.scenarios).is_file() else \
            json.loads((Path(args.scenarios) / "manifest.json").read_text())
        specs = scenarios_from_manifest(ds_manifest, args.split)
    else:
        specs = [s.spec for s in sample_scenarios(case, cfg.dataset.policy, cfg.dataset.n, cfg.seed, scfg, jobs=cfg.jobs)]
    ports = list(host.entries)
    keys = default_keys(ports[0]) if ports else {"efd": ("efd", case.generators[0].bus)}
    rows, summary = compare_scenarios(case, specs, host, scfg, keys)
    write_report_csv(args.out, rows, summary)
    print(json.dumps(summary, default=_fmt))
    return 0


def cmd_export_csv(args, cfg: RunConfig) -> int:
    root = Path(args.manifest)
    if root.is_file() and root.suffix == ".ngts":
        paths = [root]
    else:
        ds = load_dataset(args.manifest)
        base = root if root.is_dir() else root.parent
        paths = [base / f["file"] for f in ds.manifest["files"]]
        if args.index is not None:
            paths = [paths[args.index]]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for p in paths:
        s = read_sample(p)
        cols = ["t"] + [f"{n}{j}" for n in ("x", "i", "v", "z") for j in range(getattr(s, n).shape[1])]
        data = np.column_stack([s.t[:, None], s.x, s.i, s.v, s.z])
        dest = outdir / (p.stem + ".csv")
        with open(dest, "w", newline="") as fh:
            fh.write(f"# format: {SAMPLE_CSV_FORMAT}\n")
            w = csv.writer(fh)
            w.writerow(cols + ["event"])
            mask = s.event_mask()
            for k, row in enumerate(data):
                w.writerow([repr(float(v)) for v in row] + [int(mask[k])])
    print(f"wrote {len(paths)} file(s) to {outdir}")
    return 0


# --- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation failures; 2 is reserved for numerics
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="neurogrid", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker processes (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--dt", type=float)
    sim.add_argument("--T", type=float, help="horizon in seconds")
    sim.add_argument("--v-tol", dest="v_tol", type=float)
    sim.add_argument("--max-iter", dest="max_iter", type=int)
    casep = argparse.ArgumentParser(add_help=False)
    casep.add_argument("case", help="built-in case name or JSON file")
    casep.add_argument("--exciter-profile", action="append", metavar="GEN:PROFILE",
                       help="swap an exciter's parameter profile, e.g. 3:limited")
    hosting = argparse.ArgumentParser(add_help=False)
    hosting.add_argument("--model", action="append", metavar="PORT=BUNDLE",
                         help="replace a component by a trained model, e.g. exciter:3=model.json")
    hosting.add_argument("--b-prime", dest="b_prime", type=float, default=-50.0)

    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", parents=[common, casep], help="solve the power flow")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_powerflow)

    p = sub.add_parser("simulate", parents=[common, casep, sim, hosting], help="time-domain simulation to CSV")
    p.add_argument("--events", help="JSON list of network events")
    p.add_argument("--fault", type=int, metavar="BUS", help="three-phase fault at BUS")
    p.add_argument("--fault-time", dest="fault_time", type=float, default=1.0)
    p.add_argument("--clear-after", dest="clear_after", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gen-data", parents=[common, casep, sim], help="sample scenarios and write a dataset")
    p.add_argument("--component", required=True, help="exciter:GEN, device:BUS or region:NAME")
    p.add_argument("--policy", choices=["A", "B"])
    p.add_argument("--n", type=int)
    p.add_argument("--outdir", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, sim], help="train a surrogate on a dataset")
    p.add_argument("manifest")
    p.add_argument("--module", choices=["ode_e", "dae"])
    p.add_argument("--variant", choices=["regular", "autoencoder"])
    p.add_argument("--n-d", dest="n_d", type=int)
    p.add_argument("--dim-x", dest="dim_x", type=int, help="fictitious state size of a DAE model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta-e", dest="delta_e", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--solver", choices=["euler", "midpoint", "rk4"])
    p.add_argument("--clip", type=float, help="global gradient-norm bound")
    p.add_argument("--checkpoint")
    p.add_argument("--resume")
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common, sim], help="error metrics of a model on a dataset split")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--solver", choices=["euler", "midpoint", "rk4"])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", parents=[common, casep, sim, hosting],
                       help="analytical vs neural-integrated runs over a scenario set")
    p.add_argument("--scenarios", help="dataset manifest whose scenarios are rerun")
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.add_argument("--policy", choices=["A", "B"])
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("export-csv", parents=[common], help="dataset samples as CSV")
    p.add_argument("manifest", help="manifest, dataset directory or a single .ngts file")
    p.add_argument("--index", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_csv)
    return top


NUMERICAL = (PowerFlowError, SingularNetworkError, SimulationError, TrainingDiverged, IntegrationDiverged, np.linalg.LinAlgError)
INVALID = (CliError, CaseError, DatasetError, ComponentError, ValidationError, NetworkError, ValueError,
           FileNotFoundError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.fn(args, cfg)
    except NUMERICAL as exc:
        print(f"neurogrid: numerical failure: {exc}", file=sys.stderr)
        return 2
    except INVALID as exc:
        print(f"neurogrid: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
