"""Mini-batch training with adjoint gradients, global-norm clipping and Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..nn import AdamState, ClipConfig, adam_step, clip_global_norm
from ..samples import TrajectorySample, collate
from .dynamics import TABLEAUX, IntegrationDiverged, LossWeights, compute_loss, integrate_forward, adjoint_backward
from .models import NeuralModel, bundle_from_dict, bundle_to_dict

log = logging.getLogger(__name__)

METRICS_FORMAT = "neurogrid-metrics/1"
CHECKPOINT_FORMAT = "neurogrid-checkpoint/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: NeuralModel, epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


@dataclass
class TrainingConfig:
    N_r: int | None = None
    m: int = 32
    E: int = 100
    delta_E: int = 10
    lr: float = 0.005
    gamma: float = 0.7
    dt: float = 0.01
    T: float = 10.0
    solver: str = "euler"
    clip: ClipConfig = field(default_factory=ClipConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.clip, dict):
            self.clip = ClipConfig(**self.clip)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        steps = self.T / self.dt
        if not self.T > 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("T must be a positive multiple of dt")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.m < 1 or self.E < 0 or self.delta_E < 1:
            raise ValueError("m >= 1, E >= 0 and delta_E >= 1 required")
        if self.N_r is not None and self.N_r < 1:
            raise ValueError("N_r must be positive")
        if self.solver not in TABLEAUX:
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def n_points(self) -> int:
        return int(round(self.T / self.dt)) + 1

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: damped by gamma every E/10 epochs."""
        period = max(1, self.E // 10)
        return self.lr * self.gamma ** (epoch // period)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = {"max_global_norm": self.clip.max_global_norm}
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    lr: float
    wall_seconds: float


@dataclass
class EvalMetrics:
    loss: float
    delta_x: np.ndarray
    delta_i: np.ndarray | None
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "delta_x": self.delta_x.tolist(),
            "delta_i": None if self.delta_i is None else self.delta_i.tolist(),
            "n_samples": self.n_samples,
        }


def prepare(samples: Sequence[TrajectorySample], cfg: TrainingConfig) -> list[TrajectorySample]:
    out = []
    for s in samples:
        if len(s) > 1 and abs(s.dt - cfg.dt) > 1e-9:
            raise ValueError(f"sample step {s.dt} does not match configured dt {cfg.dt}")
        out.append(s.truncated(cfg.n_points) if len(s) > cfg.n_points else s)
    return out


def _batches(n: int, m: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + m] for i in range(0, n, m)]


def _batch_step(model, samples, cfg, weights, state, lr):
    batch = collate(samples)
    pred = integrate_forward(model, batch, cfg.solver)
    loss = compute_loss(pred, batch, weights)
    if not math.isfinite(loss.loss):
        raise FloatingPointError("non-finite loss")
    grads = adjoint_backward(model, pred, batch, loss, weights)
    scale = 1.0 / batch.size
    flat = [g * scale for g in model.flat_grads(grads)]
    if not all(np.all(np.isfinite(g)) for g in flat):
        raise FloatingPointError("non-finite gradient")
    flat = clip_global_norm(flat, cfg.clip)
    adam_step(model.parameters(), flat, state, lr)
    return loss.loss


def evaluate(
    model: NeuralModel,
    samples: Sequence[TrajectorySample],
    solver: str = "euler",
    weights: LossWeights | None = None,
    batch_size: int = 64,
) -> EvalMetrics:
    """Mean loss per sample and per-variable mean absolute error per step."""
    samples = list(samples)
    if not samples:
        return EvalMetrics(float("nan"), np.zeros(model.io.dim_x), None, 0)
    total = 0.0
    sx = np.zeros(model.io.dim_x)
    si = np.zeros(model.io.dim_i) if model.is_dae else None
    n_steps = 0
    has_x = False
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size])
        pred = integrate_forward(model, batch, solver)
        total += compute_loss(pred, batch, weights).loss
        mask = batch.mask[..., None]
        n_steps += int(batch.mask.sum())
        if batch.x.shape[-1] == model.io.dim_x and model.io.dim_x:
            has_x = True
            sx += np.sum(np.abs(pred.x - batch.x) * mask, axis=(0, 1))
        if si is not None:
            si += np.sum(np.abs(pred.i - batch.i) * mask, axis=(0, 1))
    delta_x = sx / n_steps if has_x else np.full(model.io.dim_x, np.nan)
    return EvalMetrics(total / len(samples), delta_x, None if si is None else si / n_steps, len(samples))


def train(
    model: NeuralModel,
    train_set: Sequence[TrajectorySample],
    test_set: Sequence[TrajectorySample] = (),
    cfg: TrainingConfig | None = None,
    weights: LossWeights | None = None,
    checkpoint: str | Path | None = None,
    resume: dict | None = None,
) -> tuple[NeuralModel, list[EpochRecord]]:
    """Train ``model`` in place and return it with the evaluation history.

    A row is added to the history every ``delta_E`` epochs and after the last
    epoch. With ``checkpoint`` set, the optimizer state is written after each
    epoch so an interrupted run can continue via ``resume``.
    """
    cfg = cfg or TrainingConfig()
    train_set = prepare(train_set, cfg)
    test_set = prepare(test_set, cfg)
    if cfg.N_r is not None:
        train_set = train_set[: cfg.N_r]
    history: list[EpochRecord] = []
    if cfg.E == 0:
        return model, history
    if not train_set:
        raise ValueError("empty training set")

    state = AdamState.zeros(model.parameters())
    first = 0
    if resume is not None:
        restored = bundle_from_dict(resume["model"])
        for dst, src in zip(model.parameters(), restored.parameters()):
            dst[...] = src
        state = AdamState([np.array(a) for a in resume["adam"]["m"]], [np.array(a) for a in resume["adam"]["v"]],
                          int(resume["adam"]["t"]))
        first = int(resume["epoch"])
        history = [EpochRecord(**r) for r in resume.get("history", [])]

    good = model.copy()
    t0 = time.perf_counter()
    for epoch in range(first, cfg.E):
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        running, seen = 0.0, 0
        try:
            for idx in _batches(len(train_set), cfg.m, rng):
                running += _batch_step(model, [train_set[j] for j in idx], cfg, weights, state, lr)
                seen += len(idx)
        except (FloatingPointError, IntegrationDiverged) as exc:
            for dst, src in zip(model.parameters(), good.parameters()):
                dst[...] = src
            raise TrainingDiverged(f"training diverged in epoch {epoch + 1}: {exc}", model, epoch) from exc
        good = model.copy()
        done = epoch + 1
        if done % cfg.delta_E == 0 or done == cfg.E:
            test_loss = evaluate(model, test_set, cfg.solver, weights).loss if test_set else float("nan")
            rec = EpochRecord(done, running / seen, test_loss, lr, time.perf_counter() - t0)
            history.append(rec)
            log.info("epoch %d train %.4g test %.4g lr %.3g", done, rec.train_loss, rec.test_loss, lr)
        if checkpoint is not None:
            save_checkpoint(checkpoint, model, state, done, history)
    return model, history


def save_checkpoint(path, model: NeuralModel, state: AdamState, epoch: int, history: list[EpochRecord]) -> None:
    data = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "model": bundle_to_dict(model),
        "adam": {"m": [a.tolist() for a in state.m], "v": [a.tolist() for a in state.v], "t": state.t},
        "history": [asdict(r) for r in history],
    }
    Path(path).write_text(json.dumps(data))


def load_checkpoint(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a training checkpoint")
    return data


def write_metrics_csv(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format: {METRICS_FORMAT}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "test_loss", "lr", "wall_seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.lr), f"{r.wall_seconds:.3f}"])


def read_metrics_csv(path) -> list[EpochRecord]:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    return [
        EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["test_loss"]), float(r["lr"]),
                    float(r["wall_seconds"]))
        for r in reader
    ]
