"""Portal-measurement trajectories and their batched form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class TrajectorySample:
    """One scenario's measurements on a uniform grid.

    ``x`` holds measurable states (may have zero columns), ``i``/``v`` the portal
    current and voltage of a power device, ``z`` the external inputs including
    the steady-state entries taken at t = 0.
    """

    t: np.ndarray
    x: np.ndarray
    i: np.ndarray
    v: np.ndarray
    z: np.ndarray
    t_event: list[float] = field(default_factory=list)
    stable: bool = True
    T_s: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        n = len(self.t)
        for name in ("x", "i", "v", "z"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1 and arr.size == 0:
                arr = arr.reshape(n, 0)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n}, d)")
            setattr(self, name, arr)
        self.t_event = [float(t) for t in self.t_event]

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def event_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.t), dtype=bool)
        if len(self.t) < 2:
            return mask
        dt = self.dt
        for te in self.t_event:
            k = int(round((te - self.t[0]) / dt))
            if 0 <= k < len(self.t) and abs(self.t[k] - te) < 0.5 * dt:
                mask[k] = True
        return mask

    def truncated(self, n: int) -> "TrajectorySample":
        return TrajectorySample(
            self.t[:n], self.x[:n], self.i[:n], self.v[:n], self.z[:n],
            [te for te in self.t_event if te < self.t[n - 1] + 1e-9] if n else [],
            self.stable, self.T_s, dict(self.meta),
        )

    def equals(self, other: "TrajectorySample") -> bool:
        return (
            all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("t", "x", "i", "v", "z"))
            and self.t_event == other.t_event
            and self.stable == other.stable
            and self.T_s == other.T_s
        )


@dataclass
class Batch:
    """Time-major stack of samples padded to a common grid.

    Arrays are shaped (K, B, d); ``events`` and ``mask`` are (K, B).
    """

    t: np.ndarray
    x: np.ndarray
    i: np.ndarray
    v: np.ndarray
    z: np.ndarray
    events: np.ndarray
    lengths: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.t)

    @property
    def size(self) -> int:
        return self.x.shape[1]

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.n_points)[:, None] < self.lengths[None, :]


def collate(samples: Sequence[TrajectorySample]) -> Batch:
    """Stack samples; shorter ones are padded by repeating their last point."""
    if not samples:
        raise ValueError("cannot collate an empty batch")
    longest = max(samples, key=len)
    K = len(longest)
    t = longest.t
    dt = longest.dt
    for s in samples:
        if len(s) > 1 and (abs(s.dt - dt) > 1e-12 or not np.allclose(s.t, t[: len(s)])):
            raise ValueError("samples are not on a common time grid")

    def stack(name):
        out = []
        for s in samples:
            arr = getattr(s, name)
            if len(arr) < K:
                pad = np.repeat(arr[-1:], K - len(arr), axis=0)
                arr = np.concatenate([arr, pad], axis=0)
            out.append(arr)
        return np.ascontiguousarray(np.stack(out, axis=1))

    events = np.zeros((K, len(samples)), dtype=bool)
    for b, s in enumerate(samples):
        events[: len(s), b] = s.event_mask()
    lengths = np.array([len(s) for s in samples], dtype=int)
    return Batch(t.copy(), stack("x"), stack("i"), stack("v"), stack("z"), events, lengths)
