"""Dense MLP machinery: forward pass, vector-Jacobian products, Adam, clipping.

Everything is float64 and operates on plain numpy arrays. Inputs may carry any
number of leading batch dimensions; the last axis is the feature axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("elu",)


class ParamFileError(ValueError):
    """Raised when a parameter file is malformed or does not match its spec."""


def elu(u):
    """Exponential linear unit with alpha = 1."""
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0.0, u, np.expm1(np.minimum(u, 0.0)))


def elu_grad(u):
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0.0, 1.0, np.exp(np.minimum(u, 0.0)))


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "elu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least 2 widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class MlpParams:
    """Per-layer weights ``W_l`` (out x in) and biases ``b_l`` (out)."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("layer count does not match spec")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.spec.widths[l], self.spec.widths[l + 1]
            if W.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ValueError(
                    f"layer {l}: expected W {(n_out, n_in)} and b {(n_out,)}, "
                    f"got {W.shape} and {b.shape}"
                )

    def tensors(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            self.spec, [np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def add_(self, other: "MlpParams", scale: float = 1.0) -> "MlpParams":
        for a, b in zip(self.tensors(), other.tensors()):
            a += scale * b
        return self

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(spec, weights, biases)


def zero_mlp(spec: MlpSpec) -> MlpParams:
    return MlpParams(
        spec,
        [np.zeros((o, i)) for i, o in zip(spec.widths[:-1], spec.widths[1:])],
        [np.zeros(o) for o in spec.widths[1:]],
    )


def _as_input(params: MlpParams, x) -> tuple[np.ndarray, tuple[int, ...]]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (params.spec.n_in,):
        raise ValueError(f"input width {x.shape[-1:]} does not match spec input {params.spec.n_in}")
    lead = x.shape[:-1]
    return x.reshape(-1, params.spec.n_in), lead


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Affine-then-ELU per hidden layer, affine output layer."""
    h, lead = _as_input(params, x)
    last = params.spec.n_layers - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if l < last:
            h = elu(h)
    return h.reshape(lead + (params.spec.n_out,))


def mlp_vjp(params: MlpParams, x, cotangent) -> tuple[np.ndarray, MlpParams]:
    """Return ``(J^T c, dparams)`` for the MLP evaluated at ``x``.

    Parameter gradients are summed over all leading (batch) dimensions.
    """
    h, lead = _as_input(params, x)
    c = np.asarray(cotangent, dtype=float)
    if c.shape != lead + (params.spec.n_out,):
        raise ValueError(f"cotangent shape {c.shape} does not match output {lead + (params.spec.n_out,)}")
    c = c.reshape(-1, params.spec.n_out)

    inputs, pre = [], []
    last = params.spec.n_layers - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ W.T + b
        if l < last:
            pre.append(a)
            h = elu(a)
        else:
            h = a

    gW = [None] * (last + 1)
    gb = [None] * (last + 1)
    g = c
    for l in range(last, -1, -1):
        if l < last:
            g = g * elu_grad(pre[l])
        gW[l] = g.T @ inputs[l]
        gb[l] = g.sum(axis=0)
        g = g @ params.weights[l]
    return g.reshape(lead + (params.spec.n_in,)), MlpParams(params.spec, gW, gb)


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: list[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass(frozen=True)
class ClipConfig:
    max_global_norm: float = 1.0

    def __post_init__(self):
        if not self.max_global_norm > 0:
            raise ValueError("max_global_norm must be positive")


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], cfg: ClipConfig) -> list[np.ndarray]:
    norm = global_norm(grads)
    if norm <= cfg.max_global_norm:
        return list(grads)
    scale = cfg.max_global_norm / norm
    return [g * scale for g in grads]


# --- serialization -------------------------------------------------------------


def params_to_dict(params: MlpParams) -> dict:
    return {
        "spec": {"widths": list(params.spec.widths), "activation": params.spec.activation},
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(params.weights, params.biases)],
    }


def params_from_dict(data: dict, expected: MlpSpec | None = None) -> MlpParams:
    try:
        spec = MlpSpec(tuple(data["spec"]["widths"]), data["spec"].get("activation", "elu"))
        layers = data["layers"]
        weights = [np.array(layer["W"], dtype=float).reshape(-1, spec.widths[l]) for l, layer in enumerate(layers)]
        biases = [np.array(layer["b"], dtype=float).reshape(-1) for layer in layers]
        params = MlpParams(spec, weights, biases)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParamFileError(f"malformed MLP parameters: {exc}") from exc
    if expected is not None and spec != expected:
        raise ParamFileError(f"parameter spec {spec.widths} does not match expected {expected.widths}")
    if not all(np.all(np.isfinite(t)) for t in params.tensors()):
        raise ParamFileError("parameters contain non-finite values")
    return params


def save_params(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_params(path, expected: MlpSpec | None = None) -> MlpParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParamFileError(f"{path}: not valid JSON ({exc})") from exc
    return params_from_dict(data, expected)
