"""Neural ODE-E and neural DAE model containers.

A model is a set of named MLP blocks plus its interface dimensions:

    ode      derivative function (theta)
    ae       algebraic current function phi (xi), DAE only
    learner  initial value learner h (zeta), DAE only
    enc_*    encoders into the hidden space (autoencoder variant)
    dec_*    decoders back to the original space (autoencoder variant)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..nn import MlpParams, MlpSpec, ParamFileError, init_mlp, mlp_forward, params_from_dict, params_to_dict

BUNDLE_FORMAT = "neurogrid-bundle/1"
MODULE_TYPES = ("ode_e", "dae")
VARIANTS = ("regular", "autoencoder")

# Fixed iteration order over blocks; gradients and optimizer state follow it.
BLOCK_ORDER = ("ode", "ae", "learner", "enc_x", "enc_i", "enc_v", "enc_z", "dec_x", "dec_i")


@dataclass(frozen=True)
class IoSpec:
    dim_x: int
    dim_z: int = 0
    dim_i: int = 0
    dim_v: int = 0
    n_d: int = 16

    def to_dict(self) -> dict:
        return {"dim_x": self.dim_x, "dim_i": self.dim_i, "dim_v": self.dim_v, "dim_z": self.dim_z, "n_d": self.n_d}


@dataclass
class NeuralModel:
    module_type: str
    variant: str
    io: IoSpec
    blocks: dict[str, MlpParams]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.module_type not in MODULE_TYPES:
            raise ValueError(f"unknown module type {self.module_type!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self._check_blocks()

    # -- structure ---------------------------------------------------------

    @property
    def is_dae(self) -> bool:
        return self.module_type == "dae"

    @property
    def is_ae(self) -> bool:
        return self.variant == "autoencoder"

    @property
    def state_dim(self) -> int:
        """Dimension of the integrated state (x, or hidden X for the autoencoder variant)."""
        return self.io.n_d if self.is_ae else self.io.dim_x

    @property
    def current_dim(self) -> int:
        return self.io.n_d if self.is_ae else self.io.dim_i

    def encoded_dim(self, name: str) -> int:
        raw = getattr(self.io, f"dim_{name}")
        if raw == 0:
            return 0
        return self.io.n_d if self.is_ae else raw

    @property
    def has_learner(self) -> bool:
        return "learner" in self.blocks

    def _check_blocks(self):
        io = self.io
        s, zc = self.state_dim, self.encoded_dim("z")
        expect_in = {"ode": s + zc}
        expect_out = {"ode": s}
        if self.is_dae:
            vc, ic = self.encoded_dim("v"), self.current_dim
            expect_in = {"ode": s + ic + vc + zc, "ae": s + vc + zc}
            expect_out = {"ode": s, "ae": ic}
            if "learner" in self.blocks:
                expect_in["learner"] = io.dim_i + io.dim_v + io.dim_z
                expect_out["learner"] = io.dim_x
        if self.is_ae:
            for name in ("x", "z", "i", "v"):
                dim = getattr(io, f"dim_{name}")
                if dim and (name in ("x", "z") or self.is_dae):
                    expect_in[f"enc_{name}"], expect_out[f"enc_{name}"] = dim, io.n_d
            expect_in["dec_x"], expect_out["dec_x"] = io.n_d, io.dim_x
            if self.is_dae:
                expect_in["dec_i"], expect_out["dec_i"] = io.n_d, io.dim_i
        for name, n_in in expect_in.items():
            if name not in self.blocks:
                raise ValueError(f"{self.module_type}/{self.variant} model is missing block {name!r}")
            spec = self.blocks[name].spec
            if spec.n_in != n_in or spec.n_out != expect_out[name]:
                raise ValueError(
                    f"block {name!r}: widths {spec.widths} do not fit interface "
                    f"(expected input {n_in}, output {expect_out[name]})"
                )
        extra = set(self.blocks) - set(expect_in) - {"learner"}
        if extra:
            raise ValueError(f"unexpected blocks {sorted(extra)}")

    # -- parameters --------------------------------------------------------

    def block_names(self) -> list[str]:
        return [n for n in BLOCK_ORDER if n in self.blocks]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for name in self.block_names():
            out.extend(self.blocks[name].tensors())
        return out

    def zero_grads(self) -> dict[str, MlpParams]:
        return {name: self.blocks[name].zeros_like() for name in self.block_names()}

    def flat_grads(self, grads: dict[str, MlpParams]) -> list[np.ndarray]:
        out = []
        for name in self.block_names():
            out.extend(grads[name].tensors())
        return out

    def copy(self) -> "NeuralModel":
        return NeuralModel(
            self.module_type, self.variant, self.io, {k: v.copy() for k, v in self.blocks.items()}, dict(self.meta)
        )

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.blocks.values())

    # -- pointwise evaluation ------------------------------------------------

    def encode(self, name: str, value):
        value = np.asarray(value, dtype=float)
        if self.is_ae and f"enc_{name}" in self.blocks:
            return mlp_forward(self.blocks[f"enc_{name}"], value)
        return value

    def decode(self, name: str, value):
        if self.is_ae:
            return mlp_forward(self.blocks[f"dec_{name}"], value)
        return np.asarray(value, dtype=float)

    def derivative(self, s, z, i=None, v=None):
        """Time derivative of the integrated state. All arguments already encoded."""
        parts = [s]
        if self.is_dae:
            parts += [i, v]
        parts.append(z)
        return mlp_forward(self.blocks["ode"], np.concatenate(parts, axis=-1))

    def current(self, s, v, z):
        """Algebraic current phi (encoded space); DAE only."""
        return mlp_forward(self.blocks["ae"], np.concatenate([s, v, z], axis=-1))

    def learn_initial_state(self, i0, v0, z0):
        raw = np.concatenate([np.asarray(i0, float), np.asarray(v0, float), np.asarray(z0, float)], axis=-1)
        return mlp_forward(self.blocks["learner"], raw)


# --- construction ----------------------------------------------------------------


def _spec(*widths) -> MlpSpec:
    return MlpSpec(tuple(widths))


def build_blocks(module_type: str, variant: str, io: IoSpec, learner: bool = True) -> dict[str, MlpSpec]:
    """Block layouts: three hidden layers of width n_d for regular blocks,
    one hidden layer of width n_d for everything in the autoencoder variant."""
    n = io.n_d
    specs: dict[str, MlpSpec] = {}
    if variant == "regular":
        if module_type == "ode_e":
            specs["ode"] = _spec(io.dim_x + io.dim_z, n, n, n, io.dim_x)
        else:
            specs["ode"] = _spec(io.dim_x + io.dim_i + io.dim_v + io.dim_z, n, n, n, io.dim_x)
            specs["ae"] = _spec(io.dim_x + io.dim_v + io.dim_z, n, n, n, io.dim_i)
    else:
        zc = n if io.dim_z else 0
        specs["enc_x"] = _spec(io.dim_x, n, n)
        specs["dec_x"] = _spec(n, n, io.dim_x)
        if io.dim_z:
            specs["enc_z"] = _spec(io.dim_z, n, n)
        if module_type == "ode_e":
            specs["ode"] = _spec(n + zc, n, n)
        else:
            specs["enc_i"] = _spec(io.dim_i, n, n)
            specs["enc_v"] = _spec(io.dim_v, n, n)
            specs["dec_i"] = _spec(n, n, io.dim_i)
            specs["ode"] = _spec(3 * n + zc, n, n)
            specs["ae"] = _spec(2 * n + zc, n, n)
    if module_type == "dae" and learner:
        specs["learner"] = _spec(io.dim_i + io.dim_v + io.dim_z, n, n, io.dim_x)
    return specs


def make_model(
    module_type: str, variant: str, io: IoSpec, seed: int | np.random.Generator = 0, learner: bool = True
) -> NeuralModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    specs = build_blocks(module_type, variant, io, learner)
    blocks = {name: init_mlp(specs[name], rng) for name in BLOCK_ORDER if name in specs}
    return NeuralModel(module_type, variant, io, blocks)


def NeuralOdeEModel(io: IoSpec, variant: str = "regular", seed=0) -> NeuralModel:
    return make_model("ode_e", variant, io, seed)


def NeuralDaeModel(io: IoSpec, variant: str = "regular", seed=0, learner: bool = True) -> NeuralModel:
    return make_model("dae", variant, io, seed, learner)


# --- bundle file ------------------------------------------------------------------


def bundle_to_dict(model: NeuralModel) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "module_type": model.module_type,
        "variant": model.variant,
        "io_spec": model.io.to_dict(),
        "blocks": {name: params_to_dict(model.blocks[name]) for name in model.block_names()},
        "meta": model.meta,
    }


def bundle_from_dict(data: dict) -> NeuralModel:
    if not isinstance(data, dict) or data.get("format") != BUNDLE_FORMAT:
        raise ParamFileError(f"not a model bundle (expected format {BUNDLE_FORMAT!r})")
    try:
        io = IoSpec(**{k: int(data["io_spec"][k]) for k in ("dim_x", "dim_i", "dim_v", "dim_z", "n_d")})
        blocks = {name: params_from_dict(block) for name, block in data["blocks"].items()}
        return NeuralModel(data["module_type"], data["variant"], io, blocks, dict(data.get("meta", {})))
    except (KeyError, TypeError) as exc:
        raise ParamFileError(f"malformed model bundle: {exc}") from exc
    except ValueError as exc:
        raise ParamFileError(str(exc)) from exc


def save_bundle(model: NeuralModel, path) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(model)))


def load_bundle(path) -> NeuralModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParamFileError(f"{path}: not valid JSON ({exc})") from exc
    return bundle_from_dict(data)
