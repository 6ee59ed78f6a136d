"""Forward integration, weighted loss and the adjoint backward sweep.

The backward sweep is the exact discrete adjoint of the explicit Runge-Kutta
step used forward: the multiplier ``lam`` is carried from T to 0 with step -dt,
picks up the loss jump dL/dx(t_k) (plus the phi^T dL/di term for the DAE) at
every measurement instant, and parameter gradients are accumulated stage by
stage with the same weights the forward solver used. For the DAE the algebraic
multiplier is available in closed form, ``beta = -(dPsi/di)^T lam``, because
dPhi/di is the identity.

Event instants: on a step that starts at t_k in T_event the external inputs at
the start of the step are replaced by their values at t_k + dt, and the
current is recomputed from them before the derivative is taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..nn import MlpParams, mlp_forward, mlp_vjp
from ..samples import Batch, TrajectorySample, collate
from .models import NeuralModel

# Eq. weighting reads the per-instant error as an elementwise square. Flip to
# False for an elementwise absolute error instead.
SQUARED_ERROR = True

TABLEAUX: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {
    "euler": (np.zeros((1, 1)), np.array([1.0]), np.array([0.0])),
    "midpoint": (np.array([[0.0, 0.0], [0.5, 0.0]]), np.array([0.0, 1.0]), np.array([0.0, 0.5])),
    "rk4": (
        np.array([[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0]], dtype=float),
        np.array([1 / 6, 1 / 3, 1 / 3, 1 / 6]),
        np.array([0.0, 0.5, 0.5, 1.0]),
    ),
}


class IntegrationDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    w_x: np.ndarray | None = None
    w_i: np.ndarray | None = None
    w_x_ae: np.ndarray | None = None
    w_i_ae: np.ndarray | None = None

    def resolved(self, name: str, dim: int) -> np.ndarray:
        w = getattr(self, name)
        if w is None:
            return np.ones(dim)
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.shape != (dim,):
            raise ValueError(f"{name} has length {w.size}, expected {dim}")
        if np.any(w < 0):
            raise ValueError(f"{name} must be nonnegative")
        return w


@dataclass
class _Cache:
    solver: str
    h: float
    ode_in: np.ndarray  # (K-1, S, B, n_in)
    ae_in: np.ndarray | None
    use_phi0: np.ndarray | None  # (B,) samples whose first stage recomputes the current
    x0_raw: np.ndarray
    learner_in: np.ndarray | None
    grid_v: np.ndarray | None  # encoded grid inputs (K, B, .)
    grid_z: np.ndarray | None
    stage_raw_v: np.ndarray | None  # raw stage inputs (K-1, S, B, .)
    stage_raw_z: np.ndarray | None
    valid: np.ndarray  # (K-1, B)


@dataclass
class PredictedTrajectory:
    model: NeuralModel
    t: np.ndarray
    states: np.ndarray  # (K, B, n_s)
    x: np.ndarray  # (K, B, dim_x)
    i: np.ndarray | None  # (K, B, dim_i)
    cache: _Cache = field(repr=False)

    def sample_x(self, b: int = 0) -> np.ndarray:
        return self.x[:, b]

    def sample_i(self, b: int = 0) -> np.ndarray:
        return self.i[:, b]


@dataclass
class LossResult:
    loss: float
    per_sample: np.ndarray
    dL_dx: np.ndarray
    dL_di: np.ndarray | None
    observed_x: bool


def as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, TrajectorySample):
        return collate([data])
    return collate(list(data))


def _observed_x(model: NeuralModel, batch: Batch) -> bool:
    return batch.x.shape[-1] == model.io.dim_x and model.io.dim_x > 0


def _stage_inputs(u: np.ndarray, events: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Raw inputs at every stage time, shape (K-1, S, B, d)."""
    start = np.where(events[:-1, :, None], u[1:], u[:-1])
    return (1.0 - c)[None, :, None, None] * start[:, None] + c[None, :, None, None] * u[1:, None]


def _cat(*parts):
    return np.concatenate(parts, axis=-1)


def integrate_forward(model: NeuralModel, data, solver: str = "euler") -> PredictedTrajectory:
    """Integrate the neural dynamics over every sample of ``data`` on its grid."""
    batch = as_batch(data)
    if solver not in TABLEAUX:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(TABLEAUX)}")
    A, bw, c = TABLEAUX[solver]
    S = len(bw)
    K, B = batch.n_points, batch.size
    if K < 2:
        raise ValueError("need at least two grid points")
    h = batch.dt
    io = model.io
    if batch.z.shape[-1] != io.dim_z:
        raise ValueError(f"z has {batch.z.shape[-1]} columns, model expects {io.dim_z}")
    dae = model.is_dae
    if dae and (batch.i.shape[-1] != io.dim_i or batch.v.shape[-1] != io.dim_v):
        raise ValueError("current/voltage dimensions do not match the model")

    raw_z = _stage_inputs(batch.z, batch.events, c)
    enc_z = model.encode("z", raw_z)
    raw_v = enc_v = None
    if dae:
        raw_v = _stage_inputs(batch.v, batch.events, c)
        enc_v = model.encode("v", raw_v)

    learner_in = None
    if dae and model.has_learner:
        learner_in = _cat(batch.i[0], batch.v[0], batch.z[0])
        x0_raw = mlp_forward(model.blocks["learner"], learner_in)
    else:
        if not _observed_x(model, batch):
            raise ValueError("initial state needs measured x(0) or an initial value learner")
        x0_raw = batch.x[0]
    s = model.encode("x", x0_raw)

    ode = model.blocks["ode"]
    ae = model.blocks.get("ae")
    n_s = model.state_dim
    states = np.empty((K, B, n_s))
    states[0] = s
    ode_in = np.empty((K - 1, S, B, ode.spec.n_in))
    ae_in = np.empty((K - 1, S, B, ae.spec.n_in)) if dae else None
    use_phi0 = i0_enc = None
    if dae:
        use_phi0 = batch.events[0].copy()
        i0_enc = model.encode("i", batch.i[0])
    valid = np.arange(1, K)[:, None] < batch.lengths[None, :]

    for k in range(K - 1):
        s = states[k]
        ks = []
        for j in range(S):
            sj = s
            for l in range(j):
                if A[j, l]:
                    sj = sj + (h * A[j, l]) * ks[l]
            zj = enc_z[k, j]
            if dae:
                vj = enc_v[k, j]
                a_in = _cat(sj, vj, zj)
                ae_in[k, j] = a_in
                cur = mlp_forward(ae, a_in)
                if k == 0 and j == 0:
                    cur = np.where(use_phi0[:, None], cur, i0_enc)
                inp = _cat(sj, cur, vj, zj)
            else:
                inp = _cat(sj, zj)
            ode_in[k, j] = inp
            ks.append(mlp_forward(ode, inp))
        step = sum((h * bw[j]) * ks[j] for j in range(S) if bw[j])
        new = np.where(valid[k][:, None], s + step, s)
        if not np.all(np.isfinite(new)):
            bad = np.where(~np.all(np.isfinite(new), axis=1))[0]
            raise IntegrationDiverged(
                f"non-finite state at t={batch.t[k + 1]:.4f}s in batch sample(s) {bad.tolist()}"
            )
        states[k + 1] = new

    x_out = model.decode("x", states)
    i_out = grid_v = grid_z = None
    if dae:
        grid_v = model.encode("v", batch.v)
        grid_z = model.encode("z", batch.z)
        cur = mlp_forward(ae, _cat(states, grid_v, grid_z))
        cur[0] = i0_enc
        i_out = model.decode("i", cur)

    cache = _Cache(solver, h, ode_in, ae_in, use_phi0, x0_raw, learner_in, grid_v, grid_z, raw_v, raw_z, valid)
    return PredictedTrajectory(model, batch.t, states, x_out, i_out, cache)


def _err(pred, target):
    d = pred - target
    if SQUARED_ERROR:
        return d * d, 2.0 * d
    return np.abs(d), np.sign(d)


def _recon(model: NeuralModel, name: str, target: np.ndarray):
    enc = mlp_forward(model.blocks[f"enc_{name}"], target)
    return enc, mlp_forward(model.blocks[f"dec_{name}"], enc)


def compute_loss(pred: PredictedTrajectory, data, weights: LossWeights | None = None) -> LossResult:
    """Weighted per-instant error summed over the grid (masked past each sample's end)."""
    batch = as_batch(data)
    weights = weights or LossWeights()
    model = pred.model
    if batch.n_points != len(pred.t) or not np.allclose(batch.t, pred.t):
        raise ValueError("prediction and data grids do not match")
    mask = batch.mask[..., None].astype(float)
    per_sample = np.zeros(batch.size)
    obs_x = _observed_x(model, batch)
    dL_dx = np.zeros_like(pred.x)
    if obs_x:
        w = weights.resolved("w_x", model.io.dim_x)
        e, de = _err(pred.x, batch.x)
        per_sample += np.sum(mask * e * w, axis=(0, 2))
        dL_dx = mask * de * w
    dL_di = None
    if model.is_dae:
        w = weights.resolved("w_i", model.io.dim_i)
        e, de = _err(pred.i, batch.i)
        per_sample += np.sum(mask * e * w, axis=(0, 2))
        dL_di = mask * de * w
    if model.is_ae:
        if obs_x:
            w = weights.resolved("w_x_ae", model.io.dim_x)
            per_sample += np.sum(mask * _err(_recon(model, "x", batch.x)[1], batch.x)[0] * w, axis=(0, 2))
        if model.is_dae:
            w = weights.resolved("w_i_ae", model.io.dim_i)
            per_sample += np.sum(mask * _err(_recon(model, "i", batch.i)[1], batch.i)[0] * w, axis=(0, 2))
    return LossResult(float(per_sample.sum()), per_sample, dL_dx, dL_di, obs_x)


def _split(arr, sizes):
    out, start = [], 0
    for n in sizes:
        out.append(arr[..., start : start + n])
        start += n
    return out


def _acc(grads: dict[str, MlpParams], name: str, g: MlpParams):
    grads[name].add_(g)


def adjoint_backward(
    model: NeuralModel, pred: PredictedTrajectory, data, loss: LossResult, weights: LossWeights | None = None
) -> dict[str, MlpParams]:
    """Gradients of ``loss.loss`` (summed over the batch) for every block."""
    batch = as_batch(data)
    weights = weights or LossWeights()
    cache = pred.cache
    A, bw, _ = TABLEAUX[cache.solver]
    S = len(bw)
    h = cache.h
    K, B = batch.n_points, batch.size
    dae = model.is_dae
    grads = model.zero_grads()
    ode = model.blocks["ode"]
    ae = model.blocks.get("ae")
    n_s = model.state_dim
    ic = model.current_dim
    vc = model.encoded_dim("v") if dae else 0
    zc = model.encoded_dim("z")
    mask = batch.mask[..., None].astype(float)

    # direct loss terms on the grid -> cotangent on each state
    g_state = np.zeros((K, B, n_s))
    if loss.observed_x:
        if model.is_ae:
            g, gp = mlp_vjp(model.blocks["dec_x"], pred.states, loss.dL_dx)
            g_state += g
            _acc(grads, "dec_x", gp)
        else:
            g_state += loss.dL_dx
    g_grid_v = g_grid_z = None
    if dae:
        g_cur = loss.dL_di
        cur_in = _cat(pred.states, cache.grid_v, cache.grid_z)
        if model.is_ae:
            cur = mlp_forward(ae, cur_in)
            cur[0] = model.encode("i", batch.i[0])
            g_cur_enc, gp = mlp_vjp(model.blocks["dec_i"], cur, g_cur)
            _acc(grads, "dec_i", gp)
            g0, gp = mlp_vjp(model.blocks["enc_i"], batch.i[0], g_cur_enc[0])
            _acc(grads, "enc_i", gp)
        else:
            g_cur_enc = g_cur
        g_in, gp = mlp_vjp(ae, cur_in[1:], g_cur_enc[1:])
        _acc(grads, "ae", gp)
        gs, g_grid_v_, g_grid_z_ = _split(g_in, (n_s, vc, zc))
        g_state[1:] += gs
        g_grid_v = np.zeros((K, B, vc))
        g_grid_z = np.zeros((K, B, zc))
        g_grid_v[1:] = g_grid_v_
        g_grid_z[1:] = g_grid_z_

    # backward sweep
    g_stage_z = np.zeros((K - 1, S, B, zc))
    g_stage_v = np.zeros((K - 1, S, B, vc)) if dae else None
    g_override = np.zeros((B, ic)) if dae else None
    g_ode = grads["ode"]
    g_ae = grads.get("ae")
    lam = g_state[K - 1].copy()
    for k in range(K - 2, -1, -1):
        base = lam * cache.valid[k][:, None]
        if not base.any():
            lam = lam + g_state[k]
            continue
        g_stage_state = [None] * S
        for j in range(S - 1, -1, -1):
            gk = (h * bw[j]) * base if bw[j] else np.zeros_like(base)
            for l in range(j + 1, S):
                if A[l, j]:
                    gk = gk + (h * A[l, j]) * g_stage_state[l]
            g_in, gp = mlp_vjp(ode, cache.ode_in[k, j], gk)
            g_ode.add_(gp)
            if dae:
                gs, g_i, gv, gz = _split(g_in, (n_s, ic, vc, zc))
                # algebraic multiplier: beta = -(dPsi/di)^T lam
                beta = -g_i
                if k == 0 and j == 0:
                    phi_part = np.where(cache.use_phi0[:, None], -beta, 0.0)
                    g_override += np.where(cache.use_phi0[:, None], 0.0, -beta)
                else:
                    phi_part = -beta
                g_in2, gp = mlp_vjp(ae, cache.ae_in[k, j], phi_part)
                g_ae.add_(gp)
                gs2, gv2, gz2 = _split(g_in2, (n_s, vc, zc))
                gs = gs + gs2
                g_stage_v[k, j] = gv + gv2
                g_stage_z[k, j] = gz + gz2
            else:
                gs, gz = _split(g_in, (n_s, zc))
                g_stage_z[k, j] = gz
            g_stage_state[j] = gs
        lam = lam + g_state[k] + sum(g_stage_state)

    # initial condition
    g_x0 = lam
    if model.is_ae:
        g_x0, gp = mlp_vjp(model.blocks["enc_x"], cache.x0_raw, lam)
        _acc(grads, "enc_x", gp)
    if dae and model.has_learner:
        _, gp = mlp_vjp(model.blocks["learner"], cache.learner_in, g_x0)
        _acc(grads, "learner", gp)

    # encoders of the external inputs
    if model.is_ae:
        if zc:
            _, gp = mlp_vjp(model.blocks["enc_z"], cache.stage_raw_z, g_stage_z)
            _acc(grads, "enc_z", gp)
        if dae:
            _, gp = mlp_vjp(model.blocks["enc_v"], cache.stage_raw_v, g_stage_v)
            _acc(grads, "enc_v", gp)
            if zc:
                _, gp = mlp_vjp(model.blocks["enc_z"], batch.z, g_grid_z)
                _acc(grads, "enc_z", gp)
            _, gp = mlp_vjp(model.blocks["enc_v"], batch.v, g_grid_v)
            _acc(grads, "enc_v", gp)
            _, gp = mlp_vjp(model.blocks["enc_i"], batch.i[0], g_override)
            _acc(grads, "enc_i", gp)

        # reconstruction terms act on the encoder/decoder pairs directly
        for name, present in (("x", loss.observed_x), ("i", dae)):
            if not present:
                continue
            target = getattr(batch, name)
            w = weights.resolved(f"w_{name}_ae", getattr(model.io, f"dim_{name}"))
            enc, rec = _recon(model, name, target)
            _, de = _err(rec, target)
            g_enc, gp = mlp_vjp(model.blocks[f"dec_{name}"], enc, mask * de * w)
            _acc(grads, f"dec_{name}", gp)
            _, gp = mlp_vjp(model.blocks[f"enc_{name}"], target, g_enc)
            _acc(grads, f"enc_{name}", gp)
    return grads


def adjoint_backward_ode_e(model, pred, data, loss, weights=None) -> dict[str, MlpParams]:
    if model.is_dae:
        raise ValueError("model is a DAE; use adjoint_backward_dae")
    return adjoint_backward(model, pred, data, loss, weights)


def adjoint_backward_dae(model, pred, data, loss, weights=None) -> dict[str, MlpParams]:
    if not model.is_dae:
        raise ValueError("model is an ODE-E; use adjoint_backward_ode_e")
    return adjoint_backward(model, pred, data, loss, weights)


def loss_and_grads(model: NeuralModel, data, solver: str = "euler", weights: LossWeights | None = None):
    batch = as_batch(data)
    pred = integrate_forward(model, batch, solver)
    loss = compute_loss(pred, batch, weights)
    return loss, adjoint_backward(model, pred, batch, loss, weights), pred


def ode_e_derivative(model: NeuralModel, x, z):
    """Psi(x, z) in the original space (hidden space for the autoencoder variant)."""
    if model.is_dae:
        raise ValueError("not an ODE-E model")
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    if x.shape[-1] != model.state_dim or z.shape[-1] != model.io.dim_z:
        raise ValueError("dimension mismatch")
    return model.derivative(x, model.encode("z", z))


def dae_current(model: NeuralModel, x, v, z):
    """phi(x, v, z); the autoencoder variant decodes the hidden current through dec_i."""
    if not model.is_dae:
        raise ValueError("not a DAE model")
    x, v, z = (np.asarray(a, float) for a in (x, v, z))
    if x.shape[-1] != model.state_dim or v.shape[-1] != model.io.dim_v or z.shape[-1] != model.io.dim_z:
        raise ValueError("dimension mismatch")
    return model.decode("i", model.current(x, model.encode("v", v), model.encode("z", z)))


def learn_initial_state(model: NeuralModel, i0, v0, z0):
    if not model.has_learner:
        raise ValueError("model has no initial value learner")
    i0, v0, z0 = (np.asarray(a, float) for a in (i0, v0, z0))
    if i0.shape[-1] != model.io.dim_i or v0.shape[-1] != model.io.dim_v or z0.shape[-1] != model.io.dim_z:
        raise ValueError("dimension mismatch")
    return model.learn_initial_state(i0, v0, z0)
