import numpy as np
import pytest

from neurogrid.grid.cases import load_case
from neurogrid.neural.dynamics import compute_loss, integrate_forward
from neurogrid.samples import TrajectorySample


def random_sample(rng, io, K, dt=0.01, events=()):
    t = np.arange(K) * dt
    return TrajectorySample(
        t,
        rng.normal(size=(K, io.dim_x)) if io.dim_x and io.dim_i == 0 else np.zeros((K, 0)),
        rng.normal(size=(K, io.dim_i)),
        rng.normal(size=(K, io.dim_v)),
        rng.normal(size=(K, io.dim_z)),
        [t[k] for k in events],
    )


def perturb(model, rng, scale=0.1):
    for b in model.blocks.values():
        for tt in b.tensors():
            tt += scale * rng.normal(size=tt.shape)
    return model


def fd_worst(model, batch, grads, solver="euler", h=1e-5, weights=None):
    """Largest relative deviation between adjoint and central-difference gradients."""
    worst = 0.0
    for p, g in zip(model.parameters(), model.flat_grads(grads)):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = compute_loss(integrate_forward(model, batch, solver), batch, weights).loss
            p[idx] = keep - h
            dn = compute_loss(integrate_forward(model, batch, solver), batch, weights).loss
            p[idx] = keep
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
    return worst


@pytest.fixture(scope="session")
def ieee9():
    return load_case("ieee9")


@pytest.fixture(scope="session")
def ieee9_region():
    return load_case("ieee9_region")


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:<4}{'PASS' if ok else 'FAIL'}  {detail}")
