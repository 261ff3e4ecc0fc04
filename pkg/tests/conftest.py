import numpy as np
import pytest
from hypothesis import settings

from meshadv.mesh import Mesh, icosphere

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def bumpy_sphere(seed: int, subdivisions: int = 2, amplitude: float = 0.15) -> Mesh:
    """Icosphere with a smooth random radial perturbation."""
    base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    p = base.vertices
    bump = np.zeros(len(p))
    for _ in range(3):
        d = rng.normal(size=3)
        bump += amplitude * rng.uniform(-1, 1) * (p @ (d / np.linalg.norm(d))) ** 2
    return base.with_vertices(p * (1.0 + bump)[:, None])


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


@pytest.fixture(scope="session")
def synthetic():
    from meshadv.dataset import generate_synthetic
    return generate_synthetic(0)


def numeric_gradient(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` at array ``x`` (step scaled by value magnitude)."""
    x = np.array(x, dtype=np.float64)
    step = h * max(1.0, np.abs(x).max())
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn(x)
        flat[i] = old - step
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def tape_gradient(fn, x):
    """Value and gradient of a tape-built scalar ``fn(Tensor)`` at ``x``."""
    from meshadv.grad import Tape, Tensor
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        out = fn(t)
        tape.backward(out)
    return out.item(), t.grad


def relative_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


def check_gradient(fn, x, h=1e-5):
    """Max relative error between tape and finite-difference gradients."""
    _, g = tape_gradient(fn, x)
    num = numeric_gradient(lambda v: fn(v).item(), x, h)
    return relative_error(g, num)


@pytest.fixture(scope="session")
def trained(synthetic):
    """Short-schedule classifier on the seed-0 synthetic dataset."""
    from meshadv.classifier import train_classifier
    from meshadv.config import RunConfig
    net, _ = train_classifier(synthetic, RunConfig(epochs=40))
    return net


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
