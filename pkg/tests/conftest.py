import numpy as np
import pytest

from msfpt import tensor as T
from msfpt.config import ModelConfig
from msfpt.tensor import Tensor, finite_diff_grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_op_grads(op, inputs, seed=0, eps=1e-4):
    """Compare backward() with central differences for every input of ``op``.

    The scalar objective is sum(op(*inputs) * R) for a fixed random R, so every
    output element contributes with a distinct weight.  Returns the worst
    relative error.
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = op(*leaves)
    proj = Tensor(rng.standard_normal(out.shape))

    def objective(args):
        return T.sum_(T.mul(op(*args), proj))

    objective(leaves).backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(t, k=k):
            args = [Tensor(l.data) for l in leaves]
            args[k] = t
            return objective(args)
        numeric = finite_diff_grad(f, leaf, eps)
        worst = max(worst, rel_err(leaf.grad, numeric))
    return worst


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    """Small float64 config for finite-difference checks (about 2.4k trainable parameters)."""
    base = dict(d_model=4, n_layers=1, n_heads=2, d_mlp=8, grid=(3, 3), block_channels=2, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def small_config(**kw) -> ModelConfig:
    """Fast float32 config for behavioural tests."""
    base = dict(d_model=16, n_layers=1, n_heads=2, d_mlp=32, grid=(4, 4), block_channels=4)
    base.update(kw)
    return ModelConfig(**base)


def random_image(rng, size=32, batch=None):
    shape = (3, size, size) if batch is None else (batch, 3, size, size)
    return rng.random(shape)


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
