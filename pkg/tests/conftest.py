import numpy as np
import pytest

from dipreg.core import Tensor, backward


def numeric_grad(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*base)
        flat[i] = orig - step
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grads(build, arrays):
    """Run ``build(*tensors)`` -> scalar Tensor, backprop, return each leaf's grad."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = build(*leaves)
    backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]


def rel_error(a, b, floor=1e-6):
    """Max-abs error relative to the larger gradient; ``floor`` keeps exactly
    zero gradients (biases ahead of instance norm) from amplifying roundoff."""
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / denom)


def check_gradients(build, arrays, step=1e-5):
    """Largest relative error between analytic and finite-difference grads."""
    grads = analytic_grads(build, arrays)

    def value(*raw):
        return build(*[Tensor(r) for r in raw]).item()

    return max(rel_error(g, numeric_grad(value, arrays, i, step)) for i, g in enumerate(grads))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
