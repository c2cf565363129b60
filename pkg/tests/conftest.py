import numpy as np
import pytest

from scinets.autodiff import Tape, Tensor, finite_diff_grad


def gradcheck(fn, inputs, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the list of input tensors to a scalar tensor.
    """
    with Tape() as tape:
        loss = fn(inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        numeric = finite_diff_grad(lambda _: fn(inputs), t, eps)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
