import numpy as np
import pytest

from apgnn import tensor as tn


@pytest.fixture(autouse=True)
def _fresh_tape():
    """Every test starts in 64-bit mode with an empty tape."""
    old = tn.get_dtype()
    tn.set_precision(64)
    tn.clear_tape()
    yield
    tn.clear_tape()
    tn._state.dtype = old
    tn._state.grad_enabled = True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_grads(build, inputs, h=1e-5, tol=1e-3):
    """``build(*tensors)`` returns a scalar Tensor; compare every input's
    analytic gradient with central differences."""
    ts = [tn.Tensor(x, requires_grad=True) for x in inputs]
    tn.backward(build(*ts))

    def value():
        with tn.no_grad():
            return float(build(*ts).data)

    errs = []
    for t in ts:
        num = fd_grad(value, t.data, h)
        errs.append(rel_err(t.grad, num))
    assert max(errs) <= tol, errs
    return errs


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
