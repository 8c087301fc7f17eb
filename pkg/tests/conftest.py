import numpy as np
import pytest

from dfl import tensor_core as tc
from dfl.tensor_core import Tensor


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of scalar f(*arrays) w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f(*arrays)
            a[i] = old - eps
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def autodiff_grad(build, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*ts)
    tc.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def assert_grads_close(build, arrays, rtol=1e-4, atol=1e-6, eps=1e-5):
    """Compare autodiff with central differences on the scalar built by ``build``."""
    def f(*xs):
        with tc.no_grad():
            return build(*[Tensor(x) for x in xs]).item()

    auto = autodiff_grad(build, arrays)
    num = numeric_grad(f, [a.copy() for a in arrays], eps)
    for i, (ga, gn) in enumerate(zip(auto, num)):
        err = np.abs(ga - gn)
        tol = rtol * np.maximum(np.abs(ga), np.abs(gn)) + atol
        assert np.all(err <= tol), f"input {i}: max err {err.max():.3e}"


def projected(op, rng):
    """Wrap an op so the check covers the whole Jacobian: sum(op(...) * R) for a fixed random R."""
    cache = {}

    def build(*ts):
        out = op(*ts)
        if "r" not in cache:
            cache["r"] = rng.normal(size=out.shape)
        return tc.sum(tc.mul(out, Tensor(cache["r"])))

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::test_criterion_" in rep.nodeid:
                name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
                lines.append(f"criterion {name}: {'PASS' if outcome == 'passed' else 'FAIL'}")
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
