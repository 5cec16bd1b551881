from __future__ import annotations

import numpy as np
import pytest

from shortcutbench import numerics as nx


def tape_grads(fn, *arrays):
    """Tape gradients of scalar ``fn`` at ``arrays`` (fresh leaves)."""
    ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
    with nx.Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return out, [t.grad for t in ts], ts


def fd_grads(fn, ts, eps=1e-3):
    return [nx.numerical_grad(lambda: fn(*ts).item(), t, eps) for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance verdict for the summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
