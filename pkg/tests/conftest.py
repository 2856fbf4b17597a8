import numpy as np
import pytest

from qsa.rng import stream


@pytest.fixture
def rng():
    return stream(b"tests", "default")


def gate_by_gate_matrix(circuit):
    """Dense oracle: embed each gate's matrix with Kronecker products and multiply."""
    from qsa import qsim

    n = circuit.n
    total = np.eye(2**n, dtype=complex)
    for g in circuit.gates:
        local = qsim.gate_matrix(g)
        full = np.zeros((2**n, 2**n), dtype=complex)
        k = len(g.targets)
        for col in range(2**n):
            sub = sum(((col >> t) & 1) << i for i, t in enumerate(g.targets))
            rest = col
            for t in g.targets:
                rest &= ~(1 << t)
            for out in range(2**k):
                row = rest | sum(((out >> i) & 1) << t for i, t in enumerate(g.targets))
                full[row, col] += local[out, sub]
        total = full @ total
    return total


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
