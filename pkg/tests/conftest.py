import numpy as np
import pytest

from branchlab.instances import MilpInstance


def make_instance(name, c, A, b, l, u, p):
    """Dense-row helper for hand-built test instances."""
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(c)) if len(b) else np.zeros((0, len(c)))
    row_idx, col_idx, coef = [], [], []
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            if A[i, j] != 0.0:
                row_idx.append(i)
                col_idx.append(j)
                coef.append(A[i, j])
    return MilpInstance(
        name=name, num_vars=len(c), num_cons=len(b), num_int=p,
        objective=c,
        row_idx=np.array(row_idx, dtype=np.int64),
        col_idx=np.array(col_idx, dtype=np.int64),
        coef=np.array(coef, dtype=float),
        rhs=np.asarray(b, dtype=float),
        lower=np.asarray(l, dtype=float),
        upper=np.asarray(u, dtype=float),
    )


@pytest.fixture
def knapsack():
    """min -5 x1 - 4 x2  s.t.  2 x1 + 3 x2 <= 4, x binary.

    Relaxation optimum x = (1, 2/3) with value -23/3; best integer point is
    (1, 0) with value -5.
    """
    return make_instance("knapsack", [-5, -4], [[2, 3]], [4], [0, 0], [1, 1], 2)


_ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def record_acceptance(label: str, outcome: str = "PASS") -> None:
    _ACCEPTANCE_RESULTS.append((label, outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if call.when == "call" and "test_acceptance" in item.nodeid:
        label = item.name.replace("test_", "")
        if report.failed:
            _ACCEPTANCE_RESULTS.append((label, "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for label, outcome in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{outcome}: {label}")
