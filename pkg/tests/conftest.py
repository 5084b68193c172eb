import numpy as np
import pytest
import torch

from modalmem.data import generate_dataset


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 scenes at 32x32, three modalities, three classes."""
    out = tmp_path_factory.mktemp("tiny")
    return generate_dataset(3, 12, 32, ["intensity", "edge_event", "sparse_range"], 3, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number, name, passed, detail):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
