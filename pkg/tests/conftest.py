import numpy as np
import pytest
import torch

from abseg.experiments import smoke_config

torch.set_num_threads(1)


def tiny_run(num_classes=5, steps=2, patch=(16, 16, 16), task="task1", **training):
    return smoke_config(num_classes, steps, patch, task, **training)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def acceptance(n, ok, detail):
    """Record and print one pass/fail line for acceptance criterion ``n``."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
