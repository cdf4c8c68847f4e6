import numpy as np
import pytest
import torch

from lazyseg.network import ArchitectureConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_arch():
    return ArchitectureConfig(input_size=16, levels=3, base_width=4, num_multitask_blocks=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.line(line)
