import numpy as np
import pytest
import torch

from fasterdan.vocab import Vocabulary

from .helpers import CHARS


@pytest.fixture
def vocab():
    return Vocabulary(CHARS, ("P",))


@pytest.fixture
def flat_vocab():
    return Vocabulary(CHARS)


@pytest.fixture
def two_class_vocab():
    return Vocabulary(CHARS, ("P", "M"))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
