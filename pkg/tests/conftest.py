import numpy as np
import pytest
import torch

from edpose.config import desk_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def tiny_cfg():
    """Very small model used by structural tests."""
    return desk_config().replace(
        model={"d_model": 32, "num_queries": 12, "num_select": 4, "n_heads": 4, "n_points": 2,
               "d_ffn": 64, "enc_layers": 1},
        optim={"batch_size": 2})


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str = ""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
