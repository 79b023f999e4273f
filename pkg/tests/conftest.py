import numpy as np
import pytest

from sceend import model as M

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(key, passed, detail)``."""

    def record(key: str, passed: bool, detail: str = "") -> None:
        _CRITERIA[key] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config():
    return M.ModelConfig(feat_dim=16, hidden_dim=64, num_blocks=2, num_heads=2, max_speakers=4)


@pytest.fixture
def tiny_config():
    return M.ModelConfig(feat_dim=5, hidden_dim=8, num_blocks=1, num_heads=2, ffn_dim=12,
                         max_speakers=3, eend_speakers=3, dropout=0.0)
