import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cetta.experiment import default_specs
from cetta.pretrain import pretrain_pair

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} — {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_models():
    """Pretrained default foundation/edge pair, shared across the session."""
    foundation_spec, edge_spec = default_specs()
    f_res, e_res = pretrain_pair(foundation_spec, edge_spec, seed=0)
    return {
        "foundation_spec": foundation_spec,
        "foundation": f_res,
        "edge_spec": edge_spec,
        "edge": e_res,
    }
