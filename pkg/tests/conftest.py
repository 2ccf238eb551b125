import time
from dataclasses import dataclass

import pytest

from setsim.trainer import TrainConfig, TrainState, train

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@dataclass
class DefaultRun:
    config: TrainConfig
    state: TrainState
    reports: list
    seconds: float
    out_dir: object


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> DefaultRun:
    """The default 500-step training run, shared by the acceptance criteria."""
    config = TrainConfig(checkpoint_every=250)
    out = tmp_path_factory.mktemp("default_run")
    start = time.perf_counter()
    state, reports = train(config, out_dir=out)
    return DefaultRun(config, state, reports, time.perf_counter() - start, out)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
