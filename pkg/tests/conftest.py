import time
from pathlib import Path

import pytest

from streetcrop.cli import main


@pytest.fixture(scope="session")
def synthetic_country(tmp_path_factory):
    root = tmp_path_factory.mktemp("country")
    assert main(["synth", str(root), "--seed", "0"]) == 0
    return root


@pytest.fixture(scope="session")
def synthetic_run(synthetic_country):
    """The full pipeline on the synthetic country with the default config; (workdir, seconds)."""
    t0 = time.perf_counter()
    assert main(["all", "--config", str(synthetic_country / "config.ini")]) == 0
    return Path(synthetic_country) / "work", time.perf_counter() - t0


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
