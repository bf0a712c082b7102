import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TOY_CACHE = Path(os.environ.get("BMTC_TOY_CACHE", Path(__file__).resolve().parent.parent / ".toy_cache"))


@pytest.fixture(scope="session")
def toy_cache():
    TOY_CACHE.mkdir(parents=True, exist_ok=True)
    return TOY_CACHE


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in helpers.ACCEPTANCE:
            terminalreporter.write_line(line)
