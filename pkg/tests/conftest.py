from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import helpers  # noqa: E402
from rerankkit.config import parse_config  # noqa: E402


@pytest.fixture
def fixtures_dir() -> Path:
    return helpers.FIXTURES


@pytest.fixture
def entity_cases() -> dict:
    return json.loads((helpers.FIXTURES / "entity_cases.json").read_text(encoding="utf-8"))


@pytest.fixture
def fixture_config(tmp_path):
    def make(**extra):
        return parse_config(helpers.fixture_config_dict(str(tmp_path / "cache"), **extra))

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
