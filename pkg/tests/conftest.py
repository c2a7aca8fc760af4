from pathlib import Path

import pytest

from nadmm.cli import load_problem

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "nadmm" / "fixtures"


@pytest.fixture(scope="session")
def fixture_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def load():
    cache = {}

    def _load(name):
        if name not in cache:
            cache[name] = load_problem(FIXTURES / f"{name}.json")
        return cache[name]

    return _load
