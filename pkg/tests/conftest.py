import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session", autouse=True)
def _isolated_cache(tmp_path_factory):
    old = os.environ.get("FBSDE_GAUSS_CACHE")
    os.environ["FBSDE_GAUSS_CACHE"] = str(tmp_path_factory.mktemp("cache"))
    yield
    if old is None:
        os.environ.pop("FBSDE_GAUSS_CACHE", None)
    else:
        os.environ["FBSDE_GAUSS_CACHE"] = old


@pytest.fixture
def configs():
    return CONFIGS


@pytest.fixture
def write_config(tmp_path):
    import yaml

    def _write(data, name="run.yaml"):
        p = tmp_path / name
        p.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return p

    return _write


ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record ``(passed, detail)`` for one numbered acceptance criterion."""
    def _record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
