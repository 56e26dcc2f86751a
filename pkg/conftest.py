"""Pytest setup: import path, the ``slow`` marker and an isolated default work directory."""

import sys
from pathlib import Path

import pytest

_PROJECT_ROOT = str(Path(__file__).parent)
if _PROJECT_ROOT not in sys.path:
    sys.path.insert(0, _PROJECT_ROOT)


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="also run tests that train enhancers, extractors or whole experiment cells",
    )


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "slow: trains models on a synthetic corpus for seconds to minutes (skipped unless --run-slow or -m slow)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or config.getoption("-m"):
        return
    skip_slow = pytest.mark.skip(reason="model training; pass --run-slow or -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_workdir(tmp_path, monkeypatch):
    """Commands that fall back to the default work directory write under the test's tmp_path."""
    import config

    monkeypatch.setattr(config, "DEFAULT_WORKDIR", tmp_path / "work")
    monkeypatch.setattr(config, "DEFAULT_WORKERS", 1)
