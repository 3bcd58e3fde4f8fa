import sys

import pytest
import torch


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False,
                     help="run the multi-hour training ablation")


def pytest_configure(config):
    config.addinivalue_line("markers", "full: hours-long run, enabled with --full")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full"):
        return
    skip = pytest.mark.skip(reason="needs --full")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance")
        for line in module.LINES:
            terminalreporter.write_line(line)
