import os

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running checks")
    config.addinivalue_line("markers", "realdata: needs JHU CSV files")


def pytest_collection_modifyitems(config, items):
    run_slow = config.getoption("--runslow") or os.environ.get("KEC_SLOW") == "1"
    have_data = bool(os.environ.get("KEC_JHU_DIR"))
    skip_slow = pytest.mark.skip(reason="slow: use --runslow or KEC_SLOW=1")
    skip_data = pytest.mark.skip(reason="set KEC_JHU_DIR to the CSSE time-series directory")
    for item in items:
        if "slow" in item.keywords and not run_slow:
            item.add_marker(skip_slow)
        if "realdata" in item.keywords and not have_data:
            item.add_marker(skip_data)
