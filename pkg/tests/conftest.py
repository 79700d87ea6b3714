import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(1)
settings.register_profile("tscl", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tscl")

CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome = CRITERIA[name]
        label = "PASS" if outcome == "passed" else outcome.upper() if outcome == "skipped" else "FAIL"
        terminalreporter.write_line(f"{label:5} {name}")
