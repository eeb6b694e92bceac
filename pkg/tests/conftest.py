import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest


@pytest.fixture(scope="session")
def protocol():
    """Seed-0 dataset, trained skill models, calibrations and report."""
    from hmmgrad.pipeline import run_protocol

    return run_protocol(0)


@pytest.fixture(scope="session")
def task_spec():
    from hmmgrad.synthesis import default_task_spec

    return default_task_spec(0)
