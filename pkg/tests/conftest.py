"""Shared fixtures: reference model/GPU specs and cost parameters."""

import pytest

from pdsim.config import load_gpu_spec, load_model_spec
from pdsim.costmodel import CostParams
from pdsim.metrics import SloSpec


@pytest.fixture(scope="session")
def model70b():
    return load_model_spec("llama70b-like")


@pytest.fixture(scope="session")
def moe():
    return load_model_spec("moe-like")


@pytest.fixture(scope="session")
def gpu():
    return load_gpu_spec("mi300x-like")


@pytest.fixture(scope="session")
def params():
    return CostParams()


@pytest.fixture(scope="session")
def slo():
    return SloSpec()
