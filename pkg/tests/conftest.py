import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from decoyqkd.analysis import ObservedStatistics, ProtocolParameters

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).resolve().parents[1] / "src" / "decoyqkd" / "data"


def load_fixture(name: str) -> tuple[ProtocolParameters, ObservedStatistics, dict]:
    doc = json.loads((DATA / name).read_text())
    params = ProtocolParameters.from_dict(doc["params"])
    return params, ObservedStatistics.from_dict(doc["statistics"], params), doc


@pytest.fixture
def table1_75():
    return load_fixture("table1_75km.json")


@pytest.fixture
def table1_102():
    return load_fixture("table1_102km.json")
