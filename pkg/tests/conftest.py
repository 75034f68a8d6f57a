import importlib.resources
import json
import pathlib

import pytest

from attnforge.attention import builtin
from attnforge.scheduling import device_from_dict

TESTS = pathlib.Path(__file__).parent
SNAPSHOTS = TESTS / "snapshots"
DATA = TESTS / "data"

TINY = dict(heads=1, seq_q=8, seq_k=8, d_qk=4, d_v=4)


def packaged(rel: str) -> str:
    return importlib.resources.files("attnforge").joinpath(rel).read_text(
        encoding="utf-8")


def load_packaged_device(name: str):
    return device_from_dict(json.loads(packaged(f"data/devices/{name}.json")))


def tiny_builtin(name: str, **over):
    kw = dict(TINY)
    kw.update(over)
    return builtin(name, **kw)


@pytest.fixture(scope="session")
def desk_device():
    return load_packaged_device("desk")


@pytest.fixture(scope="session")
def scheduler_fixture():
    return json.loads((SNAPSHOTS / "scheduler_fixture.json").read_text())
