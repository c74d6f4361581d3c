import json
import os

import pytest

from huntloop.attackdb import AttackGraph, ingest_bundle

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def fixture_path(name: str) -> str:
    return os.path.abspath(os.path.join(FIXTURES, name))


def load_fixture(name: str):
    with open(fixture_path(name), encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def g1_bundle():
    return load_fixture("bundle_g1.json")


@pytest.fixture()
def g1(g1_bundle) -> AttackGraph:
    graph, report = ingest_bundle(g1_bundle)
    assert report.rejected == 0
    return graph


@pytest.fixture()
def fleet10_def():
    return load_fixture("fleet10.json")
