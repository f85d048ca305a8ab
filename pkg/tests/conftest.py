"""Shared fixtures: the built-in example networks and their SFR models."""
from __future__ import annotations

import numpy as np
import pytest

from stabreg.network import build_network
from stabreg.scenarios import builtin
from stabreg.sfr import sfr_model_from_config


def _load(name):
    doc = builtin(name)
    net = build_network(doc["network"])
    model = sfr_model_from_config(doc["sfr"], net.ids)
    return doc, net, model, np.asarray(doc["demand"]["a"], dtype=float)


@pytest.fixture(scope="session")
def ex1():
    return _load("example1")


@pytest.fixture(scope="session")
def ex4():
    return _load("example4")


@pytest.fixture(scope="session")
def single():
    return _load("single")


def chain_doc(r2: float = 0.5, r3: float = 0.5, length_m: float = 350.0) -> dict:
    """Three movements in a line: 1 feeds 2 at n1->n2, 2 feeds 3 at n2->n3.

    Each node has a single phase, so every movement is green every interval.
    Vehicles not routed onward leave the network.
    """
    links = [
        {"id": "in", "from": "outside", "to": "n1"},
        {"id": "l12", "from": "n1", "to": "n2"},
        {"id": "l23", "from": "n2", "to": "n3"},
        {"id": "out", "from": "n3", "to": "outside"},
    ]
    for ln in links:
        ln.update(length_m=length_m, lanes=1)
    return {
        "schema_version": "1",
        "network": {
            "nodes": ["n1", "n2", "n3"],
            "links": links,
            "movements": [
                {"id": 1, "node": "n1", "origin_link": "in", "dest_link": "l12", "turning_ratio": 0.0},
                {"id": 2, "node": "n2", "origin_link": "l12", "dest_link": "l23", "turning_ratio": r2},
                {"id": 3, "node": "n3", "origin_link": "l23", "dest_link": "out", "turning_ratio": r3},
            ],
            "phases": [
                {"node": "n1", "phases": [[1]]},
                {"node": "n2", "phases": [[2]]},
                {"node": "n3", "phases": [[3]]},
            ],
        },
        "sfr": [{"movement_id": m, "support": [4], "probs": [1.0]} for m in (1, 2, 3)],
        "demand": {"a": [3.0, 1.0, 0.0], "interval_s": 10},
    }


@pytest.fixture
def chain():
    return chain_doc()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran in this session."""
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(k))
