"""Built-in configuration documents used by tests, docs and the CLI."""
from __future__ import annotations

import copy

from .network import OUTSIDE, SCHEMA_VERSION


def _sfr(ids, support, probs):
    return [{"movement_id": m, "support": list(support), "probs": list(probs)} for m in ids]


def example1() -> dict:
    """One intersection, two conflicting through movements, R = 0."""
    return {
        "schema_version": SCHEMA_VERSION,
        "network": {
            "nodes": ["n1"],
            "links": [
                {"id": "in1", "from": OUTSIDE, "to": "n1", "length_m": 300, "lanes": 1},
                {"id": "in2", "from": OUTSIDE, "to": "n1", "length_m": 300, "lanes": 1},
                {"id": "out1", "from": "n1", "to": OUTSIDE, "length_m": 300, "lanes": 1},
                {"id": "out2", "from": "n1", "to": OUTSIDE, "length_m": 300, "lanes": 1},
            ],
            "movements": [
                {"id": 1, "node": "n1", "origin_link": "in1", "dest_link": "out1", "turning_ratio": 0},
                {"id": 2, "node": "n1", "origin_link": "in2", "dest_link": "out2", "turning_ratio": 0},
            ],
            "phases": [{"node": "n1", "phases": [[1], [2]]}],
        },
        "sfr": [
            {"movement_id": 1, "support": [1, 2], "probs": [0.3, 0.7]},
            {"movement_id": 2, "support": [1, 2], "probs": [0.5, 0.5]},
        ],
        "demand": {"a": [1.0, 0.5], "interval_s": 10},
    }


def example4() -> dict:
    """Two nodes, eight movements; internal links n1->n2 and n2->n1."""
    links = [
        {"id": "w1", "from": OUTSIDE, "to": "n1"},
        {"id": "s1", "from": OUTSIDE, "to": "n1"},
        {"id": "l21", "from": "n2", "to": "n1"},
        {"id": "l12", "from": "n1", "to": "n2"},
        {"id": "e2", "from": OUTSIDE, "to": "n2"},
        {"id": "s2", "from": OUTSIDE, "to": "n2"},
        {"id": "x2", "from": "n1", "to": OUTSIDE},
        {"id": "x4", "from": "n1", "to": OUTSIDE},
        {"id": "x6", "from": "n2", "to": OUTSIDE},
        {"id": "x8", "from": "n2", "to": OUTSIDE},
    ]
    for ln in links:
        ln.update(length_m=350, lanes=1)
    mv = [
        (1, "n1", "w1", "l12", 0.0),
        (2, "n1", "s1", "x2", 0.0),
        (3, "n1", "l21", "l12", 0.25),
        (4, "n1", "l21", "x4", 0.75),
        (5, "n2", "e2", "l21", 0.0),
        (6, "n2", "s2", "x6", 0.0),
        (7, "n2", "l12", "l21", 0.2),
        (8, "n2", "l12", "x8", 0.8),
    ]
    return {
        "schema_version": SCHEMA_VERSION,
        "network": {
            "nodes": ["n1", "n2"],
            "links": links,
            "movements": [{"id": i, "node": n, "origin_link": o, "dest_link": d, "turning_ratio": r}
                          for i, n, o, d, r in mv],
            "phases": [
                {"node": "n1", "phases": [[1, 2], [2, 3], [3, 4]]},
                {"node": "n2", "phases": [[5, 6], [6, 7], [7, 8]]},
            ],
        },
        "sfr": _sfr(range(1, 9), [3, 4], [0.5, 0.5]),
        "demand": {"a": [2, 1, 0, 0, 1.6, 1, 0, 0], "interval_s": 10},
    }


def single_intersection() -> dict:
    """Congested isolated intersection with widely varying I-SFR."""
    doc = example1()
    doc["sfr"] = [
        {"movement_id": 1, "support": [2, 6], "probs": [0.5, 0.5]},
        {"movement_id": 2, "support": [2, 6], "probs": [0.5, 0.5]},
    ]
    doc["demand"] = {"a": [1.9, 1.9], "interval_s": 10}
    return doc


BUILTIN = {"example1": example1, "example4": example4, "single": single_intersection}


def builtin(name: str) -> dict:
    return copy.deepcopy(BUILTIN[name]())
