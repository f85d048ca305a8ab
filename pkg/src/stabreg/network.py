"""Signalized network: movements, phases, turning ratios and conflict rows."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, Sequence

import networkx as nx
import numpy as np
import scipy.linalg

from .errors import ConfigError

OUTSIDE = "outside"
SCHEMA_VERSION = "1"
PIVOT_THRESHOLD = 1e-10


@dataclass(frozen=True)
class Link:
    id: Hashable
    from_node: Hashable
    to_node: Hashable
    length_m: float = 200.0
    lanes: int = 1


@dataclass(frozen=True)
class Movement:
    id: Hashable
    node: Hashable
    origin_link: Hashable
    dest_link: Hashable
    turning_ratio: float = 0.0
    lanes: int = 1
    link_length: float = 200.0


@dataclass(frozen=True)
class PhaseSet:
    node: Hashable
    phases: tuple  # tuple of frozensets of movement ids


@dataclass(frozen=True)
class DemandSpec:
    """Mean exogenous arrivals per movement, in vehicles per decision interval."""

    a: np.ndarray
    interval_s: float = 10.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ConfigError("demand.a must be finite and non-negative")
        object.__setattr__(self, "a", a)

    @property
    def upper_bound(self) -> float:
        return float(self.a.max(initial=0.0))


@dataclass(frozen=True, eq=False)
class Network:
    nodes: tuple
    links: Mapping[Hashable, Link]
    movements: tuple
    phase_sets: Mapping[Hashable, PhaseSet]
    R: np.ndarray
    K: np.ndarray
    h: np.ndarray
    upstream: Mapping[Hashable, frozenset] = field(repr=False)
    downstream: Mapping[Hashable, frozenset] = field(repr=False)

    @property
    def ids(self) -> tuple:
        return tuple(m.id for m in self.movements)

    @property
    def size(self) -> int:
        return len(self.movements)

    def index(self, mid: Hashable) -> int:
        try:
            return self._pos[mid]
        except KeyError:
            raise KeyError(f"unknown movement id {mid!r}") from None

    @property
    def _pos(self) -> dict:
        pos = self.__dict__.get("_pos_cache")
        if pos is None:
            pos = {m.id: i for i, m in enumerate(self.movements)}
            object.__setattr__(self, "_pos_cache", pos)
        return pos

    def node_movements(self, node: Hashable) -> list[int]:
        """Positional indices of the movements controlled at ``node``."""
        return [i for i, m in enumerate(self.movements) if m.node == node]

    def conflict_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows of K/h other than the non-negativity rows."""
        n = self.size
        return self.K[:-n], self.h[:-n]

    def turning_ratios(self) -> np.ndarray:
        return np.array([m.turning_ratio for m in self.movements])

    def boundary_entries(self) -> list[int]:
        return [i for i, m in enumerate(self.movements)
                if self.links[m.origin_link].from_node == OUTSIDE]


def neighbors(net: Network, mid: Hashable) -> tuple[frozenset, frozenset]:
    """Upstream and downstream movement ids of ``mid``."""
    net.index(mid)
    return net.upstream[mid], net.downstream[mid]


def demand_rates(net: Network, d: DemandSpec | np.ndarray) -> np.ndarray:
    """Solve lambda = (I - R)^-1 a."""
    a = d.a if isinstance(d, DemandSpec) else np.asarray(d, dtype=float)
    if a.shape != (net.size,):
        raise ValueError(f"demand vector has shape {a.shape}, expected ({net.size},)")
    lam = _solve_i_minus_r(net.R, a)
    if np.any(lam < -1e-12):
        raise ValueError("negative demand rate; turning structure is inconsistent")
    return np.maximum(lam, 0.0)


def _solve_i_minus_r(R: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lu, piv = _lu(R)
    return scipy.linalg.lu_solve((lu, piv), rhs)


def _lu(R: np.ndarray):
    n = R.shape[0]
    with warnings.catch_warnings():
        # singularity is reported below through the pivot threshold
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(np.eye(n) - R)
    if n and np.min(np.abs(np.diag(lu))) < PIVOT_THRESHOLD:
        raise ConfigError("(I - R) is singular")
    return lu, piv


def inverse_i_minus_r(net: Network) -> np.ndarray:
    return _solve_i_minus_r(net.R, np.eye(net.size))


def build_network(doc: Mapping[str, Any]) -> Network:
    """Validate a network document and assemble R, K and h.

    ``doc`` holds ``nodes``, ``links``, ``movements`` and ``phases`` as
    described in the README. Movement order in the document fixes the
    positional order of every vector and matrix.
    """
    try:
        return _build(doc)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"network: {exc}") from exc


def _unique(items, what):
    seen = set()
    for it in items:
        if it in seen:
            raise ConfigError(f"duplicate {what} id {it!r}")
        seen.add(it)


def _build(doc):
    nodes = tuple(doc["nodes"])
    _unique(nodes, "node")
    if OUTSIDE in nodes:
        raise ConfigError(f"node id {OUTSIDE!r} is reserved for the boundary")

    links = {}
    for k, ld in enumerate(doc["links"]):
        link = Link(ld["id"], ld["from"], ld["to"], float(ld.get("length_m", 200.0)),
                    int(ld.get("lanes", 1)))
        where = f"links[{k}]"
        if link.id in links:
            raise ConfigError(f"duplicate link id {link.id!r} at {where}")
        for end in (link.from_node, link.to_node):
            if end != OUTSIDE and end not in nodes:
                raise ConfigError(f"{where}: unknown node {end!r}")
        if link.length_m <= 0 or link.lanes < 1:
            raise ConfigError(f"{where}: length_m must be > 0 and lanes >= 1")
        links[link.id] = link

    movements = []
    for k, md in enumerate(doc["movements"]):
        where = f"movements[{k}]"
        o, d = md["origin_link"], md["dest_link"]
        if o not in links or d not in links:
            raise ConfigError(f"{where}: unknown link")
        if links[o].to_node != md["node"]:
            raise ConfigError(f"{where}: origin link {o!r} does not terminate at node {md['node']!r}")
        if links[d].from_node != md["node"]:
            raise ConfigError(f"{where}: dest link {d!r} does not emanate from node {md['node']!r}")
        r = float(md.get("turning_ratio", 0.0))
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"{where}: turning_ratio must lie in [0, 1]")
        lanes = int(md.get("lanes", links[o].lanes))
        if lanes < 1:
            raise ConfigError(f"{where}: lanes must be >= 1")
        movements.append(Movement(md["id"], md["node"], o, d, r, lanes, links[o].length_m))
    _unique([m.id for m in movements], "movement")
    movements = tuple(movements)
    ids = [m.id for m in movements]
    pos = {mid: i for i, mid in enumerate(ids)}

    upstream = {m.id: frozenset(u.id for u in movements if u.dest_link == m.origin_link)
                for m in movements}
    downstream = {m.id: frozenset(j.id for j in movements if j.origin_link == m.dest_link)
                  for m in movements}

    # ratios of movements sharing an origin link split that link's inflow
    for m in movements:
        total = sum(movements[pos[j]].turning_ratio for j in downstream[m.id])
        if total > 1.0 + 1e-12:
            raise ConfigError(
                f"turning ratios downstream of movement {m.id!r} sum to {total:.6g} > 1")

    n = len(movements)
    R = np.zeros((n, n))
    for j, mj in enumerate(movements):
        for i_id in upstream[mj.id]:
            R[j, pos[i_id]] = mj.turning_ratio
    _lu(R)

    phase_sets = {}
    for k, pd in enumerate(doc["phases"]):
        node = pd["node"]
        if node not in nodes:
            raise ConfigError(f"phases[{k}]: unknown node {node!r}")
        if node in phase_sets:
            raise ConfigError(f"phases[{k}]: duplicate phase set for node {node!r}")
        groups = tuple(frozenset(g) for g in pd["phases"])
        if not groups:
            raise ConfigError(f"phases[{k}]: empty phase set for node {node!r}")
        for g in groups:
            for mid in g:
                if mid not in pos or movements[pos[mid]].node != node:
                    raise ConfigError(f"phases[{k}]: movement {mid!r} is not at node {node!r}")
        phase_sets[node] = PhaseSet(node, groups)
    for node in nodes:
        if node not in phase_sets and any(m.node == node for m in movements):
            raise ConfigError(f"node {node!r} has movements but no phase set")

    K, h = conflict_matrix(movements, nodes, phase_sets)
    return Network(nodes, links, movements, phase_sets, R, K, h, upstream, downstream)


def conflict_matrix(movements: Sequence[Movement], nodes, phase_sets) -> tuple[np.ndarray, np.ndarray]:
    """One row per maximal clique of pairwise conflicts, then -I rows.

    Two movements at a node conflict when no phase serves both. A movement
    with no conflicts gets a ``g <= 1`` row; one that no phase serves gets
    ``g <= 0``.
    """
    pos = {m.id: i for i, m in enumerate(movements)}
    n = len(movements)
    rows, rhs = [], []
    for node in nodes:
        local = [m.id for m in movements if m.node == node]
        if not local:
            continue
        served = set().union(*phase_sets[node].phases)
        G = nx.Graph()
        G.add_nodes_from(m for m in local if m in served)
        for u, v in itertools.combinations(local, 2):
            if u in served and v in served and not any(u in ph and v in ph for ph in phase_sets[node].phases):
                G.add_edge(u, v)
        cliques = [tuple(sorted(c, key=pos.get)) for c in nx.find_cliques(G)]
        cliques.sort(key=lambda c: [pos[x] for x in c])
        for c in cliques:
            row = np.zeros(n)
            row[[pos[x] for x in c]] = 1.0
            rows.append(row)
            rhs.append(1.0)
        for mid in local:
            if mid not in served:
                row = np.zeros(n)
                row[pos[mid]] = 1.0
                rows.append(row)
                rhs.append(0.0)
    K = np.vstack(rows + [-np.eye(n)]) if n else np.zeros((0, 0))
    h = np.concatenate([rhs, np.zeros(n)])
    return K, h
