"""Phase-decision policies.

The per-node ``*_decide`` functions read only a :class:`NodeObservation`
(the node's queues, its downstream neighbours and predicted rates). The
controller classes evaluate the same rules for every node at once and are
what the simulator drives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .lp import LpProblem, solve_lp
from .network import Network, PhaseSet
from .sfr import SfrModel, enumerate_joint_values
from .simulate import JAM_SPACING_M, position_weight
from .stability import GreenSchedule, saturate

TIE_TOL = 1e-9
RESIDUAL_TOL = 1e-8
WEIGHTS = ("bp", "pwbp")


@dataclass(frozen=True)
class NodeObservation:
    """Local information for one node, movements in node order.

    ``head[k]`` is the sum of d(v)/l over vehicles of movement k and
    ``down[k]`` lists ``(x_j, r_j, tail_j)`` per downstream movement j,
    where ``tail_j`` sums (l - d(v))/l over vehicles of j.
    """

    movements: tuple
    x: np.ndarray
    s_hat: np.ndarray
    down: tuple
    head: Optional[np.ndarray] = None
    prev_phase: Optional[int] = None


def bp_weights(obs: NodeObservation) -> np.ndarray:
    return np.array([x - sum(xj * rj for xj, rj, _ in d) for x, d in zip(obs.x, obs.down)], dtype=float)


def pwbp_weights(obs: NodeObservation) -> np.ndarray:
    if obs.head is None:
        raise ValueError("PWBP needs vehicle position summaries")
    return np.array([h - sum(tj * rj for _, rj, tj in d) for h, d in zip(obs.head, obs.down)], dtype=float)


def phase_pressures(obs: NodeObservation, phases: PhaseSet, w: np.ndarray) -> np.ndarray:
    ws = dict(zip(obs.movements, w * obs.s_hat))
    return np.array([sum(ws[m] for m in obs.movements if m in ph) for ph in phases.phases])


def _argmax(values: np.ndarray) -> int:
    """Index of the maximum; near-ties go to the lowest index."""
    best = values.max()
    return int(np.flatnonzero(values >= best - TIE_TOL * max(1.0, abs(best)))[0])


def bp_decide(obs: NodeObservation, phases: PhaseSet) -> int:
    return _argmax(phase_pressures(obs, phases, bp_weights(obs)))


def pwbp_decide(obs: NodeObservation, phases: PhaseSet) -> int:
    return _argmax(phase_pressures(obs, phases, pwbp_weights(obs)))


def _lescbp_choice(pressures: np.ndarray, prev: Optional[int], load: float, alpha: float, beta: float,
                   switch_on_tie: bool) -> int:
    best = _argmax(pressures)
    if prev is None or prev < 0:
        return best
    psi = pressures[best] - (pressures[prev] + alpha * load ** beta)
    return best if (psi > 0 or (switch_on_tie and psi >= 0)) else prev


def lescbp_decide(obs: NodeObservation, phases: PhaseSet, alpha: float = 0.05, beta: float = 0.1,
                  weights: str = "pwbp", switch_on_tie: bool = False) -> int:
    """Switch to the max-pressure phase only if it beats the current one by alpha * |x_n|^beta."""
    w = pwbp_weights(obs) if weights == "pwbp" else bp_weights(obs)
    load = float(np.sum(obs.x))
    return _lescbp_choice(phase_pressures(obs, phases, w), obs.prev_phase, load, alpha, beta, switch_on_tie)


def phase_matrix(phases: PhaseSet, movements: Sequence) -> np.ndarray:
    """0/1 incidence, one row per phase, columns in ``movements`` order."""
    return np.array([[1.0 if m in ph else 0.0 for m in movements] for ph in phases.phases])


def decompose_green_ratios(g, phases: PhaseSet, movements: Sequence, mode: str = "exact") -> np.ndarray:
    """Probabilities pi over phases with sum_k pi_k * indicator_k = g.

    ``mode="exact"`` minimises the L1 residual and raises ValueError when it
    exceeds 1e-8. ``mode="cover"`` instead asks for indicator mass >= g with
    the least total probability. The slack 1 - sum(pi) is all-red.
    """
    g = np.asarray(g, dtype=float)
    P = phase_matrix(phases, movements)
    k, n = P.shape
    if g.shape != (n,):
        raise ValueError("green vector does not match the node's movements")
    if mode == "exact":
        # variables pi (k), r+ (n), r- (n); maximise -sum(r)
        c = np.concatenate([np.zeros(k), -np.ones(2 * n)])
        A_eq = np.hstack([P.T, np.eye(n), -np.eye(n)])
        A_ub = np.concatenate([np.ones(k), np.zeros(2 * n)])[None, :]
        sol = solve_lp(LpProblem(c, A_ub, [1.0], A_eq, g))
        if not sol.ok or -sol.objective > RESIDUAL_TOL:
            raise ValueError(f"green ratios {g.tolist()} are not a mixture of the phases")
        pi = sol.x[:k]
    elif mode == "cover":
        sol = solve_lp(LpProblem(-np.ones(k), np.vstack([-P.T, np.ones((1, k))]),
                                 np.concatenate([-g, [1.0]])))
        if not sol.ok:
            raise ValueError(f"green ratios {g.tolist()} cannot be covered by the phases")
        pi = sol.x
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pi = np.clip(pi, 0.0, None)
    total = pi.sum()
    return pi / total if total > 1.0 else pi


def sfr_only_decide(mixture: np.ndarray, rng: np.random.Generator) -> int:
    """Sample a phase index from ``mixture``; -1 (all-red) with the leftover mass."""
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(mixture), u, side="right"))
    return k if k < len(mixture) else -1


# ---------------------------------------------------------------- controllers


class Controller:
    """Base class: bind to a network, then decide one phase index per node per interval."""

    kind = "base"

    def bind(self, net: Network, sim, rng: np.random.Generator) -> None:
        self.net = net
        self.sim = sim
        self.rng = rng
        self.nodes = net.nodes
        self.rows = []        # phase-matrix row range per node
        blocks = []
        start = 0
        for node in net.nodes:
            ps = net.phase_sets.get(node)
            if ps is None:
                self.rows.append(range(start, start))
                continue
            local = np.zeros((len(ps.phases), net.size))
            for r, ph in enumerate(ps.phases):
                for mid in ph:
                    local[r, net.index(mid)] = 1.0
            blocks.append(local)
            self.rows.append(range(start, start + len(ps.phases)))
            start += len(ps.phases)
        self.P = np.vstack(blocks) if blocks else np.zeros((0, net.size))
        self.Rt = net.R.T.copy()
        self.node_idx = [np.array(net.node_movements(n), dtype=int) for n in net.nodes]
        mv = net.movements
        self.lanes = np.array([m.lanes for m in mv])
        self.length = np.array([m.link_length for m in mv])
        self.jam = getattr(sim, "jam_spacing_m", JAM_SPACING_M)

    def passing(self, chosen: np.ndarray) -> np.ndarray:
        phi = np.zeros(self.net.size, dtype=np.int8)
        for n, k in enumerate(chosen):
            if k >= 0:
                phi += self.P[self.rows[n][k]].astype(np.int8)
        return phi

    def decide(self, view) -> np.ndarray:
        raise NotImplementedError


class PressureController(Controller):
    """BP or PWBP over predicted rates; ``allow_all_red`` idles nodes whose best pressure is <= 0."""

    def __init__(self, weights: str = "bp", allow_all_red: bool = False):
        if weights not in WEIGHTS:
            raise ConfigError(f"weights must be one of {WEIGHTS}")
        self.weights = weights
        self.allow_all_red = allow_all_red
        self.kind = weights

    def movement_weights(self, x: np.ndarray) -> np.ndarray:
        x = x.astype(float)
        if self.weights == "bp":
            return x - self.Rt @ x
        head = position_weight(x.astype(np.int64), self.lanes, self.length, self.jam)
        return head - self.Rt @ (x - head)

    def pressures(self, view) -> np.ndarray:
        return self.P @ (self.movement_weights(view.x) * view.s_hat)

    def decide(self, view) -> np.ndarray:
        pr = self.pressures(view)
        out = np.empty(len(self.nodes), dtype=np.int64)
        for n, rows in enumerate(self.rows):
            if not len(rows):
                out[n] = -1
                continue
            local = pr[rows.start:rows.stop]
            k = _argmax(local)
            out[n] = -1 if (self.allow_all_red and local[k] <= 0) else k
        return out


class LescbpController(PressureController):
    def __init__(self, alpha: float = 0.05, beta: float = 0.1, weights: str = "pwbp",
                 switch_on_tie: bool = False):
        super().__init__(weights)
        if alpha < 0 or beta <= 0:
            raise ConfigError("lescbp needs alpha >= 0 and beta > 0")
        self.alpha, self.beta, self.switch_on_tie = alpha, beta, switch_on_tie
        self.kind = "lescbp"

    def bind(self, net, sim, rng):
        super().bind(net, sim, rng)
        self.prev = [None] * len(net.nodes)

    def decide(self, view) -> np.ndarray:
        pr = self.pressures(view)
        out = np.empty(len(self.nodes), dtype=np.int64)
        for n, rows in enumerate(self.rows):
            if not len(rows):
                out[n] = -1
                continue
            load = float(view.x[self.node_idx[n]].sum())
            k = _lescbp_choice(pr[rows.start:rows.stop], self.prev[n], load, self.alpha, self.beta,
                               self.switch_on_tie)
            self.prev[n] = k
            out[n] = k
        return out


class FixedTimeController(Controller):
    """Cyclic plan per node: a list of (phase index, duration in intervals)."""

    kind = "fixed"

    def __init__(self, plans: Optional[Mapping] = None, offsets: Optional[Mapping] = None,
                 default_green: int = 3):
        self.plans_cfg = plans or {}
        self.offsets_cfg = offsets or {}
        if default_green < 1:
            raise ConfigError("fixed-time green must be at least one interval")
        self.default_green = default_green

    def bind(self, net, sim, rng):
        super().bind(net, sim, rng)
        self.sequences = []
        for n, node in enumerate(net.nodes):
            plan = self.plans_cfg.get(node)
            if plan is None:
                plan = [(k, self.default_green) for k in range(len(self.rows[n]))]
            seq = []
            for k, dur in plan:
                if not 0 <= int(k) < len(self.rows[n]) or int(dur) < 1:
                    raise ConfigError(f"fixed-time plan for node {node!r} has an invalid entry ({k}, {dur})")
                seq += [int(k)] * int(dur)
            self.sequences.append(seq or [-1])
        self.offsets = [int(self.offsets_cfg.get(node, 0)) for node in net.nodes]

    def decide(self, view) -> np.ndarray:
        return np.array([seq[(view.t + off) % len(seq)] for seq, off in zip(self.sequences, self.offsets)],
                        dtype=np.int64)


def _local_codes(model: SfrModel, idx: Sequence[int], values: np.ndarray) -> np.ndarray:
    """Mixed-radix code of the support indices of ``values`` (rows) over movements ``idx``."""
    code = np.zeros(values.shape[0], dtype=np.int64)
    for col, m in enumerate(idx):
        s = model.supports[m]
        k = np.searchsorted(s, values[:, col] - 1e-12)
        code = code * s.size + k
    return code


class SfrOnlyController(Controller):
    """Randomised stationary policy realising a green schedule.

    The schedule is averaged down to each node's own joint values, raised
    to a maximal point of the node's conflict polytope and split into phase
    mixtures. A node uses the mixture of its revealed joint value when every
    one of its movements was predicted correctly, otherwise the fallback.
    """

    kind = "sfronly"

    def __init__(self, schedule: GreenSchedule, model: SfrModel, p: np.ndarray, S: np.ndarray):
        self.schedule = schedule
        self.model = model
        self.p, self.S = p, S

    def bind(self, net, sim, rng):
        super().bind(net, sim, rng)
        model, sched = self.model, self.schedule
        self.mixtures, self.fallback, self.code_map = [], [], []
        for n, node in enumerate(net.nodes):
            idx = self.node_idx[n]
            if not len(idx):
                self.mixtures.append([])
                self.fallback.append(np.zeros(0))
                self.code_map.append(None)
                continue
            ps = net.phase_sets[node]
            mids = [net.movements[i].id for i in idx]
            Kn, hn = _node_rows(net, idx)
            local = enumerate_joint_values(model, idx)
            radix = int(np.prod([model.supports[i].size for i in idx]))
            cmap = -np.ones(radix, dtype=np.int64)
            lcodes = _local_codes(model, idx, np.array([j.s for j in local]))
            cmap[lcodes] = np.arange(len(local))
            full = cmap[_local_codes(model, idx, self.S[:, idx])]
            g_local = np.zeros((len(local), len(idx)))
            np.add.at(g_local, full, self.p[:, None] * sched.g_e[:, idx])
            g_local /= np.array([j.p for j in local])[:, None]
            self.mixtures.append([_mixture(g, Kn, hn, ps, mids) for g in g_local])
            self.fallback.append(_mixture(sched.g[idx], Kn, hn, ps, mids))
            self.code_map.append(cmap)

    def local_value(self, n: int, s: np.ndarray) -> int:
        idx = self.node_idx[n]
        return int(self.code_map[n][_local_codes(self.model, idx, s[idx][None, :])[0]])

    def decide(self, view) -> np.ndarray:
        out = np.empty(len(self.nodes), dtype=np.int64)
        for n in range(len(self.nodes)):
            idx = self.node_idx[n]
            if not len(idx):
                out[n] = -1
                continue
            if view.hits[idx].all():
                mix = self.mixtures[n][self.local_value(n, view.s_hat)]
            else:
                mix = self.fallback[n]
            out[n] = sfr_only_decide(mix, self.rng)
        return out


def _node_rows(net: Network, idx: np.ndarray):
    cols = np.zeros(net.size, dtype=bool)
    cols[idx] = True
    rows = np.flatnonzero(np.any(net.K[:, idx] != 0, axis=1) & ~np.any(net.K[:, ~cols] != 0, axis=1))
    return net.K[np.ix_(rows, idx)], net.h[rows]


def _mixture(g, Kn, hn, ps, mids) -> np.ndarray:
    g = saturate(np.clip(g, 0.0, None), Kn, hn)
    try:
        return decompose_green_ratios(g, ps, mids, "exact")
    except ValueError:
        return decompose_green_ratios(g, ps, mids, "cover")


def observe(net: Network, x: np.ndarray, s_hat: np.ndarray, node, prev_phase: Optional[int] = None,
            jam_spacing_m: float = JAM_SPACING_M) -> NodeObservation:
    """Collect the local observation of ``node`` from network-wide vectors."""
    idx = net.node_movements(node)
    mv = net.movements
    x = np.asarray(x)
    lanes = np.array([m.lanes for m in mv])
    length = np.array([m.link_length for m in mv])
    head_all = position_weight(x.astype(np.int64), lanes, length, jam_spacing_m)
    down = []
    for i in idx:
        ds = sorted(net.index(j) for j in net.downstream[mv[i].id])
        down.append(tuple((float(x[j]), mv[j].turning_ratio, float(x[j] - head_all[j])) for j in ds))
    return NodeObservation(tuple(mv[i].id for i in idx), x[idx].astype(float), np.asarray(s_hat)[idx],
                           tuple(down), head_all[idx], prev_phase)


def controller_from_config(block: Mapping[str, Any], scn=None) -> Controller:
    """Build a controller from {type: bp|pwbp|lescbp|fixed|sfronly, ...}."""
    kind = block.get("type")
    if kind in ("bp", "pwbp"):
        return PressureController(kind, bool(block.get("allow_all_red", False)))
    if kind == "lescbp":
        return LescbpController(float(block.get("alpha", 0.05)), float(block.get("beta", 0.1)),
                                block.get("weights", "pwbp"), bool(block.get("switch_on_tie", False)))
    if kind == "fixed":
        plan = block.get("plan")
        if isinstance(plan, list):
            plans = {node: plan for node in scn.net.nodes} if scn is not None else None
        else:
            plans = plan
        return FixedTimeController(plans, block.get("offsets"), int(block.get("green", 3)))
    if kind == "sfronly":
        if scn is None:
            raise ConfigError("sfronly controller needs a scenario to build its schedule")
        from .sfr import joint_arrays
        from .stability import reserve_demand
        theta = float(block.get("theta", scn.pred.theta))
        res = reserve_demand(scn.net, scn.model, scn.demand.a, theta,
                             fallback=block.get("fallback", "coupled"))
        p, S = joint_arrays(scn.model)
        return SfrOnlyController(res.schedule, scn.model, p, S)
    raise ConfigError(f"unknown controller type {kind!r}")
