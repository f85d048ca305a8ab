"""Discrete-time point-queue network simulator.

Each decision interval ``t``:

1. the controller picks one phase per node from the predicted rates;
2. movement ``i`` discharges ``q_i = min(x_i(t), s_i * phi_i)`` vehicles
   (fractional rates are floored with an error-diffusion carry);
3. each departing vehicle is routed to downstream movement ``j`` with
   probability ``r_j`` (or leaves the network with the remaining mass);
4. exogenous arrivals enter their origin link, or wait in a boundary stack
   while that link is at storage capacity.

Vehicles that join a queue during interval ``t`` can be served from
``t + 1`` on, which reproduces ``x(t+1) = x(t) - q(t) + lambda(t)``.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np

from .errors import ConfigError
from .network import DemandSpec, Network, build_network
from .sfr import Predictor, SfrModel, predict, predictor_from_config, sample_joint, sfr_model_from_config

JAM_SPACING_M = 7.0
WARMUP = 60
ARRIVALS = ("poisson", "deterministic")
ROUTINGS = ("random", "deterministic")
STREAMS = ("sfr", "arrivals", "routing", "prediction", "controller")
# floors in the service and arrival carries forgive this much round-off
CARRY_TOL = 1e-9


@dataclass(frozen=True)
class Ramp:
    """Add ``increment`` veh/interval to the masked movements every ``period`` intervals."""

    increment: float
    period: int
    mask: np.ndarray  # bool per movement

    def offset(self, t: int) -> np.ndarray:
        return self.mask * (self.increment * (t // self.period))


@dataclass(frozen=True)
class Scenario:
    net: Network
    model: SfrModel
    pred: Predictor
    demand: DemandSpec
    horizon: int
    seed: int = 0
    arrivals: str = "poisson"
    routing: str = "random"
    # piecewise-linear (time_s, factor) multiplier on the base demand
    profile: Optional[tuple] = None
    ramp: Optional[Ramp] = None
    finite_storage: bool = True
    jam_spacing_m: float = JAM_SPACING_M

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.arrivals not in ARRIVALS:
            raise ConfigError(f"arrivals must be one of {ARRIVALS}")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"routing must be one of {ROUTINGS}")
        if self.demand.a.shape != (self.net.size,):
            raise ConfigError("demand.a length differs from the number of movements")
        if self.jam_spacing_m <= 0:
            raise ConfigError("jam_spacing_m must be positive")
        if self.profile is not None:
            ts = [p[0] for p in self.profile]
            if len(ts) < 1 or any(b < a for a, b in zip(ts, ts[1:])):
                raise ConfigError("profile times must be non-decreasing")
            if any(p[1] < 0 for p in self.profile):
                raise ConfigError("profile factors must be non-negative")

    def rates(self, t: int) -> np.ndarray:
        """Mean exogenous arrivals during interval ``t``."""
        a = self.demand.a
        if self.profile is not None:
            ts, fs = zip(*self.profile)
            a = a * float(np.interp(t * self.demand.interval_s, ts, fs))
        if self.ramp is not None:
            a = a + self.ramp.offset(t)
        return a


@dataclass
class SimState:
    t: int
    queues: list          # per movement: deque of join intervals, head first
    stacked: list         # per movement: deque of join intervals of blocked arrivals
    link_occupancy: list  # per link index
    carry: list           # per movement service remainder in [0, 1)
    pending: list         # per movement: route already drawn for a blocked head vehicle
    credit: list          # per movement deterministic-routing credits
    arrival_carry: np.ndarray
    entered: int = 0
    exited: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.array([len(q) for q in self.queues], dtype=np.int64)

    @property
    def stacked_total(self) -> int:
        return sum(len(s) for s in self.stacked)

    def in_network(self) -> int:
        return sum(len(q) for q in self.queues)


@dataclass
class Trace:
    interval_s: float
    node_of: np.ndarray           # node index per movement
    x: np.ndarray                 # (T, M) queue lengths at the end of each interval
    stacked: np.ndarray           # (T,)
    phases: np.ndarray            # (T, nodes), -1 = no phase
    phi: np.ndarray               # (T, M)
    s_true: np.ndarray            # (T, M)
    s_hat: np.ndarray             # (T, M)
    hits: np.ndarray              # (T, M)
    departures: np.ndarray        # (T, M)
    delay_node: np.ndarray        # node index per vehicle, served first then unfinished
    delay_intervals: np.ndarray   # intervals queued per vehicle
    warmup: int = WARMUP
    entered: int = 0
    exited: int = 0
    stopped_early: bool = False
    unfinished: int = 0           # trailing delay entries for vehicles still waiting at the end

    @property
    def horizon(self) -> int:
        return self.x.shape[0]


class Simulator:
    """Static structure for stepping one network."""

    def __init__(self, net: Network, finite_storage: bool = True, jam_spacing_m: float = JAM_SPACING_M,
                 routing: str = "random"):
        if routing not in ROUTINGS:
            raise ConfigError(f"routing must be one of {ROUTINGS}")
        self.net = net
        self.routing = routing
        self.jam_spacing_m = jam_spacing_m
        link_ids = list(net.links)
        self.link_index = {lid: k for k, lid in enumerate(link_ids)}
        self.storage = []
        for lid in link_ids:
            ln = net.links[lid]
            cap = math.floor(ln.length_m / jam_spacing_m) * ln.lanes
            self.storage.append(cap if finite_storage else math.inf)
        mv = net.movements
        self.origin = [self.link_index[m.origin_link] for m in mv]
        self.node_of = np.array([net.nodes.index(m.node) for m in mv])
        pos = {m.id: i for i, m in enumerate(mv)}
        self.targets, self.cum = [], []
        for m in mv:
            down = sorted(pos[j] for j in net.downstream[m.id])
            r = [mv[j].turning_ratio for j in down]
            self.targets.append(down)
            self.cum.append(np.cumsum(r) if down else np.zeros(0))
        # a link that feeds no movement is an exit; arriving vehicles leave
        self.fed = [False] * len(link_ids)
        for k in self.origin:
            self.fed[k] = True

    def initial_state(self) -> SimState:
        M = self.net.size
        return SimState(
            t=0,
            queues=[deque() for _ in range(M)],
            stacked=[deque() for _ in range(M)],
            link_occupancy=[0] * len(self.storage),
            carry=[0.0] * M,
            pending=[None] * M,
            credit=[np.zeros(len(t) + 1) for t in self.targets],
            arrival_carry=np.zeros(M),
        )

    def _route(self, state: SimState, i: int, rng) -> int:
        """Downstream movement index for one vehicle leaving ``i``; -1 exits."""
        tg = self.targets[i]
        if not tg:
            return -1
        cum = self.cum[i]
        if self.routing == "random":
            k = int(np.searchsorted(cum, rng.random(), side="right"))
        else:
            # smooth weighted round robin: realised shares track r_j exactly
            cr = state.credit[i]
            cr[:-1] += np.diff(cum, prepend=0.0)
            cr[-1] += 1.0 - cum[-1]
            k = int(np.argmax(cr))
            cr[k] -= 1.0
        return tg[k] if k < len(tg) else -1

    def step(self, state: SimState, phi, s, arrivals, rng, delays: Optional[list] = None,
             departures: Optional[np.ndarray] = None) -> SimState:
        """Advance ``state`` by one interval in place and return it.

        ``arrivals`` are vehicle counts per movement; ``delays`` collects
        (movement, intervals queued) per served vehicle.
        """
        t = state.t
        queues, occ, storage = state.queues, state.link_occupancy, self.storage
        x0 = [len(q) for q in queues]
        for i, q in enumerate(queues):
            if not phi[i]:
                continue
            avail = float(s[i]) + state.carry[i]
            k = int(math.floor(avail + CARRY_TOL))
            state.carry[i] = avail - k
            n = min(k, x0[i])
            served = 0
            while served < n:
                j = state.pending[i]
                if j is None:
                    j = self._route(state, i, rng)
                if j >= 0:
                    dest = self.origin[j]
                    if occ[dest] >= storage[dest]:
                        state.pending[i] = j
                        break
                    occ[dest] += 1
                    queues[j].append(t + 1)
                else:
                    state.exited += 1
                state.pending[i] = None
                joined = q.popleft()
                occ[self.origin[i]] -= 1
                served += 1
                if delays is not None:
                    delays.append((i, t - joined))
            if departures is not None:
                departures[i] = served
        for i, n_new in enumerate(arrivals):
            st = state.stacked[i]
            if n_new < 0:
                raise ValueError("arrivals must be non-negative")
            if not n_new and not st:
                continue
            state.entered += int(n_new)
            st.extend([t + 1] * int(n_new))
            link = self.origin[i]
            while st and occ[link] < storage[link]:
                queues[i].append(st.popleft())
                occ[link] += 1
        state.t = t + 1
        return state


def draw_arrivals(scn: Scenario, state: SimState, t: int, rng) -> np.ndarray:
    a = scn.rates(t)
    if scn.arrivals == "poisson":
        return rng.poisson(a)
    total = a + state.arrival_carry
    n = np.floor(total + CARRY_TOL)
    state.arrival_carry = total - n
    return n.astype(np.int64)


@dataclass
class ControlView:
    """What a controller may look at when deciding interval ``t``."""

    t: int
    x: np.ndarray
    s_hat: np.ndarray
    hits: np.ndarray


def stream_rngs(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def run(scn: Scenario, ctrl, warmup: int = WARMUP, stop_stacked: Optional[float] = None,
        record_delays: bool = True) -> Trace:
    """Simulate ``scn`` under controller ``ctrl``.

    With ``stop_stacked`` the run ends after the first interval whose total
    stacked count exceeds it; the trace is then shorter than the horizon.
    """
    net = scn.net
    sim = Simulator(net, scn.finite_storage, scn.jam_spacing_m, scn.routing)
    rngs = stream_rngs(scn.seed)
    ctrl.bind(net, sim, rngs["controller"])
    state = sim.initial_state()
    H, M, N = scn.horizon, net.size, len(net.nodes)
    xs = np.zeros((H, M), dtype=np.int64)
    stacked = np.zeros(H, dtype=np.int64)
    phases = np.zeros((H, N), dtype=np.int64)
    phis = np.zeros((H, M), dtype=np.int8)
    s_true = np.zeros((H, M))
    s_hat = np.zeros((H, M))
    hits = np.zeros((H, M), dtype=bool)
    deps = np.zeros((H, M), dtype=np.int64)
    delays = [] if record_delays else None
    groups = sim.node_of if scn.pred.scope == "node" else None
    x = np.zeros(M, dtype=np.int64)
    stopped = False
    t_end = H
    for t in range(H):
        s = sample_joint(scn.model, rngs["sfr"])
        out = predict(scn.pred, scn.model, s, rngs["prediction"], groups)
        chosen = ctrl.decide(ControlView(t, x, out.s_hat, out.hit_mask))
        phi = ctrl.passing(chosen)
        arr = draw_arrivals(scn, state, t, rngs["arrivals"])
        sim.step(state, phi, s, arr, rngs["routing"], delays, deps[t])
        x = state.x
        xs[t] = x
        stacked[t] = state.stacked_total
        phases[t] = chosen
        phis[t] = phi
        s_true[t] = s
        s_hat[t] = out.s_hat
        hits[t] = out.hit_mask
        if stop_stacked is not None and stacked[t] > stop_stacked:
            stopped = True
            t_end = t + 1
            break
    unfinished = 0
    if delays is not None:
        # vehicles still queued or stacked count with the delay accrued so far,
        # otherwise gridlocked runs would report only their lucky vehicles
        for i in range(M):
            for joined in itertools.chain(state.queues[i], state.stacked[i]):
                delays.append((i, state.t - joined))
                unfinished += 1
    if delays:
        d = np.array(delays, dtype=np.int64)
        dnode, dint = sim.node_of[d[:, 0]], d[:, 1]
    else:
        dnode = dint = np.zeros(0, dtype=np.int64)
    sl = slice(0, t_end)
    return Trace(scn.demand.interval_s, sim.node_of, xs[sl], stacked[sl], phases[sl], phis[sl],
                 s_true[sl], s_hat[sl], hits[sl], deps[sl], dnode, dint, warmup,
                 state.entered, state.exited, stopped, unfinished)


def stability_stats(tr: Trace) -> tuple[float, float]:
    """(max_m x_m(T) / T, post-warmup mean of the total queue)."""
    T = tr.horizon
    if T == 0:
        return 0.0, 0.0
    rate = float(tr.x[-1].max(initial=0) / T)
    post = tr.x[min(tr.warmup, T - 1):].sum(axis=1)
    return rate, float(post.mean())


def queue_trend(tr: Trace, fraction: float = 0.5) -> tuple[float, float]:
    """Least-squares slope of the total queue over the final ``fraction`` of the run, and its mean."""
    total = tr.x.sum(axis=1).astype(float)
    tail = total[int(len(total) * (1.0 - fraction)):]
    if tail.size < 2:
        return 0.0, float(tail.mean()) if tail.size else 0.0
    slope = np.polyfit(np.arange(tail.size), tail, 1)[0]
    return float(slope), float(tail.mean())


def delay_stats(tr: Trace, n_nodes: Optional[int] = None) -> tuple[np.ndarray, float]:
    """Mean delay in seconds per node, and the vehicle-weighted network mean.

    Vehicles still waiting at the end of the run are included with the
    delay accrued so far. A node that saw no vehicle reports 0.
    """
    n_nodes = int(tr.node_of.max(initial=-1)) + 1 if n_nodes is None else n_nodes
    counts = np.bincount(tr.delay_node, minlength=n_nodes)
    sums = np.bincount(tr.delay_node, weights=tr.delay_intervals, minlength=n_nodes) * tr.interval_s
    per_node = np.divide(sums, counts, out=np.zeros(n_nodes), where=counts > 0)
    total = counts.sum()
    overall = float(sums.sum() / total) if total else 0.0
    return per_node, overall


def position_weight(n, lanes, length_m, jam_spacing_m: float = JAM_SPACING_M):
    """Sum over queued vehicles of d(v)/l for a queue packed from the stop line.

    Vehicle ``k`` (0 at the stop line) sits in cell ``k // lanes`` at
    distance ``d = l - cell * jam_spacing`` from the upstream end, floored at 0.
    """
    n = np.asarray(n, dtype=np.int64)
    lanes = np.asarray(lanes, dtype=np.int64)
    delta = jam_spacing_m / np.asarray(length_m, dtype=float)
    cells, rem = np.divmod(n, lanes)
    last = np.floor(1.0 / delta).astype(np.int64)  # highest cell with d >= 0
    full = np.minimum(cells, last + 1)
    head = lanes * (full - delta * full * (full - 1) / 2.0)
    tail = rem * np.maximum(0.0, 1.0 - cells * delta)
    return head + tail


def scenario_from_config(doc: Mapping[str, Any], seed: Optional[int] = None) -> Scenario:
    """Build a Scenario from a configuration document."""
    try:
        net = build_network(doc["network"])
        model = sfr_model_from_config(doc["sfr"], net.ids)
        dm = doc["demand"]
        demand = DemandSpec(np.asarray(dm["a"], dtype=float), float(dm.get("interval_s", 10.0)))
        pred = predictor_from_config(doc.get("predictor", {"theta": 0.0}))
        sm = doc.get("simulation", {})
        profile = dm.get("profile")
        ramp = None
        if "ramp" in doc:
            ramp = ramp_from_config(doc["ramp"], net, demand.interval_s)
        return Scenario(
            net, model, pred, demand,
            horizon=int(sm.get("horizon", 1000)),
            seed=int(sm.get("seed", 0) if seed is None else seed),
            arrivals=dm.get("arrivals", "poisson"),
            routing=sm.get("routing", "random"),
            profile=tuple(tuple(map(float, p)) for p in profile) if profile else None,
            ramp=ramp,
            finite_storage=sm.get("storage", "finite") == "finite",
            jam_spacing_m=float(sm.get("jam_spacing_m", JAM_SPACING_M)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc!r}") from exc


def ramp_from_config(block: Mapping[str, Any], net: Network, interval_s: float) -> Ramp:
    """Ramp block: {increment_veh_h, period_s, movements: "boundary"|"all"}."""
    inc_h = float(block.get("increment_veh_h", 5.0))
    period_s = float(block.get("period_s", 60.0))
    if inc_h <= 0 or period_s <= 0:
        raise ConfigError("ramp increment and period must be positive")
    period = max(1, int(round(period_s / interval_s)))
    which = block.get("movements", "boundary")
    mask = np.zeros(net.size, dtype=bool)
    if which == "boundary":
        mask[net.boundary_entries()] = True
    elif which == "all":
        mask[:] = True
    else:
        raise ConfigError("ramp.movements must be 'boundary' or 'all'")
    return Ramp(inc_h * interval_s / 3600.0, period, mask)
