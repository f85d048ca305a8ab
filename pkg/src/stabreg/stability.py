"""Stability regions under partial I-SFR knowledge.

The capacity delivered by a green schedule with prediction ability theta is

    c = theta * sum_e p_e * s_e * g_e + (1 - theta) * s_bar * g

where ``g_e`` is the green-ratio vector used when joint value ``e`` is
revealed and ``g`` the fallback used when prediction fails. Every schedule
vector must satisfy ``K g <= h``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import OutsideRegionError
from .lp import OPTIMAL, LpProblem, solve_lp
from .network import Network, demand_rates, inverse_i_minus_r
from .sfr import DEFAULT_CAP, SfrModel, joint_arrays, mean_sfr

FEAS_TOL = 1e-7
FRONTIER_TOL = 1e-6
HULL_DEDUP = 1e-9
FALLBACKS = ("coupled", "free")


@dataclass(frozen=True)
class GreenSchedule:
    theta: float
    g_e: np.ndarray  # (|E|, |M|), rows follow enumerate_joint_values order
    g: np.ndarray    # (|M|,) fallback

    def check(self, K: np.ndarray, h: np.ndarray, tol: float = 1e-8) -> bool:
        rows = np.vstack([self.g_e, self.g[None, :]])
        return bool(np.all(rows @ K.T <= h + tol))


@dataclass(frozen=True)
class ReserveResult:
    eps_max: float
    schedule: GreenSchedule
    lam: np.ndarray
    status: str = OPTIMAL


@dataclass(frozen=True)
class Region2D:
    vertices: np.ndarray  # counter-clockwise, starting at the origin
    area: float

    def contains(self, point, tol: float = 1e-8) -> bool:
        return point_in_convex_polygon(point, self.vertices, tol)


def capacity_of_schedule(model: SfrModel, sched: GreenSchedule, cap: int = DEFAULT_CAP) -> np.ndarray:
    p, S = joint_arrays(model, cap=cap)
    g_e = np.asarray(sched.g_e, dtype=float)
    g = np.asarray(sched.g, dtype=float)
    if g_e.shape != S.shape or g.shape != (model.size,):
        raise ValueError(f"schedule shapes {g_e.shape}/{g.shape} do not match "
                         f"{S.shape[0]} joint values x {model.size} movements")
    informed = (p[:, None] * S * g_e).sum(axis=0)
    return sched.theta * informed + (1.0 - sched.theta) * mean_sfr(model) * g


class _ScheduleSpace:
    """LP variables for the schedules and the rows they must satisfy.

    With ``fallback="free"`` the variables are [g_1 .. g_|E|, g] flattened
    row-major. With ``fallback="coupled"`` the fallback is the guess-averaged
    informed schedule, g = sum_e p_e g_e, so only the g_e are variables; g is
    then in the admissible set automatically because that set is convex.
    ``C`` maps the variables to the capacity vector, ``A``/``b`` are the
    stacked conflict rows.
    """

    def __init__(self, net: Network, model: SfrModel, theta: float, cap: int = DEFAULT_CAP,
                 fallback: str = "coupled"):
        if model.size != net.size:
            raise ValueError("SFR model and network disagree on the number of movements")
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        self.theta = theta
        self.fallback = fallback
        self.p, self.S = joint_arrays(model, cap=cap)
        E, M = self.S.shape
        self.E, self.M = E, M
        blocks = E + 1 if fallback == "free" else E
        self.nvar = blocks * M
        sbar = mean_sfr(model)
        C = np.zeros((M, self.nvar))
        diag = np.arange(M)
        for e in range(E):
            coef = theta * self.p[e] * self.S[e]
            if fallback == "coupled":
                coef = coef + (1.0 - theta) * self.p[e] * sbar
            C[diag, e * M + diag] = coef
        if fallback == "free":
            C[diag, E * M + diag] = (1.0 - theta) * sbar
        self.C = C
        Kc, hc = net.conflict_rows()
        r = Kc.shape[0]
        A = np.zeros((blocks * r, self.nvar))
        for k in range(blocks):
            A[k * r:(k + 1) * r, k * M:(k + 1) * M] = Kc
        self.A = A
        self.b = np.tile(hc, blocks)

    def schedule(self, x: np.ndarray) -> GreenSchedule:
        gv = np.clip(x[:self.nvar], 0.0, None).reshape(-1, self.M)
        if self.fallback == "free":
            return GreenSchedule(self.theta, gv[:-1].copy(), gv[-1].copy())
        return GreenSchedule(self.theta, gv.copy(), self.p @ gv)

    def max_growth(self, base: np.ndarray, direction: np.ndarray):
        """max t s.t. base + t * direction <= C x, schedule rows hold.

        When x = 0 with t = -max(base / direction) is feasible, t gets that
        lower bound so the slack basis is a feasible start and phase 1 is
        skipped.
        """
        n = self.nvar
        pos = direction > 0
        t_lo = None
        if np.all(base[~pos] <= 0):
            t_lo = -float(np.max(base[pos] / direction[pos], initial=0.0))
        A_cap = np.hstack([-self.C, direction[:, None]])
        A_sch = np.hstack([self.A, np.zeros((self.A.shape[0], 1))])
        c = np.zeros(n + 1)
        c[-1] = 1.0
        prob = LpProblem(c, np.vstack([A_cap, A_sch]), np.concatenate([-base, self.b]),
                         bounds=[(0.0, None)] * n + [(t_lo, None)])
        return solve_lp(prob)


def reserve_demand(net: Network, model: SfrModel, a, theta: float,
                   cap: int = DEFAULT_CAP, fallback: str = "coupled") -> ReserveResult:
    """Largest uniform exogenous increment eps keeping (I-R)^-1 (a + eps) in the region.

    Negative values mean the demand already lies outside the region.
    """
    space = _ScheduleSpace(net, model, theta, cap, fallback)
    lam = demand_rates(net, np.asarray(a, dtype=float))
    w = inverse_i_minus_r(net) @ np.ones(net.size)
    sol = space.max_growth(lam, w)
    if sol.status != OPTIMAL:
        raise RuntimeError(f"reserve LP returned {sol.status}")
    return ReserveResult(float(sol.x[-1]), space.schedule(sol.x), lam)


def region_hull_2d(net: Network, model: SfrModel, theta: float, n_dirs: int = 64,
                   cap: int = DEFAULT_CAP, fallback: str = "coupled") -> Region2D:
    """Polygon of the 2-movement stability region by support-function sampling."""
    if net.size != 2:
        raise ValueError("region_hull_2d needs a network with exactly 2 movements")
    space = _ScheduleSpace(net, model, theta, cap, fallback)
    pts = []
    for ang in np.linspace(0.0, np.pi / 2, max(int(n_dirs), 2)):
        d = np.array([np.cos(ang), np.sin(ang)])
        sol = solve_lp(LpProblem(d @ space.C, space.A, space.b))
        if sol.status != OPTIMAL:
            raise RuntimeError(f"hull LP returned {sol.status}")
        pts.append(space.C @ sol.x)
    pts = np.array(pts)
    xmax, ymax = pts[:, 0].max(), pts[:, 1].max()
    pts = np.vstack([pts, [[xmax, 0.0], [0.0, ymax], [0.0, 0.0]]])
    verts = convex_hull(pts)
    if len(verts) < 3:
        raise ValueError("degenerate region: fewer than 3 hull vertices")
    start = int(np.argmin(np.abs(verts).sum(axis=1)))
    verts = np.roll(verts, -start, axis=0)
    return Region2D(verts, polygon_area(verts))


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = np.round(np.asarray(points, dtype=float) / HULL_DEDUP) * HULL_DEDUP
    pts = sorted(set(map(tuple, pts)))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= HULL_DEDUP:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= HULL_DEDUP:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def point_in_convex_polygon(point, vertices, tol: float = 1e-8) -> bool:
    v = np.asarray(vertices, dtype=float)
    p = np.asarray(point, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    cross = (nxt[:, 0] - v[:, 0]) * (p[1] - v[:, 1]) - (nxt[:, 1] - v[:, 1]) * (p[0] - v[:, 0])
    return bool(np.all(cross >= -tol))


def dominates(alpha, beta) -> bool:
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return bool(np.all(a >= b) and np.any(a > b))


def in_region(net: Network, model: SfrModel, theta: float, lam, form: str = "inequality",
              cap: int = DEFAULT_CAP, fallback: str = "coupled") -> bool:
    """Membership of demand-rate vector ``lam`` in the region.

    ``form="inequality"`` asks for a schedule with capacity >= lam,
    ``form="equality"`` for one with capacity == lam exactly.
    """
    space = _ScheduleSpace(net, model, theta, cap, fallback)
    lam = np.asarray(lam, dtype=float)
    zero = np.zeros(space.nvar)
    if form == "inequality":
        prob = LpProblem(zero, np.vstack([-space.C, space.A]), np.concatenate([-lam, space.b]))
    elif form == "equality":
        prob = LpProblem(zero, space.A, space.b, A_eq=space.C, b_eq=lam)
    else:
        raise ValueError(f"unknown form {form!r}")
    return solve_lp(prob).status == OPTIMAL


def frontier_membership(net: Network, model: SfrModel, theta: float, point,
                        kind: str = "precise", cap: int = DEFAULT_CAP, fallback: str = "coupled") -> bool:
    """Whether demand-rate ``point`` lies on the precise or general upper frontier.

    Raises OutsideRegionError when the point is not in the region at all.
    """
    lam = np.asarray(point, dtype=float)
    if np.any(lam < 0):
        raise ValueError("demand point must be non-negative")
    space = _ScheduleSpace(net, model, theta, cap, fallback)
    if kind == "general":
        sol = space.max_growth(lam, np.ones(net.size))
        if sol.x[-1] < -FRONTIER_TOL:
            raise OutsideRegionError(f"point {lam.tolist()} lies outside the region")
        return bool(sol.x[-1] <= FRONTIER_TOL)
    if kind != "precise":
        raise ValueError(f"unknown frontier kind {kind!r}")
    M, n = net.size, space.nvar
    # max sum(delta) s.t. lam + delta <= C x, delta >= 0
    A = np.vstack([np.hstack([-space.C, np.eye(M)]),
                   np.hstack([space.A, np.zeros((space.A.shape[0], M))])])
    c = np.concatenate([np.zeros(n), np.ones(M)])
    sol = solve_lp(LpProblem(c, A, np.concatenate([-lam, space.b])))
    if sol.status != OPTIMAL:
        raise OutsideRegionError(f"point {lam.tolist()} lies outside the region")
    return bool(sol.objective <= FRONTIER_TOL)


def reserve_sweep(net: Network, model: SfrModel, a, thetas: Sequence[float],
                  cap: int = DEFAULT_CAP, fallback: str = "coupled") -> np.ndarray:
    return np.array([reserve_demand(net, model, a, th, cap, fallback).eps_max for th in thetas])


def ray_limit(net: Network, model: SfrModel, theta: float, a, cap: int = DEFAULT_CAP, fallback: str = "coupled") -> float:
    """Largest k such that demand k * a stays in the region."""
    space = _ScheduleSpace(net, model, theta, cap, fallback)
    lam = demand_rates(net, np.asarray(a, dtype=float))
    sol = space.max_growth(np.zeros(net.size), lam)
    return float(sol.x[-1])


def saturate(g: np.ndarray, K: np.ndarray, h: np.ndarray, order: Optional[Sequence[int]] = None) -> np.ndarray:
    """Raise each coordinate of ``g`` as far as ``K g <= h`` allows."""
    g = np.array(g, dtype=float)
    for m in (range(g.size) if order is None else order):
        col = K[:, m]
        rows = col > 0
        if not rows.any():
            continue
        slack = (h[rows] - K[rows] @ g) / col[rows]
        g[m] += max(0.0, float(slack.min()))
    return g
