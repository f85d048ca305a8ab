"""Experiment protocols, seeded replication and report output."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .control import controller_from_config
from .errors import ConfigError
from .network import SCHEMA_VERSION
from .scenarios import BUILTIN, builtin
from .sfr import Predictor, accuracy_from_ability, prediction_hits
from .simulate import Scenario, delay_stats, ramp_from_config, run, scenario_from_config

KINDS = ("reserve_ramp", "delay_sweep", "theta_sweep", "region_plot")

# 50% -> 100% -> 150% -> 100% -> 50% of the base demand over 90 minutes
PEAK_PROFILE = ((0, 0.5), (600, 0.5), (1200, 1.0), (1800, 1.5), (3600, 1.5), (4200, 1.0),
                (4800, 0.5), (5400, 0.5))


@dataclass(frozen=True)
class RampSpec:
    increment_veh_h: float = 5.0
    period_s: float = 60.0
    thresholds: tuple = (100.0,)
    movements: str = "boundary"

    def __post_init__(self):
        if self.increment_veh_h <= 0:
            raise ConfigError("ramp increment must be > 0")
        if self.period_s <= 0:
            raise ConfigError("ramp period must be > 0")
        if not self.thresholds or min(self.thresholds) <= 0:
            raise ConfigError("stack thresholds must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Mapping[str, Any]
    kind: str
    thetas: tuple = (0.0, 0.6, 1.0)
    controllers: tuple = ({"type": "bp"},)
    replications: int = 30
    base_seed: int = 0
    ramp: RampSpec = RampSpec()
    max_horizon: int = 50_000
    horizon: Optional[int] = None
    warmup: int = 60
    guess: str = "mean"
    scope: str = "movement"
    band: float = 1.0
    profile: Optional[tuple] = None
    n_dirs: int = 64
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if any(not 0.0 <= th <= 1.0 for th in self.thetas):
            raise ConfigError("every theta must lie in [0, 1]")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.replications)]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "jobs"}
        d["ramp"] = dict(self.ramp.__dict__)
        return json.loads(json.dumps(d, default=list))


@dataclass
class ExperimentReport:
    kind: str
    rows: list
    summary: list
    provenance: dict

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def summary_csv(self) -> str:
        return rows_to_csv(self.summary)


def config_hash(doc: Any) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=list).encode()).hexdigest()


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_sha256": config_hash(cfg.to_dict()), "seeds": cfg.seeds, "version": __version__}


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0, "mean": math.nan, "median": math.nan, "sd": math.nan, "min": math.nan, "max": math.nan}
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
            "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0, "min": float(v.min()), "max": float(v.max())}


def sign_test(a, b) -> tuple[int, int, float]:
    """Paired one-sided sign test that ``b`` exceeds ``a``: (wins, non-tied pairs, p-value)."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    wins, n = int((d > 0).sum()), int((d != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def _map(fn: Callable, jobs_args: list, jobs: int) -> list:
    """Evaluate in order; a process pool when ``jobs`` > 1."""
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*jobs_args)))


def _scenario(cfg: ExperimentConfig, theta: float, seed: int, **over) -> Scenario:
    scn = scenario_from_config(cfg.scenario, seed=seed)
    pred = Predictor(theta, cfg.guess, cfg.band, cfg.scope)
    return replace(scn, pred=pred, **over)


# ------------------------------------------------------------------ ramp


def _ramp_one(cfg: ExperimentConfig, ctrl_block: dict, theta: float, seed: int) -> list[dict]:
    base = scenario_from_config(cfg.scenario, seed=seed)
    ramp = ramp_from_config(dict(cfg.ramp.__dict__), base.net, base.demand.interval_s)
    scn = _scenario(cfg, theta, seed, ramp=ramp, horizon=cfg.max_horizon, finite_storage=True)
    ctrl = controller_from_config(ctrl_block, scn)
    thresholds = sorted(cfg.ramp.thresholds)
    tr = run(scn, ctrl, cfg.warmup, stop_stacked=thresholds[-1], record_delays=False)
    rows = []
    for thr in thresholds:
        over = np.flatnonzero(tr.stacked > thr)
        crossed = over.size > 0
        t_c = int(over[0]) if crossed else tr.horizon
        steps = t_c // ramp.period
        eps = ramp.increment * steps
        rows.append({
            "controller": ctrl_block["type"], "theta": theta, "seed": seed, "threshold": thr,
            "censored": not crossed, "t_cross": t_c, "ramp_steps": steps,
            "eps_hat_veh_interval": eps, "eps_hat_veh_h": eps * 3600.0 / scn.demand.interval_s,
        })
    return rows


def run_reserve_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Ramp demand until the stacked count crosses each threshold; report the increase."""
    if cfg.kind != "reserve_ramp":
        raise ConfigError("run_reserve_experiment needs kind 'reserve_ramp'")
    args = [(cfg, c, th, s) for c in cfg.controllers for th in cfg.thetas for s in cfg.seeds]
    rows = [r for batch in _map(_ramp_one, args, cfg.jobs) for r in batch]
    summary = []
    for c in cfg.controllers:
        for th in cfg.thetas:
            for thr in sorted(cfg.ramp.thresholds):
                sel = [r for r in rows if r["controller"] == c["type"] and r["theta"] == th
                       and r["threshold"] == thr]
                done = [r["eps_hat_veh_h"] for r in sel if not r["censored"]]
                summary.append({"controller": c["type"], "theta": th, "threshold": thr,
                                "censored": len(sel) - len(done), **summarize(done)})
    return ExperimentReport(cfg.kind, rows, summary, _provenance(cfg))


def paired(rows: Sequence[dict], key: str, **match) -> np.ndarray:
    """Values of ``key`` for rows matching ``match``, ordered by seed."""
    sel = [r for r in rows if all(r[k] == v for k, v in match.items())]
    return np.array([r[key] for r in sorted(sel, key=lambda r: r["seed"])], dtype=float)


# ------------------------------------------------------------------ delay


def _delay_one(cfg: ExperimentConfig, ctrl_block: dict, theta: float, seed: int) -> dict:
    over = {"finite_storage": True}
    if cfg.horizon is not None:
        over["horizon"] = cfg.horizon
    if cfg.profile is not None:
        over["profile"] = tuple(cfg.profile)
    scn = _scenario(cfg, theta, seed, **over)
    ctrl = controller_from_config(ctrl_block, scn)
    tr = run(scn, ctrl, cfg.warmup)
    per_node, overall = delay_stats(tr, len(scn.net.nodes))
    eta = float(np.mean([accuracy_from_ability(scn.model, m, scn.pred) for m in range(scn.net.size)]))
    hit = float(prediction_hits(tr.s_hat, tr.s_true, scn.pred.band).mean())
    row = {"controller": ctrl_block["type"], "theta": theta, "seed": seed,
           "accuracy_analytic": eta, "accuracy_empirical": hit, "mean_delay_s": overall,
           "vehicles": int(tr.delay_node.size), "unfinished": tr.unfinished,
           "final_stacked": int(tr.stacked[-1])}
    for n, node in enumerate(scn.net.nodes):
        row[f"delay_s_{node}"] = float(per_node[n])
    return row


def run_delay_sweep(cfg: ExperimentConfig) -> ExperimentReport:
    """Mean vehicle delay for every (controller, theta) cell and replication."""
    if cfg.kind != "delay_sweep":
        raise ConfigError("run_delay_sweep needs kind 'delay_sweep'")
    args = [(cfg, c, th, s) for c in cfg.controllers for th in cfg.thetas for s in cfg.seeds]
    rows = _map(_delay_one, args, cfg.jobs)
    summary = []
    for c in cfg.controllers:
        for th in cfg.thetas:
            sel = [r for r in rows if r["controller"] == c["type"] and r["theta"] == th]
            summary.append({"controller": c["type"], "theta": th,
                            "accuracy_analytic": sel[0]["accuracy_analytic"],
                            "accuracy_empirical": float(np.mean([r["accuracy_empirical"] for r in sel])),
                            **summarize([r["mean_delay_s"] for r in sel])})
    return ExperimentReport(cfg.kind, rows, summary, _provenance(cfg))


# ------------------------------------------------------------------ LP based


def run_theta_sweep(cfg: ExperimentConfig) -> ExperimentReport:
    from .stability import reserve_sweep
    scn = scenario_from_config(cfg.scenario)
    eps = reserve_sweep(scn.net, scn.model, scn.demand.a, cfg.thetas)
    rows = [{"theta": th, "eps_max": float(e)} for th, e in zip(cfg.thetas, eps)]
    fit = np.polyfit(cfg.thetas, eps, 1) if len(cfg.thetas) > 1 else (math.nan, math.nan)
    summary = [{"slope": float(fit[0]), "intercept": float(fit[1]),
                "zero_theta": float(-fit[1] / fit[0]) if fit[0] else math.nan}]
    return ExperimentReport(cfg.kind, rows, summary, _provenance(cfg))


def run_region_plot(cfg: ExperimentConfig) -> ExperimentReport:
    from .stability import region_hull_2d
    scn = scenario_from_config(cfg.scenario)
    rows, summary = [], []
    for th in cfg.thetas:
        reg = region_hull_2d(scn.net, scn.model, th, cfg.n_dirs)
        for k, (u, v) in enumerate(reg.vertices):
            rows.append({"theta": th, "vertex": k, "c1": float(u), "c2": float(v)})
        summary.append({"theta": th, "area": reg.area, "vertices": len(reg.vertices)})
    return ExperimentReport(cfg.kind, rows, summary, _provenance(cfg))


RUNNERS = {"reserve_ramp": run_reserve_experiment, "delay_sweep": run_delay_sweep,
           "theta_sweep": run_theta_sweep, "region_plot": run_region_plot}


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    return RUNNERS[cfg.kind](cfg)


# ------------------------------------------------------------------ config


def load_json(path: str | os.PathLike) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    version = doc.get("schema_version")
    if version is not None and str(version) != SCHEMA_VERSION:
        raise ConfigError(f"{p}: unsupported schema_version {version!r}")
    return doc


def resolve_scenario(ref: Any, base_dir: Optional[Path] = None) -> dict:
    """A scenario is an inline object, a builtin name or a path to a JSON file."""
    if isinstance(ref, Mapping):
        return dict(ref)
    if isinstance(ref, str):
        if ref in BUILTIN:
            return builtin(ref)
        p = Path(ref)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return load_json(p)
    raise ConfigError("experiment.scenario must be an object, a builtin name or a path")


def experiment_from_config(doc: Mapping[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
    try:
        ex = doc.get("experiment", doc)
        ramp = ex.get("ramp", {})
        thresholds = ramp.get("thresholds", [ramp.get("threshold", 100.0)])
        return ExperimentConfig(
            scenario=resolve_scenario(ex["scenario"], base_dir),
            kind=ex["kind"],
            thetas=tuple(float(t) for t in ex.get("thetas", (0.0, 0.6, 1.0))),
            controllers=tuple(ex.get("controllers", [{"type": "bp"}])),
            replications=int(ex.get("replications", 30)),
            base_seed=int(ex.get("base_seed", 0)),
            ramp=RampSpec(float(ramp.get("increment_veh_h", 5.0)), float(ramp.get("period_s", 60.0)),
                          tuple(float(t) for t in thresholds), ramp.get("movements", "boundary")),
            max_horizon=int(ex.get("max_horizon", 50_000)),
            horizon=None if ex.get("horizon") is None else int(ex["horizon"]),
            warmup=int(ex.get("warmup", 60)),
            guess=ex.get("guess", "mean"),
            scope=ex.get("scope", "movement"),
            band=float(ex.get("band", 1.0)),
            profile=tuple(tuple(map(float, p)) for p in ex["profile"]) if ex.get("profile") else None,
            n_dirs=int(ex.get("n_dirs", 64)),
            jobs=int(ex.get("jobs", 1)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"experiment: {exc!r}") from exc


# ------------------------------------------------------------------ output


def rows_to_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    if rows:
        fields = list(rows[0].keys())
        for r in rows[1:]:
            fields += [k for k in r if k not in fields]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` via a temporary file in the same directory, then rename."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=f".{p.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, p)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


PALETTE = ("#d95f02", "#1f78b4", "#33a02c", "#6a3d9a", "#e31a1c")


def polygons_svg(polys: Sequence[tuple[str, np.ndarray]], size: int = 400, pad: int = 40) -> str:
    """Minimal SVG with one outlined polygon per (label, vertices) pair."""
    allv = np.vstack([v for _, v in polys]) if polys else np.zeros((1, 2))
    span = float(max(allv.max(), 1e-9))
    scale = (size - 2 * pad) / span

    def xy(p):
        return f"{pad + p[0] * scale:.2f},{size - pad - p[1] * scale:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{size - pad}" x2="{pad}" y2="{pad}" stroke="black"/>']
    for k, (label, v) in enumerate(polys):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(xy(p) for p in v)
        out.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{size - pad - 100}" y="{pad + 16 * k}" fill="{color}" '
                   f'font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
