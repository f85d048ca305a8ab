"""Command-line entry point: ``stabreg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .control import controller_from_config
from .errors import ConfigError, EnumerationCapError
from .harness import (experiment_from_config, load_json, polygons_svg, resolve_scenario, rows_to_csv,
                      run_experiment, write_atomic)
from .network import build_network
from .sfr import sfr_model_from_config
from .simulate import delay_stats, run, scenario_from_config, stability_stats

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
CONTROLLERS = ("bp", "pwbp", "lescbp", "fixed", "sfronly")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _scenario_doc(ref: str) -> dict:
    """A builtin scenario name or a JSON file path."""
    return resolve_scenario(ref)


def _net_model(doc):
    try:
        net = build_network(doc["network"])
        return net, sfr_model_from_config(doc["sfr"], net.ids)
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc}") from exc


def _thetas(args) -> list[float]:
    if getattr(args, "theta_sweep", None):
        try:
            lo, hi, step = (float(v) for v in args.theta_sweep.split(":"))
        except ValueError as exc:
            raise ConfigError("--theta-sweep expects start:stop:step") from exc
        if step <= 0 or hi < lo:
            raise ConfigError("--theta-sweep needs step > 0 and stop >= start")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + k * step, 12) for k in range(n)]
    return [float(t) for t in args.theta]


def cmd_region(args) -> str:
    from .stability import region_hull_2d
    net, model = _net_model(_scenario_doc(args.config))
    rows, polys, areas = [], [], []
    for th in _thetas(args):
        reg = region_hull_2d(net, model, th, args.dirs)
        areas.append(reg.area)
        polys.append((f"theta={th:g}", reg.vertices))
        rows += [{"theta": th, "vertex": k, "c1": float(u), "c2": float(v), "area": reg.area}
                 for k, (u, v) in enumerate(reg.vertices)]
    write_atomic(args.out, rows_to_csv(rows))
    if args.svg:
        write_atomic(args.svg, polygons_svg(polys))
    return "region areas: " + ", ".join(f"theta={t:g} {a:.6g}" for t, a in zip(_thetas(args), areas))


def cmd_reserve(args) -> str:
    from .stability import reserve_demand
    doc = _scenario_doc(args.config)
    net, model = _net_model(doc)
    a = np.asarray(doc["demand"]["a"], dtype=float)
    rows = []
    for th in _thetas(args):
        res = reserve_demand(net, model, a, th, fallback=args.fallback)
        rows.append({"theta": th, "eps_max": res.eps_max})
    write_atomic(args.out, rows_to_csv(rows))
    return f"reserve demand at {len(rows)} theta values written to {args.out}"


def cmd_simulate(args) -> str:
    from dataclasses import replace
    doc = _scenario_doc(args.config)
    scn = scenario_from_config(doc, seed=args.seed)
    if args.theta is not None:
        scn = replace(scn, pred=replace(scn.pred, theta=args.theta))
    if args.horizon is not None:
        scn = replace(scn, horizon=args.horizon)
    block = dict(doc.get("controller", {}))
    if args.controller:
        block = {**(block if block.get("type") == args.controller else {}), "type": args.controller}
    if "type" not in block:
        raise ConfigError("no controller given (use --controller or a controller block)")
    ctrl = controller_from_config(block, scn)
    tr = run(scn, ctrl, args.warmup)
    lines = ["t,movement,x,phase_active,s_true,s_hat,stacked_total"]
    ids = scn.net.ids
    for t in range(tr.horizon):
        for m, mid in enumerate(ids):
            lines.append(f"{t},{mid},{tr.x[t, m]},{tr.phi[t, m]},{float(tr.s_true[t, m])!r},"
                         f"{float(tr.s_hat[t, m])!r},{tr.stacked[t]}")
    write_atomic(args.out, "\n".join(lines) + "\n")
    rate, strong = stability_stats(tr)
    _, delay = delay_stats(tr, len(scn.net.nodes))
    return (f"{tr.horizon} intervals, rate_stat={rate:.4g}, strong_stat={strong:.4g}, "
            f"mean_delay_s={delay:.4g}")


def cmd_sweep(args) -> str:
    path = Path(args.config)
    cfg = experiment_from_config(load_json(path), path.parent)
    if args.jobs is not None:
        from dataclasses import replace
        cfg = replace(cfg, jobs=args.jobs)
    rep = run_experiment(cfg)
    write_atomic(args.out, rep.to_csv())
    summary_path = args.summary or str(Path(args.out).with_suffix(".summary.csv"))
    write_atomic(summary_path, rep.summary_csv())
    prov = args.out + ".provenance.json" if not args.provenance else args.provenance
    write_atomic(prov, json.dumps({"kind": rep.kind, **rep.provenance}, indent=2) + "\n")
    if args.svg and rep.kind == "region_plot":
        polys = []
        for th in cfg.thetas:
            v = np.array([[r["c1"], r["c2"]] for r in rep.rows if r["theta"] == th])
            polys.append((f"theta={th:g}", v))
        write_atomic(args.svg, polygons_svg(polys))
    return f"{rep.kind}: {len(rep.rows)} rows, {len(rep.summary)} summary rows -> {args.out}"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stabreg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name in ("stability", "region"):
        s = sub.add_parser(name, help="2-movement stability region hull")
        s.add_argument("--config", required=True)
        s.add_argument("--theta", type=float, nargs="+", default=[1.0])
        s.add_argument("--dirs", type=int, default=64)
        s.add_argument("--out", required=True)
        s.add_argument("--svg")
        s.set_defaults(func=cmd_region)

    s = sub.add_parser("reserve", help="reserve demand eps_max over theta")
    s.add_argument("--config", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--theta", type=float, nargs="+", default=[1.0])
    g.add_argument("--theta-sweep", help="start:stop:step")
    s.add_argument("--fallback", choices=("coupled", "free"), default="coupled")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reserve)

    s = sub.add_parser("simulate", help="run one simulation and write its trace")
    s.add_argument("--config", required=True)
    s.add_argument("--controller", choices=CONTROLLERS)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--theta", type=float)
    s.add_argument("--horizon", type=int)
    s.add_argument("--warmup", type=int, default=60)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="run an experiment config (ramp, delay, theta, region)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.add_argument("--provenance")
    s.add_argument("--svg")
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        print(args.func(args))
        return EXIT_OK
    except (ConfigError, EnumerationCapError) as exc:
        print(f"stabreg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"stabreg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
