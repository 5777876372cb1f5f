"""Command-line entry point: ingest, train, stream, eval, simulate, analyze."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import em, evaluate, simulate
from .events import (
    RATING, Event, ModelParams, read_event_csv, validate_log, write_event_csv,
)
from .evaluate import EvalProtocol, centered_scale
from .online import FilterState
from .probit import default_thresholds

log = logging.getLogger("srec")


def _load_config(path) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            cfg[key.strip()] = val.strip()
    return cfg


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config file supplies defaults; explicit flags win (they already parsed)."""
    if not getattr(args, "config", None):
        return
    cfg = _load_config(args.config)
    # collect option actions from the top-level parser and the chosen subcommand
    actions: dict[str, argparse.Action] = {}
    for p in (parser, getattr(args, "_subparser", None)):
        if p is None:
            continue
        for act in p._actions:
            if act.dest not in ("help", "==SUPPRESS=="):
                actions.setdefault(act.dest, act)
    for key, raw in cfg.items():
        attr = key.replace("-", "_")
        act = actions.get(attr)
        if act is None or not hasattr(args, attr):
            parser.error(f"unknown config key {key!r}")
        if getattr(args, attr) != act.default:
            continue  # an explicit flag already overrode this key
        if act.type is not None:
            setattr(args, attr, act.type(raw))
        elif isinstance(act.default, bool):
            setattr(args, attr, raw.lower() in ("1", "true", "yes"))
        elif act.default is not None:
            setattr(args, attr, type(act.default)(raw))
        else:
            setattr(args, attr, raw)


def _default_params(args) -> ModelParams:
    return ModelParams(
        sigma2_E=args.sigma2_e, sigma2_U=args.sigma2_u, sigma2_V=args.sigma2_v,
        d=args.d, sigma2_U0=args.sigma2_u0, sigma2_V0=args.sigma2_v0)


def _params_from(args) -> ModelParams:
    if args.params and os.path.exists(args.params):
        return ModelParams.load(args.params)
    if args.params:
        log.warning("params file %s not found, using defaults", args.params)
    return _default_params(args)


def _scale_for(events, K, anchor):
    if anchor is None:
        levels = [ev.level for ev in events if ev.kind == RATING]
        mean_level = float(np.mean(levels)) if levels else (K + 1) / 2.0
        return centered_scale(K, mean_level), mean_level
    return default_thresholds(K, anchor, 1.0), None


def cmd_ingest(args) -> int:
    if args.format != "movielens":
        raise ValueError(f"unknown format {args.format!r}")
    data = evaluate.load_movielens(args.input)
    write_event_csv(data.events, args.out)
    span = data.events[-1].time - data.events[0].time if data.events else 0.0
    print(f"ratings={data.n_ratings} users={data.n_users} items={data.n_items} "
          f"K={data.K} star_step={data.star_step} mean_level={data.mean_level:.4f} "
          f"span_days={span:.1f}")
    return 0


def cmd_train(args) -> int:
    events = read_event_csv(args.events)
    scale, _ = _scale_for(events, args.k, args.anchor)
    init = _params_from(args)
    cfg = em.EMConfig(max_iters=args.max_iters, tol=args.tol)
    params, trace = em.em_fit(events, init, scale, cfg)
    params.save(args.out)
    if args.trace:
        em.write_trace_csv(trace, args.trace)
    print(f"iterations={len(trace)} sigma2_E={params.sigma2_E:.6g} "
          f"sigma2_U={params.sigma2_U:.6g} sigma2_V={params.sigma2_V:.6g}")
    return 0


def cmd_stream(args) -> int:
    events = read_event_csv(args.events)
    scale, _ = _scale_for(events, args.k, args.anchor)
    params = _params_from(args)
    fs = FilterState(params, scale)
    metrics = fs.run_stream(events)
    if args.snapshot_out:
        fs.save_snapshot(args.snapshot_out)
    rate = metrics.n_ratings / metrics.wall_seconds if metrics.wall_seconds else float("inf")
    print(f"batches={metrics.n_batches} events={metrics.n_events} "
          f"ratings={metrics.n_ratings} iterations={metrics.total_iterations} "
          f"wall_s={metrics.wall_seconds:.2f} ratings_per_s={rate:.0f}")
    return 0


def cmd_eval(args) -> int:
    events = read_event_csv(args.events)
    params = _params_from(args)
    protocol = EvalProtocol(horizon=args.horizon, split_fraction=args.split_fraction,
                            repeats=args.repeats, seed=args.seed)
    res = evaluate.prequential_eval(events, params, protocol, K=args.k,
                                    star_step=args.star_step)
    out = {
        "rmse_mean": res.rmse_mean,
        "rmse_std": res.rmse_std,
        "rmse_per_repeat": res.rmse_per_repeat,
        "baseline_rmse": res.baseline_rmse,
        "n_pairs": res.n_pairs,
        "reference_times": res.reference_times,
    }
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_simulate(args) -> int:
    params = _default_params(args)
    scale = default_thresholds(args.k, args.anchor if args.anchor is not None
                               else 1.5 - (args.k + 1) / 2.0, 1.0)
    cfg = simulate.SimConfig(
        params=params, scale=scale, user_rate=args.user_rate,
        item_rate=args.item_rate, rating_rate=args.rating_rate,
        horizon=args.horizon, seed=args.seed)
    result = simulate.generate(cfg)
    rep = validate_log(result.events, K=args.k)
    if not rep.ok:
        raise AssertionError(f"simulator emitted invalid log: {rep}")
    write_event_csv(result.events, args.out)
    if args.truth_out:
        simulate.write_truth_csv(result.truth, args.truth_out)
    n_rate = sum(1 for ev in result.events if ev.kind == RATING)
    print(f"events={len(result.events)} ratings={n_rate}")
    return 0


def cmd_analyze(args) -> int:
    if args.what == "corr-decay":
        fs = FilterState.load_snapshot(args.snapshot)
        grid = np.linspace(0.0, args.max_days, args.grid_points)
        curve = evaluate.correlation_decay(fs, args.side, grid)
        evaluate.write_correlation_csv(curve, args.out)
        print(f"half_time_days={curve.half_time:.4g} "
              f"half_time_years={curve.half_time / 365.25:.4g}")
        return 0
    # trajectories
    events = read_event_csv(args.events)
    scale, _ = _scale_for(events, args.k, args.anchor)
    params = _params_from(args)
    fs = FilterState(params, scale)
    pairs = []
    if args.pairs:
        for chunk in args.pairs.split(","):
            u, _, i = chunk.partition(":")
            pairs.append((u, i))
    exporter = evaluate.TrajectoryExporter(pairs)
    fs.run_stream(events, recorder=exporter)
    sample_times = None
    if pairs and events:
        sample_times = np.linspace(events[0].time, events[-1].time, args.grid_points)
    exporter.write_csv(args.out, sample_times)
    print(f"series={len(exporter.series)}")
    return 0


def _add_param_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=16, help="latent dimension")
    p.add_argument("--sigma2-e", type=float, default=1.0)
    p.add_argument("--sigma2-u", type=float, default=1e-3)
    p.add_argument("--sigma2-v", type=float, default=1e-3)
    p.add_argument("--sigma2-u0", type=float, default=1.0)
    p.add_argument("--sigma2-v0", type=float, default=1.0)


def _add_scale_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=10, help="number of rating levels")
    p.add_argument("--anchor", type=float, default=None,
                   help="first interior threshold; default centers on the data mean")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srec",
        description="Streaming recommender: online filtering, offline EM, "
                    "simulation and prequential evaluation.")
    parser.add_argument("--config", help="key=value config file; flags override")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (modules are currently single-threaded)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a raw dataset to the canonical event CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="movielens")
    p.add_argument("--out", required=True)
    p.set_defaults(_subparser=p, fn=cmd_ingest)

    p = sub.add_parser("train", help="offline EM parameter estimation")
    p.add_argument("--events", required=True)
    p.add_argument("--params", help="initial params file (defaults if missing)")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-iteration trace CSV")
    p.add_argument("--max-iters", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-3)
    _add_param_flags(p)
    _add_scale_flags(p)
    p.set_defaults(_subparser=p, fn=cmd_train)

    p = sub.add_parser("stream", help="run the online filter over an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--params")
    p.add_argument("--snapshot-out")
    _add_param_flags(p)
    _add_scale_flags(p)
    p.set_defaults(_subparser=p, fn=cmd_stream)

    p = sub.add_parser("eval", help="prequential RMSE evaluation")
    p.add_argument("--events", required=True)
    p.add_argument("--params")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--horizon", type=float, default=7.0)
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--star-step", type=float, default=0.5)
    _add_param_flags(p)
    _add_scale_flags(p)
    p.set_defaults(_subparser=p, fn=cmd_eval)

    p = sub.add_parser("simulate", help="sample an event stream from the model")
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--user-rate", type=float, default=1.0)
    p.add_argument("--item-rate", type=float, default=1.0)
    p.add_argument("--rating-rate", type=float, default=1.0)
    p.add_argument("--horizon", type=float, default=365.0)
    _add_param_flags(p)
    _add_scale_flags(p)
    p.set_defaults(_subparser=p, fn=cmd_simulate)

    p = sub.add_parser("analyze", help="correlation decay or trajectory export")
    p.add_argument("what", choices=["corr-decay", "trajectories"])
    p.add_argument("--snapshot")
    p.add_argument("--events")
    p.add_argument("--params")
    p.add_argument("--side", choices=["user", "item"], default="user")
    p.add_argument("--max-days", type=float, default=3650.0)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--pairs", help="comma list of user:item pairs for likeness series")
    p.add_argument("--out", required=True)
    _add_param_flags(p)
    _add_scale_flags(p)
    p.set_defaults(_subparser=p, fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("SREC_LOG", "DEBUG" if args.verbose else "INFO")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _apply_config(args, parser)
    try:
        return args.fn(args)
    except Exception as exc:  # machine-readable error on stderr per contract
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        if os.environ.get("SREC_LOG") == "DEBUG" or args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
