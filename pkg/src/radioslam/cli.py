"""Command-line pipeline: simulate, train, slam, eval, sweep, plot and run.

Every command writes its files into the ``--out`` directory. File contents
depend only on inputs, seed and configuration; wall-clock timings go to
stderr unless explicitly requested.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import io as rio
from .core import NodeId, Trace
from .fingerprint import apply_rss_threshold
from .pipeline import SWEEPABLE, RunConfig, config_from_mapping, evaluate, run_slam, sweep, train_model
from .posegraph import GraphError, dumps_g2o
from .simulator import scenario_from_mapping, simulate
from .varmodel import VarianceModel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("radioslam")

DEFAULT_GRIDS = {
    "sim_threshold": [0.1, 0.4, 0.7, 0.9, 0.95],
    "rss_threshold": [-90, -80, -75, -70, -65, -60, -50],
    "bin_width": [0.05, 0.1, 0.2, 0.5],
    "turn_window": [10, 20, 40, 80],
    "fitness_threshold": [0.1, 0.3, 0.5, 1.0],
}

FLAG_KEYS = ["sim_threshold", "rss_threshold", "bin_width", "turn_window", "fitness_threshold"]


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _config_tables(args) -> tuple[dict, dict, int | None]:
    """``[scenario]`` table, ``[slam]`` table and top-level seed of --config."""
    if not args.config:
        return {}, {}, None
    data = _read_toml(args.config)
    slam = data.get("slam", {k: v for k, v in data.items() if not isinstance(v, dict) and k != "seed"})
    return data.get("scenario", {}), slam, data.get("seed")


def run_config(args) -> RunConfig:
    _, slam, seed = _config_tables(args)
    cfg = config_from_mapping(slam)
    over = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "no_turnings", False):
        over["use_turnings"] = False
    cfg = config_from_mapping(over, cfg)
    return cfg.replace(seed=_seed(args, seed, cfg.seed))


def _seed(args, file_seed: int | None, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    if file_seed is not None:
        return int(file_seed)
    return default


# ---------------------------------------------------------------------------
# file helpers


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _load_traces(path, cfg: RunConfig) -> list[Trace]:
    return rio.records_to_traces(rio.read_jsonl(path), cfg.pdr_config())


def _node_times(traces: Sequence[Trace]) -> dict[NodeId, float]:
    return {NodeId(tr.user, k): t for tr in traces for k, (t, _) in enumerate(tr.odometry)}


def _write_poses(path, poses, times) -> None:
    rio.write_jsonl(path, (rio.pose_record(n, times.get(n), poses[n]) for n in sorted(poses)))


def _report_timings(timings: dict[str, float]) -> None:
    for k, v in timings.items():
        print(f"  {k:<12s} {v:8.3f} s", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    table, _, file_seed = _config_tables(args)
    seed = _seed(args, file_seed, int(table.get("seed", 0)))
    try:
        sc = scenario_from_mapping(table, seed)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad scenario: {exc}") from exc
    users = simulate(sc)
    out = _outdir(args)
    meta = {"kind": "meta", "seed": seed, "users": len(users), "profile": sc.profile.label, "mode": sc.mode}
    rio.write_jsonl(out / "trace.jsonl", [meta] + rio.simulation_records(users))
    rio.write_jsonl(out / "truth.jsonl", rio.truth_records(users))
    print(f"simulated {len(users)} users (seed {seed}) -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = run_config(args)
    traces = _load_traces(args.trace, cfg)
    model = train_model(traces, cfg)
    out = _outdir(args)
    rio.write_json(out / "model.json", {**model.to_dict(), "seed": cfg.seed})
    print(f"trained {model.n_bins} bins from {sum(model.counts)} pairs -> {out / 'model.json'}")
    return 0


def cmd_slam(args) -> int:
    cfg = run_config(args)
    traces = _load_traces(args.trace, cfg)
    t0 = time.perf_counter()
    model = VarianceModel.load(args.model) if args.model else train_model(traces, cfg)
    timings = {"training": time.perf_counter() - t0}
    out = _outdir(args)
    res = run_slam(traces, model, cfg)
    timings.update(res.timings)
    times = _node_times(traces)
    _write_poses(out / "odometry.jsonl", res.initial.nodes, times)
    _write_poses(out / "trajectory.jsonl", res.optimized.nodes, times)
    fps = [f for tr in traces for f in tr.fingerprints]
    thresholded = [apply_rss_threshold(f, cfg.rss_threshold) for f in fps]
    rio.write_jsonl(out / "radiomap.jsonl", rio.radio_map_records(res.optimized.nodes, thresholded))
    (out / "graph.g2o").write_text(dumps_g2o(res.optimized))
    summary = {**res.summary(), "chi2_trace": res.chi2_trace, "seed": cfg.seed, "config": cfg.to_dict()}
    if args.timing:
        summary["timings"] = timings
    rio.write_json(out / "summary.json", summary)
    if args.plot:
        from .plotting import plot_tracks

        layers = {"odometry": res.initial.nodes, "estimate": res.optimized.nodes}
        if args.truth:
            layers = {"truth": rio.read_poses(args.truth), **layers}
        plot_tracks(out / "tracks.svg", layers)
    print(f"slam: {len(res.optimized.nodes)} nodes, {res.constraints} loop constraints -> {out}")
    _report_timings(timings)
    return 0


def cmd_eval(args) -> int:
    est = rio.read_poses(args.estimate)
    truth = rio.read_poses(args.truth)
    stats = evaluate(est, truth)
    metrics = stats.to_dict()
    if args.baseline:
        base = evaluate(rio.read_poses(args.baseline), truth)
        metrics["baseline"] = base.to_dict()
        metrics["improvement"] = 1.0 - stats.rmse / base.rmse if base.rmse > 0 else 0.0
    out = _outdir(args)
    rio.write_json(out / "metrics.json", metrics)
    line = f"rmse {stats.rmse:.3f} m"
    if args.baseline:
        line += f" (odometry {metrics['baseline']['rmse']:.3f} m, improvement {100 * metrics['improvement']:.1f}%)"
    print(line)
    return 0


def _parse_values(parameter: str, text: str | None) -> list[float]:
    if text is None:
        return list(DEFAULT_GRIDS[parameter])
    try:
        return [SWEEPABLE[parameter](float(v)) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"bad --values: {exc}") from exc


def cmd_sweep(args) -> int:
    cfg = run_config(args)
    if args.parameter not in SWEEPABLE:
        raise CliError(f"cannot sweep {args.parameter!r}; choose from {', '.join(SWEEPABLE)}")
    values = _parse_values(args.parameter, args.values)
    traces = _load_traces(args.trace, cfg)
    truth = rio.read_poses(args.truth)
    out = _outdir(args)
    t0 = time.perf_counter()
    rows = sweep(traces, truth, cfg, args.parameter, values)
    cols = [f.name for f in dataclasses.fields(rows[0])] if rows else ["parameter", "value"]
    if not args.timing:
        cols = [c for c in cols if c != "seconds"]
    path = out / f"sweep_{args.parameter}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            d = dataclasses.asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])
    if args.plot and rows:
        from .plotting import plot_sweep

        plot_sweep(out / f"sweep_{args.parameter}.svg", args.parameter, values, [r.rmse for r in rows], [r.constraints for r in rows])
    for r in rows:
        print(f"{args.parameter}={r.value:g}: rmse {r.rmse:.3f} m, {r.constraints} constraints")
    print(f"sweep finished in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_tracks

    layers = {}
    if args.truth:
        layers["truth"] = rio.read_poses(args.truth)
    if args.odometry:
        layers["odometry"] = rio.read_poses(args.odometry)
    if args.estimate:
        layers["estimate"] = rio.read_poses(args.estimate)
    if not layers:
        raise CliError("nothing to plot; pass --truth, --odometry or --estimate")
    out = _outdir(args)
    plot_tracks(out / "tracks.svg", layers)
    print(f"wrote {out / 'tracks.svg'}")
    return 0


def cmd_run(args) -> int:
    """simulate + train + slam + eval in one process."""
    t0 = time.perf_counter()
    out = Path(args.out)
    cmd_simulate(args)
    args.trace = str(out / "trace.jsonl")
    args.truth = str(out / "truth.jsonl")
    args.model = None
    cmd_slam(args)
    args.estimate = str(out / "trajectory.jsonl")
    args.baseline = str(out / "odometry.jsonl")
    cmd_eval(args)
    print(f"run finished in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [scenario] and [slam] tables")
    common.add_argument("--seed", type=int, help="seed recorded in every output")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    params = argparse.ArgumentParser(add_help=False)
    params.add_argument("--sim-threshold", type=float, help="fingerprint similarity threshold (0.7)")
    params.add_argument("--rss-threshold", type=float, help="RSS cut-off in dBm (-70)")
    params.add_argument("--bin-width", type=float, help="variance-model bin width (0.2)")
    params.add_argument("--turn-window", type=int, help="turning window in poses (40)")
    params.add_argument("--fitness-threshold", type=float, help="ICP fitness threshold in m^2 (0.5)")
    params.add_argument("--no-turnings", action="store_true", help="fingerprint loops only")

    p = argparse.ArgumentParser(prog="radioslam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a seeded trace and ground truth")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common, params], help="fit the similarity-variance model")
    s.add_argument("trace")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("slam", parents=[common, params], help="detect loops and optimise the pose graph")
    s.add_argument("trace")
    s.add_argument("--model", help="variance model from 'train' (trained on the fly if omitted)")
    s.add_argument("--truth", help="ground truth, only used for the plot")
    s.add_argument("--plot", action="store_true", help="also write tracks.svg")
    s.add_argument("--timing", action="store_true", help="include stage timings in summary.json")
    s.set_defaults(func=cmd_slam)

    s = sub.add_parser("eval", parents=[common], help="position errors against ground truth")
    s.add_argument("estimate")
    s.add_argument("truth")
    s.add_argument("--baseline", help="second trajectory (e.g. odometry.jsonl) to compare against")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, params], help="RMSE and constraint count over a parameter grid")
    s.add_argument("trace")
    s.add_argument("truth")
    s.add_argument("--parameter", required=True, choices=sorted(SWEEPABLE))
    s.add_argument("--values", help="comma-separated grid (defaults per parameter)")
    s.add_argument("--plot", action="store_true", help="also write an SVG figure")
    s.add_argument("--timing", action="store_true", help="add a wall-time column")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("plot", parents=[common], help="draw trajectories to tracks.svg")
    s.add_argument("--truth")
    s.add_argument("--odometry")
    s.add_argument("--estimate")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("run", parents=[common, params], help="simulate, slam and eval in one go")
    s.add_argument("--plot", action="store_true", help="also write tracks.svg")
    s.add_argument("--timing", action="store_true", help="include stage timings in summary.json")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 1
    except (KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
