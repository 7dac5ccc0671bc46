"""End-to-end orchestration: configuration, model training, the SLAM run and
trajectory evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Fingerprint, NodeId, Pose2, Trace
from .fingerprint import LoopCandidate, SimilarityConfig, apply_rss_threshold, find_loop_candidates
from .pdr import PdrConfig
from .posegraph import EdgeCovariancePolicy, EdgeKind, PoseGraph, add_loop_edges, merge_tracks, optimize
from .turning import TurningConfig, classify_loops, detect_turnings
from .varmodel import TrainingSample, VarianceModel, collect_training_pairs, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    # headline parameters
    sim_threshold: float = 0.7
    rss_threshold: float = -70.0
    bin_width: float = 0.2
    turn_window: int = 40
    fitness_threshold: float = 0.5
    # loop gating
    gate_distance: float = 50.0
    gate_orientation: float = 0.3
    min_same_track_separation: float = 60.0
    rss_offset: float = 100.0
    # variance model
    max_travel: float = 100.0
    fallback_variance: float = 100.0
    # edge covariances
    turning_xy_variance: float = 5.0
    orientation_variance: float = 1000.0
    odometry_sigma_xy: float = 0.05
    odometry_sigma_theta: float = 0.02
    # turning features
    use_turnings: bool = True
    turn_threshold: float = math.pi / 3
    resample_spacing: float = 0.1
    icp_max_iterations: int = 50
    # optimiser
    max_iterations: int = 100
    chi2_tolerance: float = 1e-9
    # step counter
    step_length: float = 0.7
    sample_rate: float = 50.0
    periodicity_threshold: float = 0.7
    seed: int = 0

    def similarity_config(self) -> SimilarityConfig:
        return SimilarityConfig(
            rss_threshold=self.rss_threshold,
            sim_threshold=self.sim_threshold,
            gate_distance=self.gate_distance,
            gate_orientation=self.gate_orientation,
            rss_offset=self.rss_offset,
            min_same_track_separation=self.min_same_track_separation,
        )

    def turning_config(self) -> TurningConfig:
        return TurningConfig(
            window=self.turn_window,
            turn_threshold=self.turn_threshold,
            fitness_threshold=self.fitness_threshold,
            icp_max_iterations=self.icp_max_iterations,
            resample_spacing=self.resample_spacing,
        )

    def pdr_config(self) -> PdrConfig:
        return PdrConfig(
            step_length=self.step_length,
            sample_rate=self.sample_rate,
            periodicity_threshold=self.periodicity_threshold,
        )

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_mapping(d: Mapping, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        default = getattr(base, k)
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ValueError(f"{k} must be a boolean")
            kw[k] = v
        elif isinstance(default, int):
            kw[k] = int(v)
        else:
            kw[k] = float(v)
    return base.replace(**kw)


def load_config(path) -> RunConfig:
    """Read a TOML file; pipeline keys may sit at top level or under ``[slam]``."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_mapping(data.get("slam", {k: v for k, v in data.items() if not isinstance(v, dict)}))


# ---------------------------------------------------------------------------


def train_model(traces: Sequence[Trace], cfg: RunConfig) -> VarianceModel:
    sc = cfg.similarity_config()
    samples: list[TrainingSample] = []
    for tr in traces:
        samples.extend(collect_training_pairs(tr, sc, cfg.max_travel))
    return train(samples, cfg.bin_width, cfg.fallback_variance)


@dataclass
class SlamResult:
    initial: PoseGraph
    optimized: PoseGraph
    chi2_trace: list[float]
    candidates: list[LoopCandidate]
    turning_loops: list[LoopCandidate]
    fingerprint_loops: list[LoopCandidate]
    turnings: dict[int, list[NodeId]]
    gated_pairs: int
    operations: int
    timings: dict[str, float] = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def constraints(self) -> int:
        return len(self.turning_loops) + len(self.fingerprint_loops)

    def summary(self) -> dict:
        g = self.optimized
        return {
            "nodes": len(g.nodes),
            "odometry_edges": g.count(EdgeKind.ODOMETRY),
            "merge_edges": g.count(EdgeKind.MERGE),
            "fingerprint_loops": len(self.fingerprint_loops),
            "turning_loops": len(self.turning_loops),
            "turnings": sum(len(v) for v in self.turnings.values()),
            "gated_pairs": self.gated_pairs,
            "operations": self.operations,
            "chi2_initial": self.chi2_trace[0],
            "chi2_final": self.chi2_trace[-1],
            "iterations": self.report.get("iterations", 0),
        }


def run_slam(
    traces: Sequence[Trace],
    model: VarianceModel,
    cfg: RunConfig,
    matches: dict | None = None,
) -> SlamResult:
    """Loop detection, graph construction and optimisation.

    ``matches`` is an ICP verdict cache shared between runs over the same
    traces and turning parameters.
    """
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    sc = cfg.similarity_config()
    tc = cfg.turning_config()
    tracks = {tr.user: tr.poses for tr in traces if tr.odometry}
    if not tracks:
        raise ValueError("no trace carries odometry")
    fps: list[Fingerprint] = [apply_rss_threshold(f, sc.rss_threshold) for tr in traces for f in tr.fingerprints]
    starts = {}
    for tr in traces:
        first = [f for f in tr.fingerprints if f.node.step == 0]
        if first:
            starts[tr.user] = apply_rss_threshold(first[0], sc.rss_threshold)
    lap("ingest")

    stats: dict = {}
    candidates = find_loop_candidates(fps, sc, stats)
    lap("candidates")

    if cfg.use_turnings:
        turnings = {u: detect_turnings(p, tc, u) for u, p in tracks.items()}
        turning_loops, fp_loops = classify_loops(candidates, tracks, tc, turnings, matches)
    else:
        turnings = {u: [] for u in tracks}
        turning_loops, fp_loops = [], list(candidates)
    lap("turnings")

    policy = EdgeCovariancePolicy(
        model,
        turning_xy_variance=cfg.turning_xy_variance,
        orientation_variance=cfg.orientation_variance,
        odometry_sigma_xy=cfg.odometry_sigma_xy,
        odometry_sigma_theta=cfg.odometry_sigma_theta,
    )
    g0 = merge_tracks(tracks, policy, starts, sc.rss_offset)
    g = add_loop_edges(g0, turning_loops, fp_loops, policy)
    lap("graph")

    report: dict = {}
    opt, trace = optimize(g, cfg.max_iterations, cfg.chi2_tolerance, report=report)
    lap("optimize")
    for k, v in timings.items():
        log.info("stage %-10s %.3f s", k, v)
    return SlamResult(
        initial=g,
        optimized=opt,
        chi2_trace=trace,
        candidates=candidates,
        turning_loops=turning_loops,
        fingerprint_loops=fp_loops,
        turnings=turnings,
        gated_pairs=int(stats.get("gated_pairs", 0)),
        operations=int(stats.get("operations", 0)),
        timings=timings,
        report=report,
    )


# ---------------------------------------------------------------------------


@dataclass
class ErrorStats:
    rmse: float
    mean: float
    std: float
    max: float
    median: float
    count: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(
    estimate: Mapping[NodeId, Pose2],
    truth: Mapping[NodeId, Pose2],
    anchor: NodeId | None = None,
) -> ErrorStats:
    """Position error per node after translating both trajectories so that
    the anchor node sits at the origin."""
    missing_est = sorted(set(truth) - set(estimate))
    missing_truth = sorted(set(estimate) - set(truth))
    if missing_est or missing_truth:
        parts = []
        if missing_est:
            parts.append(f"missing from estimate: {_short(missing_est)}")
        if missing_truth:
            parts.append(f"missing from truth: {_short(missing_truth)}")
        raise KeyError("trajectory keys differ; " + "; ".join(parts))
    if not truth:
        raise ValueError("nothing to evaluate")
    keys = sorted(truth)
    anchor = anchor if anchor is not None else keys[0]
    ea, ta = estimate[anchor], truth[anchor]
    e = np.array([[estimate[k].x - ea.x, estimate[k].y - ea.y] for k in keys])
    t = np.array([[truth[k].x - ta.x, truth[k].y - ta.y] for k in keys])
    err = np.hypot(*(e - t).T)
    return ErrorStats(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean=float(np.mean(err)),
        std=float(np.std(err)),
        max=float(np.max(err)),
        median=float(np.median(err)),
        count=len(err),
    )


def _short(keys: Sequence[NodeId], limit: int = 5) -> str:
    shown = ", ".join(f"({k.user},{k.step})" for k in keys[:limit])
    return shown + (f" and {len(keys) - limit} more" if len(keys) > limit else "")


# ---------------------------------------------------------------------------

SWEEPABLE = {
    "sim_threshold": float,
    "rss_threshold": float,
    "bin_width": float,
    "turn_window": int,
    "fitness_threshold": float,
}
# parameters that leave segments and ICP verdicts unchanged
_ICP_NEUTRAL = {"sim_threshold", "rss_threshold", "bin_width"}


@dataclass
class SweepRow:
    parameter: str
    value: float
    rmse: float
    mean: float
    constraints: int
    fingerprint_loops: int
    turning_loops: int
    turnings: int
    gated_pairs: int
    operations: int
    mean_aps: float
    seconds: float = 0.0


def mean_ap_count(traces: Sequence[Trace], rss_threshold: float) -> float:
    sizes = [len(apply_rss_threshold(f, rss_threshold)) for tr in traces for f in tr.fingerprints]
    return float(np.mean(sizes)) if sizes else 0.0


def sweep(
    traces: Sequence[Trace],
    truth: Mapping[NodeId, Pose2],
    cfg: RunConfig,
    parameter: str,
    values: Sequence[float],
) -> list[SweepRow]:
    """One full train + SLAM + evaluate run per value of ``parameter``."""
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {', '.join(SWEEPABLE)}")
    shared: dict = {}
    rows = []
    for v in values:
        run_cfg = cfg.replace(**{parameter: SWEEPABLE[parameter](v)})
        matches = shared if parameter in _ICP_NEUTRAL else {}
        t0 = time.perf_counter()
        model = train_model(traces, run_cfg)
        res = run_slam(traces, model, run_cfg, matches)
        err = evaluate(res.optimized.nodes, truth)
        rows.append(
            SweepRow(
                parameter=parameter,
                value=float(v),
                rmse=err.rmse,
                mean=err.mean,
                constraints=res.constraints,
                fingerprint_loops=len(res.fingerprint_loops),
                turning_loops=len(res.turning_loops),
                turnings=sum(len(t) for t in res.turnings.values()),
                gated_pairs=res.gated_pairs,
                operations=res.operations,
                mean_aps=mean_ap_count(traces, run_cfg.rss_threshold),
                seconds=time.perf_counter() - t0,
            )
        )
        log.info("%s=%g: rmse %.3f m, %d constraints", parameter, v, err.rmse, res.constraints)
    return rows
