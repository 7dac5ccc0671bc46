"""Acceptance checks. Each test prints one ``CRITERION n: PASS|FAIL`` line."""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import l_track, load_scenario, slow_curve_track
from radioslam.core import IDENTITY, Fingerprint, NodeId, Pose2, Transform2, normalize_angle
from radioslam.fingerprint import similarity
from radioslam.pdr import PdrConfig, count_steps
from radioslam.pipeline import evaluate, run_slam, sweep, train_model
from radioslam.posegraph import Edge, EdgeKind, PoseGraph, _edge_arrays, optimize, residuals_and_jacobians
from radioslam.turning import Segment, TurningConfig, detect_turnings, extract_segment, icp_match
from radioslam.varmodel import TrainingSample, train

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return report


@pytest.fixture(scope="module")
def default_run():
    return load_scenario(SCENARIOS / "default.toml")


def improvement(path, **over):
    t0 = time.perf_counter()
    traces, truth, cfg = load_scenario(path, **over)
    res = run_slam(traces, train_model(traces, cfg), cfg)
    raw = evaluate(res.initial.nodes, truth).rmse
    est = evaluate(res.optimized.nodes, truth).rmse
    return raw, est, 1.0 - est / raw, time.perf_counter() - t0


# --- 1. odometry correction


@pytest.mark.slow
def test_criterion_1_odometry_correction(verdict):
    runs = {
        "low": improvement(SCENARIOS / "default.toml"),
        "high": improvement(SCENARIOS / "default.toml", profile="high"),
        "high/steps": improvement(SCENARIOS / "step-counter.toml"),
    }
    need = {"low": 0.60, "high": 0.40, "high/steps": 0.40}
    ok = all(runs[k][2] >= need[k] and runs[k][3] < 60.0 for k in runs)
    detail = "; ".join(f"{k}: {r[0]:.2f} -> {r[1]:.2f} m ({100 * r[2]:.1f}%, {r[3]:.1f} s)" for k, r in runs.items())
    assert verdict(1, ok, detail)


# --- 2. similarity threshold


@pytest.mark.slow
def test_criterion_2_similarity_threshold(verdict, default_run):
    traces, truth, cfg = default_run
    rows = sweep(traces, truth, cfg, "sim_threshold", [0.1, 0.4, 0.7, 0.9, 0.95])
    rmse = {r.value: r.rmse for r in rows}
    counts = [r.constraints for r in rows]
    ok = rmse[0.7] <= rmse[0.95] and rmse[0.7] <= rmse[0.1] and all(b < a for a, b in zip(counts, counts[1:]))
    detail = ", ".join(f"{r.value:g}: {r.rmse:.2f} m/{r.constraints}" for r in rows)
    assert verdict(2, ok, detail)


# --- 3. RSS threshold


@pytest.mark.slow
def test_criterion_3_rss_threshold(verdict, default_run):
    traces, truth, cfg = default_run
    rows = sweep(traces, truth, cfg, "rss_threshold", [-90, -80, -70, -60, -50])
    ops = [r.operations for r in rows]
    rmse = {r.value: r.rmse for r in rows}
    ok = all(b < a for a, b in zip(ops, ops[1:])) and rmse[-70] <= rmse[-90] and rmse[-70] <= rmse[-50]
    detail = ", ".join(f"{r.value:g}: {r.rmse:.2f} m/{r.operations} ops" for r in rows)
    assert verdict(3, ok, detail)


# --- 4. turning features


@pytest.mark.slow
def test_criterion_4_turning_benefit(verdict, default_run):
    traces, truth, cfg = default_run
    cfg = cfg.replace(turn_window=40, fitness_threshold=0.5)
    model = train_model(traces, cfg)
    with_turns = evaluate(run_slam(traces, model, cfg).optimized.nodes, truth).rmse
    without = evaluate(run_slam(traces, model, cfg.replace(use_turnings=False)).optimized.nodes, truth).rmse
    gain = 1.0 - with_turns / without
    curve = slow_curve_track()
    narrow = len(detect_turnings(curve, TurningConfig(window=10)))
    wide = len(detect_turnings(curve, TurningConfig(window=80)))
    ok = gain >= 0.05 and narrow < wide
    detail = f"fingerprint-only {without:.3f} m, with turnings {with_turns:.3f} m ({100 * gain:.1f}%); turnings w=10: {narrow}, w=80: {wide}"
    assert verdict(4, ok, detail)


# --- 5. similarity oracle


def scalar_cosine(ra: dict, rb: dict, offset: float = 100.0) -> float:
    def v(r):
        return max(r + offset, 0.0)

    num = 0.0
    for mac in ra:
        if mac in rb:
            num += v(ra[mac]) * v(rb[mac])
    if num == 0.0:
        return 0.0
    na = math.sqrt(sum(v(r) ** 2 for r in ra.values()))
    nb = math.sqrt(sum(v(r) ** 2 for r in rb.values()))
    return min(1.0, num / (na * nb))


def test_criterion_5_similarity_oracle(verdict):
    macs = [f"{k:012x}" for k in range(60)]
    rng = np.random.default_rng(5)

    def scan():
        k = int(rng.integers(1, 30))
        return {macs[m]: int(rng.integers(-99, -20)) for m in rng.choice(len(macs), size=k, replace=False)}

    def fp(r):
        return Fingerprint(NodeId(0, 0), Pose2(0, 0, 0), r, 0.0)

    worst, self_ok = 0.0, True
    for _ in range(1000):
        a, b = scan(), scan()
        worst = max(worst, abs(similarity(fp(a), fp(b)) - scalar_cosine(a, b)))
        self_ok &= similarity(fp(a), fp(a)) == 1.0
    disjoint = similarity(fp({macs[0]: -40, macs[1]: -60}), fp({macs[2]: -40, macs[3]: -60}))
    ok = worst <= 1e-12 and self_ok and disjoint == 0.0
    assert verdict(5, ok, f"max deviation {worst:.1e}, self-similarity exact: {self_ok}, disjoint: {disjoint}")


# --- 6. variance model oracle


def test_criterion_6_variance_model(verdict):
    rng = np.random.default_rng(6)
    s = rng.uniform(0, 1, 10_000)
    d = np.abs(rng.normal(0, 10 * (1 - s) + 0.5))
    samples = [TrainingSample(float(a), float(b)) for a, b in zip(s, d)]
    r = 0.2
    m = train(samples, r)
    sums, counts = [0.0] * 5, [0] * 5
    for si, di in samples:
        k = min(int(si // r), 4)
        sums[k] += di * di
        counts[k] += 1
    worst = max(abs(m.variances[k] - sums[k] / counts[k]) for k in range(5))
    grid = np.linspace(0.0, 1.0, 1001)
    total = all(math.isfinite(m.query(float(q))) and m.query(float(q)) > 0 for q in grid)
    ok = worst <= 1e-9 and total and m.counts == counts
    assert verdict(6, ok, f"max bin deviation {worst:.1e}, query total on [0, 1]: {total}")


# --- 7. optimiser


def _wrapped(r):
    return np.array([r[0], r[1], normalize_angle(r[2])])


def _fd_worst(rng, h=1e-6):
    worst = 0.0
    for _ in range(100):
        g = PoseGraph({NodeId(0, 0): Pose2(0, 0, 0), NodeId(0, 1): Pose2(0, 0, 0)})
        z = Transform2(*rng.uniform(-3, 3, 2), float(rng.uniform(-math.pi, math.pi)))
        g.add_edge(Edge(NodeId(0, 0), NodeId(0, 1), EdgeKind.ODOMETRY, z, np.eye(3)))
        ea = _edge_arrays(g, {NodeId(0, 0): 0, NodeId(0, 1): 1})
        x = np.column_stack([rng.uniform(-20, 20, (2, 2)), rng.uniform(-math.pi, math.pi, 2)])
        _, ji, jj = residuals_and_jacobians(x, ea)
        analytic = np.hstack([ji[0], jj[0]])
        numeric = np.zeros((3, 6))
        for k in range(6):
            xp, xm = x.copy(), x.copy()
            xp.flat[k] += h
            xm.flat[k] -= h
            rp = residuals_and_jacobians(xp, ea, with_jacobians=False)[0][0]
            rm = residuals_and_jacobians(xm, ea, with_jacobians=False)[0][0]
            numeric[:, k] = _wrapped(rp - rm) / (2 * h)
        worst = max(worst, float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))).max()))
    return worst


def _square_graph(seed):
    """Two noisy laps of a 25 m square, closed by loops between the laps."""
    rng = np.random.default_rng(seed)
    side, per = 25.0, 50
    corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
    truth = []
    for _ in range(2):
        for c in range(4):
            (x0, y0), (x1, y1) = corners[c], corners[(c + 1) % 4]
            h = math.atan2(y1 - y0, x1 - x0)
            truth += [Pose2(x0 + k / per * (x1 - x0), y0 + k / per * (y1 - y0), h) for k in range(per)]
    zs = []
    for a, b in zip(truth, truth[1:]):
        c, s = math.cos(a.theta), math.sin(a.theta)
        dx, dy = b.x - a.x, b.y - a.y
        zs.append(Transform2(c * dx + s * dy + rng.normal(0, 0.05), -s * dx + c * dy + rng.normal(0, 0.05), normalize_angle(b.theta - a.theta + rng.normal(0, 0.02))))
    poses = [truth[0]]
    for z in zs:
        p = poses[-1]
        c, s = math.cos(p.theta), math.sin(p.theta)
        poses.append(Pose2(p.x + c * z.dx - s * z.dy, p.y + s * z.dx + c * z.dy, normalize_angle(p.theta + z.dtheta)))
    g = PoseGraph({NodeId(0, k): p for k, p in enumerate(poses)}, anchor=NodeId(0, 0))
    for k, z in enumerate(zs):
        g.add_edge(Edge(NodeId(0, k), NodeId(0, k + 1), EdgeKind.ODOMETRY, z, np.diag([400.0, 400.0, 2500.0])))
    n = len(truth)
    for k in range(0, n // 2, 5):
        g.add_edge(Edge(NodeId(0, k), NodeId(0, k + n // 2), EdgeKind.FINGERPRINT_LOOP, IDENTITY, np.diag([0.125, 0.125, 0.001])))
    return g


def test_criterion_7_optimizer(verdict):
    worst = _fd_worst(np.random.default_rng(7))
    monotone = True
    for seed in range(3):
        _, trace = optimize(_square_graph(seed))
        monotone &= all(b <= a for a, b in zip(trace, trace[1:])) and trace[-1] < trace[0]
    a, b = 4.0, 1.0
    g = PoseGraph({NodeId(0, k): Pose2(float(k), 0.0, 0.0) for k in range(3)}, anchor=NodeId(0, 0))
    odo = np.diag([a, a, 100.0])
    g.add_edge(Edge(NodeId(0, 0), NodeId(0, 1), EdgeKind.ODOMETRY, Transform2(1.0, 0.0, 0.0), odo))
    g.add_edge(Edge(NodeId(0, 1), NodeId(0, 2), EdgeKind.ODOMETRY, Transform2(1.0, 0.0, 0.0), odo))
    g.add_edge(Edge(NodeId(0, 0), NodeId(0, 2), EdgeKind.FINGERPRINT_LOOP, IDENTITY, np.diag([b, b, 0.001])))
    opt, _ = optimize(g, chi2_tolerance=1e-15)
    x2 = 2 * a / (a + 2 * b)
    closed = max(abs(opt.nodes[NodeId(0, 2)].x - x2), abs(opt.nodes[NodeId(0, 1)].x - x2 / 2))
    moved = _square_graph(0)
    moved.nodes[NodeId(0, 0)] = Pose2(0.3, -0.2, 0.1)
    anchor = optimize(moved)[0].nodes[NodeId(0, 0)]
    fixed = (anchor.x, anchor.y, anchor.theta) == (0.3, -0.2, 0.1)
    ok = worst <= 1e-6 and monotone and closed <= 1e-6 and fixed
    assert verdict(7, ok, f"Jacobian rel. error {worst:.1e}, chi2 monotone: {monotone}, closed-form error {closed:.1e}, anchor fixed: {fixed}")


# --- 8. ICP


def test_criterion_8_icp(verdict):
    b = extract_segment(l_track(), 40, TurningConfig(window=40))
    a = Segment(b.center, b.points + np.array([0.5, 0.3]), b.resampled + np.array([0.5, 0.3]))
    z, fit = icp_match(a, b, TurningConfig())
    err = math.hypot(z.dx + 0.5, z.dy + 0.3)
    n = 41
    p = Segment(NodeId(0, 0), np.zeros((2, 2)), np.column_stack([np.linspace(-2, 2, n), np.zeros(n)]))
    q = Segment(NodeId(1, 0), np.zeros((2, 2)), np.column_stack([np.zeros(n), np.linspace(-2, 2, n)]))
    _, perp = icp_match(p, q, TurningConfig())
    ok = err <= 0.05 and fit < 1e-3 and perp > 0.5
    assert verdict(8, ok, f"offset error {err:.1e} m, fitness {fit:.1e}; perpendicular fitness {perp:.3f}")


# --- 9. step counter


def test_criterion_9_step_counter(verdict):
    t = np.arange(1500) / 50.0
    gait = list(zip(t.tolist(), (9.81 + 2.0 * np.sin(2 * np.pi * 2.0 * t)).tolist()))
    out = count_steps(gait, PdrConfig())
    steps = out[-1][1] if out else 0
    flat = count_steps([(x, 9.81) for x in t.tolist()], PdrConfig())
    still = flat[-1][1] if flat else 0
    ok = abs(steps - 60) <= 2 and still == 0
    assert verdict(9, ok, f"2 Hz gait: {steps} steps, constant signal: {still}")


# --- 10. determinism


def _cli_outputs(out: Path, threads: str) -> dict[str, bytes]:
    env = dict(os.environ, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
    cfg = str(SCENARIOS / "quick.toml")
    trace, truth = str(out / "trace.jsonl"), str(out / "truth.jsonl")
    commands = [
        ["simulate", "--config", cfg],
        ["train", trace, "--config", cfg],
        ["slam", trace, "--config", cfg, "--model", str(out / "model.json"), "--plot", "--truth", truth],
        ["eval", str(out / "trajectory.jsonl"), truth, "--baseline", str(out / "odometry.jsonl")],
        ["sweep", trace, truth, "--config", cfg, "--parameter", "sim_threshold", "--values", "0.4,0.7", "--plot"],
        ["plot", "--truth", truth, "--estimate", str(out / "trajectory.jsonl")],
    ]
    for c in commands:
        subprocess.run([sys.executable, "-m", "radioslam.cli", *c, "--out", str(out)], check=True, env=env, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.mark.slow
def test_criterion_10_determinism(verdict, tmp_path):
    runs = [_cli_outputs(tmp_path / f"run{k}", threads) for k, threads in enumerate(["1", "1", "4"])]
    same = runs[0] == runs[1] == runs[2]
    assert verdict(10, same, f"{len(runs[0])} files identical across 3 runs (threads 1, 1, 4): {same}")
