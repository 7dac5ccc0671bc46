"""Synthetic tracks shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from radioslam.core import Pose2


def l_track(n_before: int = 40, n_after: int = 40, step: float = 1.0, left: bool = True, origin=(0.0, 0.0), heading: float = 0.0) -> list[Pose2]:
    """Straight leg, a sharp 90 degree corner, second straight leg."""
    turn = math.pi / 2 if left else -math.pi / 2
    out = []
    x, y = origin
    for k in range(n_before + 1):
        out.append(Pose2(x + k * step * math.cos(heading), y + k * step * math.sin(heading), heading))
    cx, cy = out[-1].x, out[-1].y
    h2 = heading + turn
    # the corner sample faces along the bisector
    out[-1] = Pose2(cx, cy, heading + turn / 2)
    for k in range(1, n_after + 1):
        out.append(Pose2(cx + k * step * math.cos(h2), cy + k * step * math.sin(h2), h2))
    return out


def slow_curve_track(n_curves: int = 4, radius: float = 15.0, straight: float = 30.0, speed: float = 1.4) -> list[Pose2]:
    """Straights joined by gentle quarter arcs, sampled every second."""
    pts: list[tuple[float, float, float]] = []
    x = y = th = 0.0
    sign = 1.0

    def emit(length, curvature):
        nonlocal x, y, th
        n = max(1, int(round(length / speed)))
        ds = length / n
        for _ in range(n):
            if curvature:
                th_new = th + ds * curvature
                x += (math.sin(th_new) - math.sin(th)) / curvature
                y -= (math.cos(th_new) - math.cos(th)) / curvature
                th = th_new
            else:
                x += ds * math.cos(th)
                y += ds * math.sin(th)
            pts.append((x, y, th))

    pts.append((x, y, th))
    for _ in range(n_curves):
        emit(straight, 0.0)
        emit(radius * math.pi / 2, sign / radius)
        sign = -sign
    emit(straight, 0.0)
    return [Pose2(a, b, c) for a, b, c in pts]


def perturb(track: list[Pose2], sigma: float, seed: int) -> list[Pose2]:
    rng = np.random.default_rng(seed)
    return [Pose2(p.x + sigma * rng.standard_normal(), p.y + sigma * rng.standard_normal(), p.theta) for p in track]


def load_scenario(path, seed: int | None = None, **scenario_overrides):
    """Simulate a shipped scenario file; returns (traces, truth, RunConfig)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib

    from radioslam import io as rio
    from radioslam import simulator as sim
    from radioslam.core import NodeId
    from radioslam.pipeline import config_from_mapping

    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    table = {**data.get("scenario", {}), **scenario_overrides}
    users = sim.simulate(sim.scenario_from_mapping(table, data.get("seed", 0) if seed is None else seed))
    cfg = config_from_mapping(data.get("slam", {}))
    traces = rio.records_to_traces(rio.simulation_records(users), cfg.pdr_config())
    truth = {NodeId(u.user, k): p for u in users for k, (_, p) in enumerate(u.truth)}
    return traces, truth, cfg
