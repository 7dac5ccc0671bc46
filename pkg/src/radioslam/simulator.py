"""Deterministic multi-user indoor walking scenarios with ground truth.

Generates corridor walks, drifting odometry, log-distance RSS scans and,
optionally, raw accelerometer/compass streams for the step-counter path.
Everything is a pure function of the scenario description and its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .core import Pose2, normalize_angle

Point = tuple[float, float]


@dataclass
class Floorplan:
    corridors: list[tuple[Point, Point]]
    waypoints: dict[str, Point]
    size: tuple[float, float] = (130.0, 70.0)

    def __post_init__(self) -> None:
        for name, p in self.waypoints.items():
            if not any(_on_segment(p, c) for c in self.corridors):
                raise ValueError(f"waypoint {name} at {p} is not on any corridor")

    def common_corridor(self, a: Point, b: Point) -> bool:
        return any(_on_segment(a, c) and _on_segment(b, c) for c in self.corridors)

    def neighbours(self) -> dict[str, list[str]]:
        """Waypoints adjacent along a corridor (no other waypoint in between)."""
        adj: dict[str, set[str]] = {n: set() for n in self.waypoints}
        for c in self.corridors:
            (x0, y0), (x1, y1) = c
            on = [n for n, p in self.waypoints.items() if _on_segment(p, c)]
            on.sort(key=lambda n: (self.waypoints[n][0] - x0) * (x1 - x0) + (self.waypoints[n][1] - y0) * (y1 - y0))
            for a, b in zip(on, on[1:]):
                adj[a].add(b)
                adj[b].add(a)
        return {n: sorted(v) for n, v in adj.items()}


def _on_segment(p: Point, seg: tuple[Point, Point], tol: float = 1e-6) -> bool:
    (x0, y0), (x1, y1) = seg
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return math.hypot(p[0] - x0, p[1] - y0) <= tol
    u = ((p[0] - x0) * dx + (p[1] - y0) * dy) / L2
    if u < -tol or u > 1 + tol:
        return False
    u = min(1.0, max(0.0, u))
    return math.hypot(p[0] - (x0 + u * dx), p[1] - (y0 + u * dy)) <= tol


def grid_floorplan(xs: Sequence[float], ys: Sequence[float], size: tuple[float, float] = (130.0, 70.0)) -> Floorplan:
    """Full-length corridors along every x and y line, a waypoint at every crossing.

    Waypoints are named ``r{row}c{col}``.
    """
    corridors = [((xs[0], y), (xs[-1], y)) for y in ys] + [((x, ys[0]), (x, ys[-1])) for x in xs]
    waypoints = {f"r{i}c{j}": (float(x), float(y)) for i, y in enumerate(ys) for j, x in enumerate(xs)}
    return Floorplan(corridors, waypoints, size)


def add_ring(plan: Floorplan, centre: Point, radius: float, sides: int, prefix: str = "a", phase: float = 0.0) -> Floorplan:
    """Add a polygonal walkway approximating a circle (a gently curving route).

    Vertices that land on an existing corridor become junctions with it; a
    vertex coinciding with an existing waypoint reuses that waypoint.
    """
    if sides < 3 or radius <= 0:
        raise ValueError("a ring needs at least three sides and a positive radius")
    pts = [
        (centre[0] + radius * math.cos(phase + 2 * math.pi * k / sides), centre[1] + radius * math.sin(phase + 2 * math.pi * k / sides))
        for k in range(sides)
    ]
    waypoints = dict(plan.waypoints)
    for k, p in enumerate(pts):
        same = [n for n, q in plan.waypoints.items() if math.hypot(q[0] - p[0], q[1] - p[1]) <= 1e-6]
        if same:
            pts[k] = plan.waypoints[same[0]]
        else:
            waypoints[f"{prefix}{k}"] = p
    corridors = list(plan.corridors) + [(pts[k], pts[(k + 1) % sides]) for k in range(sides)]
    return Floorplan(corridors, waypoints, plan.size)


def random_route(plan: Floorplan, start: str, length: float, rng: np.random.Generator) -> list[str]:
    """Random corridor walk from ``start`` until at least ``length`` metres; no
    immediate U-turns unless at a dead end."""
    adj = plan.neighbours()
    route = [start]
    walked = 0.0
    prev = None
    while walked < length:
        here = route[-1]
        options = [n for n in adj[here] if n != prev] or list(adj[here])
        if not options:
            break
        nxt = options[int(rng.integers(len(options)))]
        a, b = plan.waypoints[here], plan.waypoints[nxt]
        walked += math.hypot(b[0] - a[0], b[1] - a[1])
        prev = here
        route.append(nxt)
    return route


def generate_walk(
    plan: Floorplan,
    route: Sequence[str],
    speed: float = 1.4,
    seed: int = 0,
    dt: float = 1.0,
    t0: float = 0.0,
) -> list[tuple[float, Pose2]]:
    """Constant-speed traversal of the route polyline, sampled every ``dt`` seconds.

    Headings follow the current leg and switch instantly at waypoints. The
    final sample always lands on the last waypoint. ``seed`` is accepted for
    interface symmetry; the walk itself is noise free.
    """
    del seed
    if len(route) < 1:
        raise ValueError("empty route")
    pts = []
    for name in route:
        if name not in plan.waypoints:
            raise ValueError(f"unknown waypoint {name!r}")
        pts.append(plan.waypoints[name])
    legs = []
    for (a, b), (na, nb) in zip(zip(pts, pts[1:]), zip(route, route[1:])):
        if not plan.common_corridor(a, b):
            raise ValueError(f"no corridor connects {na} and {nb}")
        L = math.hypot(b[0] - a[0], b[1] - a[1])
        if L > 0:
            legs.append((a, b, L, math.atan2(b[1] - a[1], b[0] - a[0])))
    if not legs:
        return [(t0, Pose2(pts[0][0], pts[0][1], 0.0))]
    cum = np.concatenate([[0.0], np.cumsum([leg[2] for leg in legs])])
    total_time = cum[-1] / speed
    k_end = total_time / dt
    nk = math.floor(k_end + 1e-9)
    stations = [k * dt * speed for k in range(nk + 1)]
    if k_end - nk > 1e-9:
        stations.append(cum[-1])
    times = [t0 + k * dt for k in range(nk + 1)] + ([t0 + total_time] if len(stations) > nk + 1 else [])

    out = []
    for t, s in zip(times, stations):
        s = min(s, cum[-1])
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(legs) - 1)
        a, b, L, h = legs[i]
        u = (s - cum[i]) / L
        if i == len(legs) - 1 and abs(s - cum[-1]) <= 1e-9 * max(1.0, cum[-1]):
            x, y = b
        else:
            x, y = a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])
        out.append((t, Pose2(x, y, h)))
    return out


@dataclass
class NoiseProfile:
    label: str = "low"
    heading_drift_rate: float = 0.0  # rad/s, sign drawn per track
    heading_sigma: float = 0.0  # rad per sample, random walk
    step_length_sigma: float = 0.0  # multiplicative, per sample
    step_scale_sigma: float = 0.0  # multiplicative, per track

    def __post_init__(self) -> None:
        if self.heading_sigma < 0 or self.step_length_sigma < 0 or self.step_scale_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


PROFILES = {
    "zero": NoiseProfile("zero"),
    "low": NoiseProfile("low", heading_drift_rate=6.0e-4, heading_sigma=0.002, step_length_sigma=0.02, step_scale_sigma=0.01),
    "high": NoiseProfile("high", heading_drift_rate=1.2e-3, heading_sigma=0.004, step_length_sigma=0.05, step_scale_sigma=0.02),
}


def corrupt_odometry(truth: Sequence[tuple[float, Pose2]], profile: NoiseProfile, seed: int) -> list[tuple[float, Pose2]]:
    """Drifting odometry integrated from the true per-sample motion.

    Starts at the origin with the true initial heading, so a zero-noise
    profile reproduces the truth shifted to the origin.
    """
    if not truth:
        return []
    rng = np.random.default_rng(seed)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    scale = 1.0 + profile.step_scale_sigma * rng.standard_normal()
    t_prev, p_prev = truth[0]
    x, y, err = 0.0, 0.0, 0.0
    out = [(t_prev, Pose2(0.0, 0.0, p_prev.theta))]
    for t, p in truth[1:]:
        dxw, dyw = p.x - p_prev.x, p.y - p_prev.y
        length = math.hypot(dxw, dyw)
        err += sign * profile.heading_drift_rate * (t - t_prev) + profile.heading_sigma * rng.standard_normal()
        step = length * scale * (1.0 + profile.step_length_sigma * rng.standard_normal())
        if length > 0:
            d = math.atan2(dyw, dxw) + err
            x += step * math.cos(d)
            y += step * math.sin(d)
        out.append((t, Pose2(x, y, p.theta + err)))
        t_prev, p_prev = t, p
    return out


@dataclass(frozen=True)
class AccessPoint:
    mac: str
    x: float
    y: float
    tx_power: float = -40.0


@dataclass
class RadioModel:
    aps: list[AccessPoint]
    path_loss_exponent: float = 3.5
    shadow_sigma: float = 4.0
    detection_floor: float = -90.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.detection_floor > -80:
            raise ValueError("detection floor must be <= -80 dBm")
        if not 1.5 <= self.path_loss_exponent <= 4.0:
            raise ValueError("path loss exponent must lie in [1.5, 4]")
        self._xy = np.array([[a.x, a.y] for a in self.aps], dtype=float).reshape(-1, 2)
        self._tx = np.array([a.tx_power for a in self.aps], dtype=float)


def random_radio_model(
    plan: Floorplan,
    n_aps: int = 250,
    seed: int = 0,
    bssids_per_ap: int = 4,
    tx_power: float = -35.0,
    **kw,
) -> RadioModel:
    """``n_aps`` physical access points placed uniformly over the plan, each
    broadcasting ``bssids_per_ap`` MAC addresses from the same position."""
    if bssids_per_ap < 1:
        raise ValueError("bssids_per_ap must be >= 1")
    rng = np.random.default_rng([seed, 0xA9])
    w, h = plan.size
    aps = []
    used = set()
    for _ in range(n_aps):
        x, y = float(rng.uniform(0, w)), float(rng.uniform(0, h))
        for _ in range(bssids_per_ap):
            while True:
                mac_int = int(rng.integers(0, 2**48))
                if mac_int not in used:
                    used.add(mac_int)
                    break
            aps.append(AccessPoint(f"{mac_int:012x}", x, y, tx_power))
    return RadioModel(aps, seed=seed, **kw)


def sample_rss(model: RadioModel, position: Point, seed: int, timestamp: float) -> dict[str, int]:
    """One scan at ``position``: log-distance path loss plus Gaussian shadowing.

    Shadowing is drawn from a generator keyed on ``(seed, timestamp)`` with one
    value per AP in model order, so a scan is reproducible from those inputs.
    """
    d = np.hypot(model._xy[:, 0] - position[0], model._xy[:, 1] - position[1])
    rss = model._tx - 10.0 * model.path_loss_exponent * np.log10(np.maximum(d, 1.0))
    if model.shadow_sigma > 0:
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int(round(timestamp * 1000))])
        rss = rss + model.shadow_sigma * rng.standard_normal(len(rss))
    rss = np.minimum(np.round(rss), 0.0)
    return {ap.mac: int(v) for ap, v in zip(model.aps, rss) if v >= model.detection_floor}


# ---------------------------------------------------------------------------
# raw inertial streams for the step-counter path


def synth_gait(
    truth: Sequence[tuple[float, Pose2]],
    step_length: float,
    rate: float,
    seed: int,
    amplitude: float = 2.0,
    noise: float = 0.2,
) -> list[tuple[float, float]]:
    """Acceleration magnitude at ``rate`` Hz: one oscillation per step plus a
    weaker stride component, following the walked distance."""
    if len(truth) < 2:
        return []
    rng = np.random.default_rng([seed, 0x57E9])
    tt = np.array([t for t, _ in truth])
    xy = np.array([[p.x, p.y] for _, p in truth])
    s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    n = int(math.floor((tt[-1] - tt[0]) * rate + 1e-9)) + 1
    t = tt[0] + np.arange(n) / rate
    steps = np.interp(t, tt, s) / step_length  # fractional step count
    phase = 2 * math.pi * steps
    a = 9.81 + amplitude * np.sin(phase) + 0.3 * amplitude * np.sin(phase / 2) + noise * rng.standard_normal(n)
    return list(zip(t.tolist(), a.tolist()))


def synth_compass(truth: Sequence[tuple[float, Pose2]], profile: NoiseProfile, seed: int) -> list[tuple[float, float]]:
    """Heading readings with a slowly drifting bias and white noise."""
    rng = np.random.default_rng([seed, 0xC0])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    out = []
    t0 = truth[0][0] if truth else 0.0
    bias = 0.0
    for t, p in truth:
        bias = sign * profile.heading_drift_rate * (t - t0)
        out.append((t, normalize_angle(p.theta + bias + profile.heading_sigma * rng.standard_normal())))
    return out


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    plan: Floorplan
    start: str
    durations: list[float] = field(default_factory=lambda: [687.0, 582.0, 439.0, 471.0])
    routes: list[list[str]] | None = None
    speed: float = 1.4
    dt: float = 1.0
    profile: NoiseProfile = field(default_factory=lambda: PROFILES["low"])
    n_aps: int = 250
    bssids_per_ap: int = 4
    tx_power: float = -35.0
    path_loss_exponent: float = 3.5
    shadow_sigma: float = 4.0
    detection_floor: float = -90.0
    scan_interval: float = 1.0  # seconds between Wi-Fi scans
    mode: str = "odom"  # or "steps"
    step_length: float = 0.7
    accel_rate: float = 50.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("scan_interval", "dt", "speed", "step_length", "accel_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("odom", "steps"):
            raise ValueError("mode must be 'odom' or 'steps'")

    def build_routes(self) -> list[list[str]]:
        if self.routes is not None:
            return [list(r) for r in self.routes]
        out = []
        for u, dur in enumerate(self.durations):
            rng = np.random.default_rng([self.seed, 0x207E, u])
            out.append(random_route(self.plan, self.start, dur * self.speed, rng))
        return out

    def radio(self) -> RadioModel:
        return random_radio_model(
            self.plan,
            self.n_aps,
            self.seed,
            self.bssids_per_ap,
            self.tx_power,
            path_loss_exponent=self.path_loss_exponent,
            shadow_sigma=self.shadow_sigma,
            detection_floor=self.detection_floor,
        )


def default_floorplan() -> Floorplan:
    return grid_floorplan([5.0, 35.0, 65.0, 95.0, 125.0], [5.0, 35.0, 65.0])


def ring_floorplan() -> Floorplan:
    """The default grid with two circular walkways inscribed in grid cells."""
    plan = default_floorplan()
    plan = add_ring(plan, (50.0, 20.0), 15.0, 16, prefix="a")
    return add_ring(plan, (80.0, 50.0), 15.0, 16, prefix="b")


@dataclass
class SimulatedUser:
    user: int
    truth: list[tuple[float, Pose2]]
    odometry: list[tuple[float, Pose2]]
    scans: list[tuple[float, dict[str, int]]]
    accel: list[tuple[float, float]] = field(default_factory=list)
    compass: list[tuple[float, float]] = field(default_factory=list)


def _on_scan_grid(t: float, interval: float) -> bool:
    k = round(t / interval)
    return abs(t - k * interval) < 1e-6


def simulate(sc: Scenario) -> list[SimulatedUser]:
    radio = sc.radio()
    users = []
    for u, route in enumerate(sc.build_routes()):
        truth = generate_walk(sc.plan, route, sc.speed, sc.seed, sc.dt)
        # a route that ends early would otherwise truncate the requested duration
        if sc.routes is None and truth and truth[-1][0] > sc.durations[u] + 1e-9:
            truth = [(t, p) for t, p in truth if t <= sc.durations[u] + 1e-9]
        if sc.routes is None and sc.durations[u] <= 0:
            truth = []
        user_seed = int(np.random.SeedSequence([sc.seed, u]).generate_state(1, np.uint64)[0])
        odo = corrupt_odometry(truth, sc.profile, user_seed)
        scans = [(t, sample_rss(radio, (p.x, p.y), user_seed, t)) for t, p in truth if _on_scan_grid(t, sc.scan_interval)]
        su = SimulatedUser(u, truth, odo, scans)
        if sc.mode == "steps" and truth:
            true_step = sc.step_length * (1.0 + sc.profile.step_scale_sigma * np.random.default_rng([user_seed, 5]).standard_normal())
            su.accel = synth_gait(truth, true_step, sc.accel_rate, user_seed)
            su.compass = synth_compass(truth, sc.profile, user_seed)
        users.append(su)
    return users


FLOORPLANS = {"grid": default_floorplan, "rings": ring_floorplan}


def scenario_from_mapping(d: Mapping, seed: int | None = None) -> Scenario:
    """Build a scenario from a ``[scenario]`` table.

    ``profile`` is a preset name or a table of ``NoiseProfile`` fields.
    """
    d = dict(d)
    plan_name = d.pop("floorplan", "grid")
    if plan_name not in FLOORPLANS:
        raise ValueError(f"unknown floorplan {plan_name!r}; choose from {', '.join(FLOORPLANS)}")
    prof = d.pop("profile", "low")
    if isinstance(prof, str):
        if prof not in PROFILES:
            raise ValueError(f"unknown noise profile {prof!r}; choose from {', '.join(PROFILES)}")
        profile = PROFILES[prof]
    else:
        profile = NoiseProfile(**prof)
    known = {f.name for f in fields(Scenario)} - {"plan", "profile"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
    d.setdefault("start", "r0c0")
    if "durations" in d:
        d["durations"] = [float(v) for v in d["durations"]]
    if seed is not None:
        d["seed"] = seed
    return Scenario(FLOORPLANS[plan_name](), profile=profile, **d)
