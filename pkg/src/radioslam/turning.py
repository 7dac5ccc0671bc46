"""Turning detection on odometry tracks and ICP matching of the track
segments around loop candidates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import NodeId, Pose2, Transform2, normalize_angle, normalize_angles, poses_to_array
from .fingerprint import LoopCandidate


@dataclass
class TurningConfig:
    window: int = 40
    turn_threshold: float = math.pi / 3
    fitness_threshold: float = 0.5
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-4
    resample_spacing: float = 0.1
    proximity: int | None = None  # samples; None means window // 2

    def __post_init__(self) -> None:
        if self.window < 4 or self.window % 2:
            raise ValueError(f"window must be even and >= 4, got {self.window}")

    @property
    def half(self) -> int:
        return self.window // 2

    @property
    def reach(self) -> int:
        return self.half if self.proximity is None else self.proximity


@dataclass
class Segment:
    center: NodeId
    points: np.ndarray  # (n, 2), in the centre pose's frame
    resampled: np.ndarray
    _tree: cKDTree | None = field(default=None, init=False, repr=False, compare=False)
    _normals: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.resampled)
        return self._tree

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            self._normals = _normals(self.resampled)
        return self._normals


def heading_change(poses: Sequence[Pose2], half: int) -> np.ndarray:
    """|circular mean after - circular mean before| for every index with a full window; NaN elsewhere."""
    th = poses_to_array(poses)[:, 2]
    n = len(th)
    out = np.full(n, np.nan)
    if n < 2 * half + 1:
        return out
    cs = np.concatenate([[0.0], np.cumsum(np.cos(th))])
    sn = np.concatenate([[0.0], np.cumsum(np.sin(th))])
    t = np.arange(half, n - half)
    # indices t-half..t and t..t+half, both inclusive
    before = np.arctan2(sn[t + 1] - sn[t - half], cs[t + 1] - cs[t - half])
    after = np.arctan2(sn[t + half + 1] - sn[t], cs[t + half + 1] - cs[t])
    out[t] = np.abs(normalize_angles(after - before))
    return out


def detect_turnings(poses: Sequence[Pose2], cfg: TurningConfig, user: int = 0) -> list[NodeId]:
    delta = heading_change(poses, cfg.half)
    flagged = np.nan_to_num(delta, nan=0.0) > cfg.turn_threshold
    out = []
    t = 0
    n = len(flagged)
    while t < n:
        if not flagged[t]:
            t += 1
            continue
        end = t
        while end + 1 < n and flagged[end + 1]:
            end += 1
        best = t + int(np.argmax(delta[t : end + 1]))
        out.append(NodeId(user, best))
        t = end + 1
    return out


def _resample(points: np.ndarray, center: int, spacing: float) -> np.ndarray:
    seg = np.hypot(*np.diff(points, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total, sc = s[-1], s[center]
    pieces = []
    for length, sign in ((sc, -1.0), (total - sc, 1.0)):
        k = max(1, round(length / spacing)) if length > 0 else 0
        if k == 0:
            pieces.append(np.zeros(0))
            continue
        # per-side step that lands exactly on the end point
        pieces.append(sc + sign * np.arange(1, k + 1) * (length / k))
    stations = np.concatenate([pieces[0][::-1], [sc], pieces[1]])
    x = np.interp(stations, s, points[:, 0])
    y = np.interp(stations, s, points[:, 1])
    return np.column_stack([x, y])


def extract_segment(poses: Sequence[Pose2], center: int, cfg: TurningConfig, user: int = 0) -> Segment:
    h = cfg.half
    if center - h < 0 or center + h >= len(poses):
        raise IndexError(f"window of {cfg.window} around {center} exceeds track of {len(poses)} poses")
    arr = poses_to_array(poses[center - h : center + h + 1])
    c = arr[h]
    ct, st = math.cos(c[2]), math.sin(c[2])
    d = arr[:, :2] - c[:2]
    local = np.column_stack([ct * d[:, 0] + st * d[:, 1], -st * d[:, 0] + ct * d[:, 1]])
    local[h] = 0.0
    # drop repeated points (standing still) so arc length is strictly increasing
    keep = np.concatenate([[True], np.hypot(*np.diff(local, axis=0).T) > 1e-12])
    centre_idx = int(np.count_nonzero(keep[: h + 1])) - 1
    pts = local[keep]
    if len(pts) < 2:
        resampled = pts.copy()
    else:
        resampled = _resample(pts, centre_idx, cfg.resample_spacing)
    return Segment(NodeId(user, center), local, resampled)


def _apply(ang: float, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(ang), math.sin(ang)
    return np.column_stack([c * pts[:, 0] - s * pts[:, 1] + t[0], s * pts[:, 0] + c * pts[:, 1] + t[1]])


def _normals(pts: np.ndarray) -> np.ndarray:
    """Unit normals of a polyline from neighbouring points."""
    tangent = np.gradient(pts, axis=0)
    norm = np.hypot(tangent[:, 0], tangent[:, 1])
    norm[norm == 0] = 1.0
    return np.column_stack([-tangent[:, 1], tangent[:, 0]]) / norm[:, None]


def _line_step(moved: np.ndarray, dst: np.ndarray, normals: np.ndarray) -> tuple[float, np.ndarray]:
    """Linearised rigid increment minimising squared distances along the normals of ``dst``."""
    a = np.column_stack([normals[:, 1] * moved[:, 0] - normals[:, 0] * moved[:, 1], normals])
    r = np.sum(normals * (dst - moved), axis=1)
    x = np.linalg.lstsq(a, r, rcond=None)[0]
    return float(x[0]), x[1:]


def icp_match(
    a: Segment,
    b: Segment,
    cfg: TurningConfig,
    history: list | None = None,
    stop_below: float | None = None,
) -> tuple[Transform2, float]:
    """ICP aligning ``a`` onto ``b`` from the identity.

    Every point of ``a`` is paired with its nearest neighbour in ``b``; the
    alignment step minimises distances along ``b``'s local normals, which
    keeps straight legs from stalling the fit. Returns the transform taking
    ``a`` coordinates into ``b``'s frame and the final mean squared
    correspondence distance. A step that would raise that fitness ends the
    loop, so ``history`` (the fitness at each accepted iteration) never
    increases and ``stop_below`` can end it early.
    """
    src, dst = a.resampled, b.resampled
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("ICP needs at least three points per segment")
    if np.ptp(src, axis=0).max() == 0 or np.ptp(dst, axis=0).max() == 0:
        raise ValueError("degenerate segment: all points coincide")
    tree = b.tree
    normals = b.normals
    ang, t = 0.0, np.zeros(2)
    moved = src
    dist, nn = tree.query(moved)
    fitness = float(np.mean(dist**2))
    if history is not None:
        history.append(fitness)
    for _ in range(cfg.icp_max_iterations):
        if fitness == 0.0 or (stop_below is not None and fitness <= stop_below):
            break
        d_ang, d_t = _line_step(moved, dst[nn], normals[nn])
        c, s = math.cos(d_ang), math.sin(d_ang)
        new_ang = normalize_angle(ang + d_ang)
        new_t = np.array([c * t[0] - s * t[1], s * t[0] + c * t[1]]) + d_t
        new_moved = _apply(new_ang, new_t, src)
        new_dist, new_nn = tree.query(new_moved)
        new = float(np.mean(new_dist**2))
        if new > fitness:
            break
        if history is not None:
            history.append(new)
        done = fitness - new < cfg.icp_tolerance
        ang, t, moved, nn, fitness = new_ang, new_t, new_moved, new_nn, new
        if done:
            break
    return Transform2(float(t[0]), float(t[1]), ang), fitness


def classify_loops(
    candidates: Sequence[LoopCandidate],
    tracks: Mapping[int, Sequence[Pose2]],
    cfg: TurningConfig,
    turnings: Mapping[int, Sequence[NodeId]] | None = None,
    matches: dict | None = None,
) -> tuple[list[LoopCandidate], list[LoopCandidate]]:
    """Split candidates into (turning loops, fingerprint loops).

    ``matches`` memoises the ICP verdict per node pair; it is only valid for
    the same tracks and turning configuration.
    """
    matches = {} if matches is None else matches
    if turnings is None:
        turnings = {u: detect_turnings(p, cfg, u) for u, p in tracks.items()}
    near: dict[int, np.ndarray] = {}
    for u, poses in tracks.items():
        mask = np.zeros(len(poses), dtype=bool)
        for node in turnings.get(u, ()):
            mask[max(0, node.step - cfg.reach) : node.step + cfg.reach + 1] = True
        near[u] = mask

    cache: dict[NodeId, Segment | None] = {}

    def segment(node: NodeId) -> Segment | None:
        if node not in cache:
            try:
                seg = extract_segment(tracks[node.user], node.step, cfg, node.user)
                cache[node] = seg if len(seg.resampled) >= 3 and np.ptp(seg.resampled, axis=0).max() > 0 else None
            except IndexError:
                cache[node] = None
        return cache[node]

    turning, fingerprint = [], []
    for cand in candidates:
        if near[cand.a.user][cand.a.step] and near[cand.b.user][cand.b.step]:
            key = (cand.a, cand.b)
            if key not in matches:
                sa, sb = segment(cand.a), segment(cand.b)
                ok = False
                if sa is not None and sb is not None:
                    _, fit = icp_match(sa, sb, cfg, stop_below=cfg.fitness_threshold)
                    ok = fit <= cfg.fitness_threshold
                matches[key] = ok
            if matches[key]:
                turning.append(cand)
                continue
        fingerprint.append(cand)
    return turning, fingerprint
