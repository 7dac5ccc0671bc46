"""Step-counter pedestrian dead reckoning.

Steps are counted by locking onto the lag that maximises the normalised
auto-correlation of the acceleration magnitude, then walking forward one
period at a time while the signal stays periodic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import NodeId, Pose2, Transform2, between


class DegenerateWindow(ValueError):
    """A correlation window has zero variance (no periodicity to measure)."""


@dataclass
class PdrConfig:
    step_length: float = 0.7
    sample_rate: float = 50.0
    tau_window: tuple[int, int] = (40, 100)
    periodicity_threshold: float = 0.7
    research_radius: int = 10
    # the [40, 100] lag window at 50 Hz spans a stride, i.e. two steps
    steps_per_period: int = 2

    def __post_init__(self) -> None:
        lo, hi = self.tau_window
        if self.step_length <= 0:
            raise ValueError("step_length must be positive")
        if lo < 2 or hi <= lo:
            raise ValueError(f"invalid tau window {self.tau_window}")


@dataclass
class StepDetectorState:
    window: tuple[int, int]
    sample_rate: float
    tau_opt: int | None = None

    def search_range(self, radius: int) -> list[int]:
        lo, hi = self.window
        if self.tau_opt is None:
            return list(range(lo, hi + 1))
        # also look around half the locked lag so a lock on a harmonic can recover
        lags = set()
        for centre in (self.tau_opt // 2, self.tau_opt):
            lags.update(range(max(lo, centre - radius), min(hi, centre + radius) + 1))
        return sorted(lags)


def autocorrelation(accel: Sequence[float], t: int, tau: int) -> float:
    """Normalised auto-correlation of ``accel[t:t+tau]`` against ``accel[t+tau:t+2tau]``."""
    a = np.asarray(accel, dtype=float)
    if tau < 1 or t < 0 or t + 2 * tau > len(a):
        raise ValueError(f"window t={t}, tau={tau} does not fit {len(a)} samples")
    w0 = a[t : t + tau]
    w1 = a[t + tau : t + 2 * tau]
    s0, s1 = w0.std(), w1.std()
    # relative floor: float noise on a constant signal is not periodicity
    scale = max(np.abs(w0).max(), np.abs(w1).max(), 1.0)
    if s0 <= 1e-12 * scale or s1 <= 1e-12 * scale:
        raise DegenerateWindow(f"constant window at t={t}, tau={tau}")
    r = float(np.dot(w0 - w0.mean(), w1 - w1.mean()) / (tau * s0 * s1))
    return min(1.0, max(-1.0, r))


def _safe_r(a: np.ndarray, t: int, tau: int) -> float:
    try:
        return autocorrelation(a, t, tau)
    except DegenerateWindow:
        return -math.inf


def _best_lag(a: np.ndarray, t: int, lags: list[int]) -> tuple[int, float]:
    scores = [(_safe_r(a, t, tau), tau) for tau in lags if t + 2 * tau <= len(a)]
    if not scores:
        return -1, -math.inf
    best = max(s for s, _ in scores)
    # harmonics of the true period score (almost) as well; take the shortest
    for s, tau in scores:
        if s >= best - 0.02:
            return tau, s
    raise AssertionError("unreachable")


def count_steps(accel: Sequence[tuple[float, float]], config: PdrConfig) -> list[tuple[float, int]]:
    """Cumulative step count at every acceleration sample timestamp."""
    if not accel:
        return []
    ts = np.array([t for t, _ in accel], dtype=float)
    a = np.array([v for _, v in accel], dtype=float)
    n = len(a)
    lo, hi = config.tau_window
    if n < 2 * hi:
        return []

    state = StepDetectorState(window=config.tau_window, sample_rate=config.sample_rate)
    increments = np.zeros(n, dtype=np.int64)
    i = 0
    hop = max(1, lo // 4)
    while i < n:
        tau, r = _best_lag(a, i, state.search_range(config.research_radius))
        if tau > 0 and r >= config.periodicity_threshold:
            state.tau_opt = tau
            end = i + tau
            increments[min(end, n - 1)] += config.steps_per_period
            i = end
            continue
        if state.tau_opt is not None:
            # forward check failed or no longer fits: the period starting here
            # can still be confirmed against the one before it
            tau = state.tau_opt
            if i - tau >= 0 and i + tau <= n and _safe_r(a, i - tau, tau) >= config.periodicity_threshold:
                increments[min(i + tau, n - 1)] += config.steps_per_period
                i += tau
            state.tau_opt = None
            continue
        if tau < 0:
            break
        i += hop
    counts = np.cumsum(increments)
    return [(float(t), int(c)) for t, c in zip(ts, counts)]


def _heading_before(ct: np.ndarray, ch: np.ndarray, t: float) -> float:
    k = int(np.searchsorted(ct, t, side="right")) - 1
    if k < 0:
        raise ValueError(f"no compass reading at or before t={t}")
    return float(ch[k])


def dead_reckon(
    steps: Sequence[tuple[float, int]],
    compass: Sequence[tuple[float, float]],
    config: PdrConfig,
    relative_heading: bool = False,
) -> list[tuple[float, Pose2]]:
    """Integrate step counts along compass headings, starting at the origin.

    The origin is stamped with the first compass timestamp. With
    ``relative_heading`` all headings are measured from the first compass
    reading, so the track starts with heading 0.
    """
    if not compass:
        raise ValueError("dead reckoning needs at least one compass reading")
    ct = np.array([t for t, _ in compass], dtype=float)
    ch = np.array([h for _, h in compass], dtype=float)
    if relative_heading:
        ch = ch - ch[0]
    s = config.step_length

    t_prev, c_prev = float(ct[0]), 0
    th_prev = float(ch[0])
    x = y = 0.0
    out = [(t_prev, Pose2(0.0, 0.0, th_prev))]
    for t, c in steps:
        dc = c - c_prev
        if dc < 0:
            raise ValueError(f"step counter decreased at t={t} ({c_prev} -> {c})")
        x += s * dc * math.cos(th_prev)
        y += s * dc * math.sin(th_prev)
        th = _heading_before(ct, ch, t)
        out.append((float(t), Pose2(x, y, th)))
        c_prev, th_prev = c, th
    return out


def odometry_edges(poses: Sequence[Pose2], user: int = 0) -> list[tuple[tuple[NodeId, NodeId], Transform2]]:
    """One relative-motion measurement per consecutive pose pair."""
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    return [
        ((NodeId(user, t - 1), NodeId(user, t)), between(poses[t - 1], poses[t]))
        for t in range(1, len(poses))
    ]
