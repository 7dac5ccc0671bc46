"""Planar geometry and radio fingerprint types shared by every stage of the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap ``theta`` into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    r = np.mod(theta + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


def canonical_mac(mac: str) -> str:
    """Lowercase, separator-free 12 hex digit form of a MAC address."""
    s = "".join(ch for ch in mac.strip().lower() if ch not in ":-.")
    if len(s) != 12 or any(ch not in "0123456789abcdef" for ch in s):
        raise ValueError(f"not a 48-bit MAC address: {mac!r}")
    return s


@dataclass(frozen=True)
class Transform2:
    """Relative SE(2) motion: translation in the source frame, then rotation."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "dtheta", normalize_angle(self.dtheta))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    def inverse(self) -> Transform2:
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return Transform2(-(c * self.dx + s * self.dy), s * self.dx - c * self.dy, -self.dtheta)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return np.array([[c, -s, self.dx], [s, c, self.dy], [0.0, 0.0, 1.0]])


IDENTITY = Transform2(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading wrapped to (-pi, pi] on construction."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose position must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, v) -> Pose2:
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def oplus(self, t: Transform2) -> Pose2:
        """Apply a relative motion expressed in this pose's frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(self.x + c * t.dx - s * t.dy, self.y + s * t.dx + c * t.dy, self.theta + t.dtheta)

    def distance_to(self, other: Pose2) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


def compose(a: Transform2, b: Transform2) -> Transform2:
    """``a`` followed by ``b`` (b expressed in the frame reached by a)."""
    c, s = math.cos(a.dtheta), math.sin(a.dtheta)
    return Transform2(a.dx + c * b.dx - s * b.dy, a.dy + s * b.dx + c * b.dy, a.dtheta + b.dtheta)


def between(a: Pose2, b: Pose2) -> Transform2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    ddx, ddy = b.x - a.x, b.y - a.y
    return Transform2(c * ddx + s * ddy, -s * ddx + c * ddy, b.theta - a.theta)


class NodeId(NamedTuple):
    user: int
    step: int


@dataclass(frozen=True)
class Fingerprint:
    """One Wi-Fi scan bound to the odometric pose where it was taken.

    ``readings`` maps canonical MAC strings to RSS in dBm.
    """

    node: NodeId
    pose: Pose2
    readings: Mapping[str, int] = field(default_factory=dict)
    t: float = 0.0

    def __post_init__(self) -> None:
        for mac, rss in self.readings.items():
            if rss > 0:
                raise ValueError(f"RSS must be <= 0 dBm, got {rss} for {mac}")

    def __len__(self) -> int:
        return len(self.readings)


@dataclass
class Trace:
    """Everything recorded by one user, time ordered.

    ``odometry`` holds ``(t, Pose2)``; ``accel`` and ``compass`` hold
    ``(t, value)`` pairs and may be empty when odometry is supplied directly.
    """

    user: int
    odometry: list[tuple[float, Pose2]] = field(default_factory=list)
    accel: list[tuple[float, float]] = field(default_factory=list)
    compass: list[tuple[float, float]] = field(default_factory=list)
    fingerprints: list[Fingerprint] = field(default_factory=list)

    @property
    def poses(self) -> list[Pose2]:
        return [p for _, p in self.odometry]

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.odometry], dtype=float)

    def validate(self) -> None:
        for name in ("odometry", "accel", "compass"):
            ts = [t for t, _ in getattr(self, name)]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError(f"user {self.user}: {name} timestamps not strictly increasing")
        ts = [f.t for f in self.fingerprints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user}: fingerprint timestamps not strictly increasing")


def poses_to_array(poses) -> np.ndarray:
    return np.array([[p.x, p.y, p.theta] for p in poses], dtype=float).reshape(-1, 3)


def interpolate_pose(times: np.ndarray, poses: list[Pose2], t: float) -> Pose2:
    """Linear position / shortest-arc heading interpolation, clamped at the ends."""
    i = int(np.searchsorted(times, t, side="right")) - 1
    if i < 0:
        return poses[0]
    if i >= len(poses) - 1:
        return poses[-1]
    t0, t1 = times[i], times[i + 1]
    a, b = poses[i], poses[i + 1]
    u = (t - t0) / (t1 - t0)
    if u == 0.0:
        return a
    dth = normalize_angle(b.theta - a.theta)
    return Pose2(a.x + u * (b.x - a.x), a.y + u * (b.y - a.y), a.theta + u * dth)
