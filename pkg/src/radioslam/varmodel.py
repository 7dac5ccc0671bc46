"""Binned lookup table from fingerprint similarity to loop-closure distance variance.

Training pairs come from a single track over short stretches, where the
odometric distance between the two recording poses is trusted as the true
separation. Each bin stores the mean of squared distances of its samples,
i.e. the variance about zero separation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .core import Trace
from .fingerprint import FingerprintMatrix, SimilarityConfig, apply_rss_threshold


class TrainingSample(NamedTuple):
    similarity: float
    distance: float


def n_bins(r: float) -> int:
    # guard against 1/r landing a hair above an integer
    return max(1, math.ceil(1.0 / r - 1e-9))


def bin_index(s, r: float, nb: int):
    """Bin ``i`` covers ``[i*r, (i+1)*r)``; the last bin is closed at 1."""
    idx = np.floor(np.asarray(s, dtype=float) / r).astype(np.int64)
    return np.minimum(idx, nb - 1)


@dataclass
class VarianceModel:
    bin_width: float
    counts: list[int]
    variances: list[float | None]
    fallback_variance: float = 100.0
    _lookup: list[float] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.counts) != len(self.variances):
            raise ValueError("counts and variances differ in length")
        self._lookup = self._fill()

    def _fill(self) -> list[float]:
        filled = [i for i, c in enumerate(self.counts) if c > 0]
        if not filled:
            return [self.fallback_variance] * len(self.counts)
        out = []
        for i in range(len(self.counts)):
            # nearest non-empty bin; min() keeps the first (lower-similarity) one on a tie
            k = min(filled, key=lambda j: abs(j - i))
            out.append(float(self.variances[k]))
        return out

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def query(self, s: float) -> float:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"similarity must lie in [0, 1], got {s}")
        return self._lookup[int(bin_index(s, self.bin_width, self.n_bins))]

    def query_many(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any((s < 0) | (s > 1)):
            raise ValueError("similarities must lie in [0, 1]")
        return np.asarray(self._lookup)[bin_index(s, self.bin_width, self.n_bins)]

    def to_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "bins": [{"count": c, "variance": v} for c, v in zip(self.counts, self.variances)],
            "fallback_variance": self.fallback_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> VarianceModel:
        bins = d["bins"]
        return cls(
            bin_width=float(d["bin_width"]),
            counts=[int(b["count"]) for b in bins],
            variances=[None if b["variance"] is None else float(b["variance"]) for b in bins],
            fallback_variance=float(d.get("fallback_variance", 100.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> VarianceModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(samples: Sequence[TrainingSample], r: float, fallback_variance: float = 100.0) -> VarianceModel:
    if not 0.0 < r <= 1.0:
        raise ValueError(f"bin width must lie in (0, 1], got {r}")
    if len(samples) == 0:
        raise ValueError("cannot train a variance model without samples")
    s = np.array([x.similarity for x in samples], dtype=float)
    d = np.array([x.distance for x in samples], dtype=float)
    nb = n_bins(r)
    idx = bin_index(s, r, nb)
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, weights=d * d, minlength=nb)
    variances = [float(sums[i] / counts[i]) if counts[i] else None for i in range(nb)]
    return VarianceModel(r, [int(c) for c in counts], variances, fallback_variance)


def collect_training_pairs(trace: Trace, cfg: SimilarityConfig, max_travel: float = 100.0) -> list[TrainingSample]:
    """(similarity, odometric distance) for same-track scan pairs at most
    ``max_travel`` metres of walked path apart."""
    fps = [apply_rss_threshold(f, cfg.rss_threshold) for f in trace.fingerprints]
    if len(fps) < 2:
        return []
    times = trace.times
    poses = trace.poses
    xy = np.array([[p.x, p.y] for p in poses]).reshape(-1, 2)
    seg = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
    travelled = np.concatenate([[0.0], np.cumsum(seg)])
    along = np.interp([f.t for f in fps], times, travelled) if len(times) else np.zeros(len(fps))
    fxy = np.array([[f.pose.x, f.pose.y] for f in fps])

    fm = FingerprintMatrix(fps, cfg.rss_offset)
    out: list[TrainingSample] = []
    n = len(fps)
    for i in range(n - 1):
        # `along` is non-decreasing, so the reachable partners form a prefix of i+1..n-1
        stop = int(np.searchsorted(along, along[i] + max_travel, side="right"))
        j = np.arange(i + 1, max(stop, i + 1))
        if len(j) == 0:
            continue
        s = fm.pairs(np.full(len(j), i), j)
        d = np.hypot(fxy[j, 0] - fxy[i, 0], fxy[j, 1] - fxy[i, 1])
        out.extend(TrainingSample(float(a), float(b)) for a, b in zip(s, d))
    return out
