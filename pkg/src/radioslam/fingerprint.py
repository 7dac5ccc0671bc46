"""RSS thresholding, cosine similarity and loop-closure candidate search."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .core import Fingerprint, NodeId, normalize_angles


@dataclass
class SimilarityConfig:
    rss_threshold: float = -70.0
    sim_threshold: float = 0.7
    gate_distance: float = 50.0
    gate_orientation: float = 0.3
    rss_offset: float = 100.0
    min_same_track_separation: float = 60.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sim_threshold <= 1.0:
            raise ValueError(f"sim_threshold must lie in [0, 1], got {self.sim_threshold}")
        if self.gate_distance <= 0:
            raise ValueError("gate_distance must be positive")


class LoopCandidate(NamedTuple):
    a: NodeId
    b: NodeId
    similarity: float


def apply_rss_threshold(f: Fingerprint, threshold: float) -> Fingerprint:
    """Drop readings weaker than ``threshold`` dBm."""
    kept = {mac: rss for mac, rss in f.readings.items() if rss >= threshold}
    if len(kept) == len(f.readings):
        return f
    return replace(f, readings=kept)


def _shifted(rss: float, offset: float) -> float:
    return max(rss + offset, 0.0)


def similarity(fa: Fingerprint, fb: Fingerprint, offset: float = 100.0) -> float:
    """Cosine similarity of two scans after shifting RSS by ``offset`` dB.

    The dot product runs over the APs seen by both scans, each norm over the
    full scan. Returns 0 for an empty intersection or a zero norm.
    """
    ra, rb = fa.readings, fb.readings
    if len(ra) > len(rb):
        ra, rb = rb, ra
    num = 0.0
    for mac in sorted(ra):
        if mac in rb:
            num += _shifted(ra[mac], offset) * _shifted(rb[mac], offset)
    if num == 0.0:
        return 0.0
    na = sum(_shifted(ra[m], offset) ** 2 for m in sorted(ra))
    nb = sum(_shifted(rb[m], offset) ** 2 for m in sorted(rb))
    return min(1.0, num / math.sqrt(na * nb))


def similarity_ops(fa: Fingerprint, fb: Fingerprint) -> int:
    """Work units for one similarity evaluation: a merge over both AP lists."""
    return len(fa.readings) + len(fb.readings)


class FingerprintMatrix:
    """Dense (scan x AP) matrix of shifted RSS values for batched similarity."""

    def __init__(self, fps: Sequence[Fingerprint], offset: float = 100.0):
        macs = sorted({m for f in fps for m in f.readings})
        col = {m: k for k, m in enumerate(macs)}
        v = np.zeros((len(fps), len(macs)))
        for i, f in enumerate(fps):
            for mac, rss in f.readings.items():
                v[i, col[mac]] = _shifted(rss, offset)
        self.values = v
        self.macs = macs
        self.sq_norms = np.einsum("ij,ij->i", v, v)
        self.sizes = np.array([len(f.readings) for f in fps], dtype=np.int64)

    def pairs(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Similarity for index pairs ``(i[k], j[k])``."""
        num = np.einsum("ij,ij->i", self.values[i], self.values[j])
        den = np.sqrt(self.sq_norms[i] * self.sq_norms[j])
        out = np.zeros(len(i))
        ok = (num > 0) & (den > 0)
        out[ok] = np.minimum(1.0, num[ok] / den[ok])
        return out


def find_loop_candidates(
    fps: Sequence[Fingerprint],
    cfg: SimilarityConfig,
    stats: dict | None = None,
) -> list[LoopCandidate]:
    """All fingerprint pairs that pass the pose gate and the similarity threshold.

    Poses must already live in one common frame. ``stats``, when given,
    receives ``gated_pairs`` and ``operations`` (sum of AP-list lengths over
    the similarity evaluations performed).
    """
    fps = [apply_rss_threshold(f, cfg.rss_threshold) for f in fps]
    n = len(fps)
    out: list[LoopCandidate] = []
    gated_total = 0
    ops_total = 0
    if n >= 2:
        fm = FingerprintMatrix(fps, cfg.rss_offset)
        xy = np.array([[f.pose.x, f.pose.y] for f in fps])
        th = np.array([f.pose.theta for f in fps])
        users = np.array([f.node.user for f in fps])
        ts = np.array([f.t for f in fps])
        nodes = [f.node for f in fps]
        block = 512
        for start in range(0, n - 1, block):
            rows = np.arange(start, min(start + block, n - 1))
            # pairs (r, c) with c > r for the rows of this block
            r_idx = np.repeat(rows, n - 1 - rows)
            c_idx = np.concatenate([np.arange(r + 1, n) for r in rows])
            d = np.hypot(xy[c_idx, 0] - xy[r_idx, 0], xy[c_idx, 1] - xy[r_idx, 1])
            dth = np.abs(normalize_angles(th[c_idx] - th[r_idx]))
            keep = (d < cfg.gate_distance) & (dth < cfg.gate_orientation)
            same = users[r_idx] == users[c_idx]
            keep &= ~(same & (np.abs(ts[c_idx] - ts[r_idx]) < cfg.min_same_track_separation))
            r_idx, c_idx = r_idx[keep], c_idx[keep]
            gated_total += len(r_idx)
            ops_total += int(fm.sizes[r_idx].sum() + fm.sizes[c_idx].sum())
            s = fm.pairs(r_idx, c_idx)
            hit = s >= cfg.sim_threshold
            for r, c, sv in zip(r_idx[hit], c_idx[hit], s[hit]):
                a, b = nodes[r], nodes[c]
                if a == b:
                    continue
                if b < a:
                    a, b = b, a
                out.append(LoopCandidate(a, b, float(sv)))
    out.sort()
    if stats is not None:
        stats["gated_pairs"] = stats.get("gated_pairs", 0) + gated_total
        stats["operations"] = stats.get("operations", 0) + ops_total
    return out
