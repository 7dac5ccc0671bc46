"""Line-oriented file formats: trace / truth / trajectory JSONL and radio maps.

Trace records look like::

    {"t": 12.0, "user": 0, "kind": "odom", "odom": {"x": 1.0, "y": 2.0, "theta": 0.1}}
    {"t": 12.0, "user": 0, "kind": "wifi", "wifi": [{"mac": "a1b2c3d4e5f6", "rss": -61}]}
    {"t": 12.02, "user": 0, "kind": "accel", "accel": {"a": 9.93}}
    {"t": 12.0, "user": 0, "kind": "compass", "compass": {"theta": 1.57}}
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .core import Fingerprint, NodeId, Pose2, Trace, canonical_mac, interpolate_pose
from .pdr import PdrConfig, count_steps, dead_reckon

KIND_ORDER = {"odom": 0, "compass": 1, "accel": 2, "wifi": 3}


def dumps(rec: Mapping) -> str:
    return json.dumps(rec, separators=(", ", ": "))


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def odom_record(t: float, user: int, p: Pose2) -> dict:
    return {"t": t, "user": user, "kind": "odom", "odom": {"x": p.x, "y": p.y, "theta": p.theta}}


def wifi_record(t: float, user: int, readings: Mapping[str, int]) -> dict:
    return {"t": t, "user": user, "kind": "wifi", "wifi": [{"mac": m, "rss": int(r)} for m, r in sorted(readings.items())]}


def accel_record(t: float, user: int, a: float) -> dict:
    return {"t": t, "user": user, "kind": "accel", "accel": {"a": a}}


def compass_record(t: float, user: int, theta: float) -> dict:
    return {"t": t, "user": user, "kind": "compass", "compass": {"theta": theta}}


def pose_record(node: NodeId, t: float | None, p: Pose2) -> dict:
    rec = {"user": node.user, "step": node.step}
    if t is not None:
        rec["t"] = t
    rec.update(x=p.x, y=p.y, theta=p.theta)
    return rec


def read_poses(path) -> dict[NodeId, Pose2]:
    """Trajectory or truth file keyed by ``(user, step)``."""
    out = {}
    for rec in read_jsonl(path):
        out[NodeId(int(rec["user"]), int(rec["step"]))] = Pose2(float(rec["x"]), float(rec["y"]), float(rec.get("theta", 0.0)))
    return out


def _payload(rec: Mapping, kind: str):
    if kind in rec:
        return rec[kind]
    if "data" in rec:
        return rec["data"]
    raise ValueError(f"record of kind {kind!r} has no payload: {rec}")


def records_to_traces(records: Iterable[Mapping], pdr: PdrConfig | None = None) -> list[Trace]:
    """Group trace records per user and bind every scan to an odometry node.

    Users without ``odom`` records but with ``accel`` and ``compass`` streams
    get their odometry from the step counter, one node per compass reading.
    """
    pdr = pdr or PdrConfig()
    raw: dict[int, dict[str, list]] = {}
    for rec in records:
        kind = rec.get("kind")
        if kind not in KIND_ORDER:
            continue
        user = int(rec["user"])
        t = float(rec["t"])
        body = _payload(rec, kind)
        slot = raw.setdefault(user, {k: [] for k in KIND_ORDER})
        if kind == "odom":
            slot["odom"].append((t, Pose2(float(body["x"]), float(body["y"]), float(body["theta"]))))
        elif kind == "accel":
            slot["accel"].append((t, float(body["a"])))
        elif kind == "compass":
            slot["compass"].append((t, float(body["theta"])))
        else:
            readings: dict[str, int] = {}
            for r in body:
                mac = canonical_mac(str(r["mac"]))
                if mac in readings:
                    raise ValueError(f"user {user} t={t}: duplicate AP {mac} in one scan")
                readings[mac] = int(r["rss"])
            slot["wifi"].append((t, readings))

    traces = []
    for user in sorted(raw):
        slot = {k: sorted(v, key=lambda r: r[0]) for k, v in raw[user].items()}
        odo = slot["odom"]
        if not odo and slot["compass"]:
            steps = count_steps(slot["accel"], pdr)
            odo = _pdr_track(steps, slot["compass"], pdr)
        trace = Trace(user, odometry=odo, accel=slot["accel"], compass=slot["compass"])
        if odo:
            times = trace.times
            poses = trace.poses
            for t, readings in slot["wifi"]:
                step = int(np.argmin(np.abs(times - t)))
                trace.fingerprints.append(Fingerprint(NodeId(user, step), interpolate_pose(times, poses, t), readings, t))
        trace.validate()
        traces.append(trace)
    return traces


def _pdr_track(steps, compass, pdr: PdrConfig) -> list[tuple[float, Pose2]]:
    """Dead-reckoned poses at the compass timestamps."""
    if not compass:
        return []
    ct = [t for t, _ in compass]
    if steps:
        st = np.array([t for t, _ in steps])
        sc = np.array([c for _, c in steps])
        counts = [int(sc[k]) if (k := int(np.searchsorted(st, t, side="right")) - 1) >= 0 else 0 for t in ct[1:]]
    else:
        counts = [0] * (len(ct) - 1)
    return dead_reckon(list(zip(ct[1:], counts)), compass, pdr)


def radio_map_records(nodes: Mapping[NodeId, Pose2], fingerprints: Iterable[Fingerprint]) -> list[dict]:
    out = []
    for f in sorted(fingerprints, key=lambda f: (f.node, f.t)):
        p = nodes[f.node]
        rec = pose_record(f.node, f.t, p)
        rec["wifi"] = [{"mac": m, "rss": int(r)} for m, r in sorted(f.readings.items())]
        out.append(rec)
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def finite_or_none(v: float) -> float | None:
    return v if math.isfinite(v) else None


def simulation_records(users) -> list[dict]:
    """Trace records for simulated users, time-ordered within each user.

    Users with inertial streams are written without odometry so that the
    reader rebuilds it through the step counter.
    """
    out = []
    for su in users:
        recs = []
        if su.accel:
            recs += [(t, KIND_ORDER["compass"], compass_record(t, su.user, h)) for t, h in su.compass]
            recs += [(t, KIND_ORDER["accel"], accel_record(t, su.user, a)) for t, a in su.accel]
        else:
            recs += [(t, KIND_ORDER["odom"], odom_record(t, su.user, p)) for t, p in su.odometry]
        recs += [(t, KIND_ORDER["wifi"], wifi_record(t, su.user, r)) for t, r in su.scans]
        recs.sort(key=lambda r: (r[0], r[1]))
        out.extend(r for _, _, r in recs)
    return out


def truth_records(users) -> list[dict]:
    return [pose_record(NodeId(su.user, k), t, p) for su in users for k, (t, p) in enumerate(su.truth)]
