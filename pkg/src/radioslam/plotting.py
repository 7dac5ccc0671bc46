"""SVG figures: trajectories and parameter sweeps.

Output is byte-stable: fixed hash salt for element ids and no timestamp.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import NodeId, Pose2  # noqa: E402

plt.rcParams["svg.hashsalt"] = "radioslam"

STYLES = {
    "truth": dict(color="0.2", lw=1.2, ls="-"),
    "odometry": dict(color="tab:red", lw=0.8, ls=":"),
    "estimate": dict(color="tab:blue", lw=1.0, ls="-"),
}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _by_user(poses: Mapping[NodeId, Pose2]) -> dict[int, list[Pose2]]:
    out: dict[int, list[Pose2]] = {}
    for k in sorted(poses):
        out.setdefault(k.user, []).append(poses[k])
    return out


def plot_tracks(path, layers: Mapping[str, Mapping[NodeId, Pose2]], title: str = "") -> None:
    """One line per user and layer (e.g. truth, odometry, estimate)."""
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, poses in layers.items():
        style = STYLES.get(name, dict(lw=1.0))
        for i, (user, track) in enumerate(sorted(_by_user(poses).items())):
            ax.plot([p.x for p in track], [p.y for p in track], label=name if i == 0 else None, **style)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(path, parameter: str, values: Sequence[float], rmse: Sequence[float], constraints: Sequence[int]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, rmse, "o-", color="tab:blue")
    ax.set_xlabel(parameter)
    ax.set_ylabel("RMSE [m]", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(values, constraints, "s--", color="tab:orange")
    ax2.set_ylabel("loop constraints", color="tab:orange")
    fig.tight_layout()
    _save(fig, path)
