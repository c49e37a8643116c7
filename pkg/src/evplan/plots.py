"""SVG overlay of a single planning result."""

from __future__ import annotations

import numpy as np

from evplan.anchors import anchor_boxes
from evplan.geometry import box_corners


def plot_plan(scene, output, path) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "evplan"
    fig, ax = plt.subplots(figsize=(8, 6))
    for el in scene.map:
        pts = el.array
        if el.kind == "road_boundary":
            ring = np.vstack([pts, pts[:1]])
            ax.fill(ring[:, 0], ring[:, 1], color="0.92", zorder=0)
        elif el.kind == "lane_centerline":
            ax.plot(pts[:, 0], pts[:, 1], ls=":", color="0.6", lw=0.8)
        else:
            ax.plot(pts[:, 0], pts[:, 1], color="red" if el.light_state == "red" else "green", lw=2)
    for pos in output.anchor_positions:
        ax.plot(pos[:, 0], pos[:, 1], color="0.7", lw=0.6)
    sel = output.selected
    ax.plot(sel.positions[:, 0], sel.positions[:, 1], "o-", color="tab:blue", lw=2, ms=3, label="selected")
    if scene.ego_future is not None:
        gt = np.array([s.position for s in scene.ego_future])
        ax.plot(gt[:, 0], gt[:, 1], "--", color="tab:green", lw=1.5, label="ground truth")
    for hist in scene.agent_histories:
        s = hist[-1]
        box = anchor_boxes(np.array([s.position]), np.array([s.heading]), s.length, s.width)
        c = box_corners(box)[0]
        ax.fill(c[:, 0], c[:, 1], color="tab:orange", alpha=0.7)
    cur = scene.current
    c = box_corners(anchor_boxes(np.array([cur.position]), np.array([cur.heading]), *scene.ego_size))[0]
    ax.fill(c[:, 0], c[:, 1], color="tab:blue", alpha=0.7)
    ax.set_aspect("equal")
    span = np.vstack([output.anchor_positions.reshape(-1, 2), np.array([cur.position])])
    lo, hi = span.min(axis=0) - 15.0, span.max(axis=0) + 15.0
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_title(f"{scene.scene_id}: {output.mode}, anchor {output.selected_index}")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
