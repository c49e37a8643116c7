"""Open-loop imitation, prediction and safety metrics for per-scene planner outputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from evplan import geometry
from evplan.anchors import anchor_boxes
from evplan.features import closest_anchor
from evplan.fusion import PlannerOutput, predictive_mixture
from evplan.rules import drivable_rings, safety_rank_2rule
from evplan.scene import Dataset, Scene

TOP_KS = (1, 5, 20)
KL_FLOOR = 1e-12

REPORT_COLUMNS = (
    ("ade", "fde", "pade", "pfde", "accuracy")
    + tuple(f"made_{k}" for k in TOP_KS)
    + tuple(f"mfde_{k}" for k in TOP_KS)
    + ("kl_div", "nll", "pct_collision", "pct_offroad", "safety_score", "mean_total_evidence")
    + ("n_scenes", "n_collision", "n_offroad")
)


@dataclass(frozen=True)
class MetricsReport:
    ade: float
    fde: float
    pade: float
    pfde: float
    accuracy: float
    made: dict[int, float]
    mfde: dict[int, float]
    kl_div: float
    nll: float
    pct_collision: float
    pct_offroad: float
    safety_score: float
    mean_total_evidence: float
    n_scenes: int
    n_collision: int
    n_offroad: int
    per_scene: list[dict] = field(default_factory=list, repr=False, compare=False)

    def as_row(self) -> dict:
        row = {}
        for col in REPORT_COLUMNS:
            if col.startswith("made_"):
                row[col] = self.made[int(col[5:])]
            elif col.startswith("mfde_"):
                row[col] = self.mfde[int(col[5:])]
            else:
                row[col] = getattr(self, col)
        return row


def agent_future_boxes(scene: Scene) -> np.ndarray:
    """(A, F, 5) footprints of the ground-truth agent futures."""
    if not scene.agent_futures:
        return np.zeros((0, len(scene.ego_future), 5))
    return np.array(
        [[(*s.position, s.heading, s.length, s.width) for s in fut] for fut in scene.agent_futures], dtype=float
    )


def plan_collides(positions, headings, scene: Scene) -> bool:
    length, width = scene.ego_size
    boxes = anchor_boxes(np.asarray(positions)[None], np.asarray(headings)[None], length, width)
    return bool(geometry.boxes_overlap(boxes, agent_future_boxes(scene))[0])


def plan_offroad(positions, headings, scene: Scene) -> bool:
    flat, offsets = drivable_rings(scene)
    if len(offsets) <= 1:
        return False
    length, width = scene.ego_size
    corners = geometry.box_corners(anchor_boxes(np.asarray(positions), np.asarray(headings), length, width))
    return bool(np.any(geometry.region_signed_distance(corners.reshape(-1, 2), flat, offsets) < 0))


def scene_metrics(output: PlannerOutput, scene: Scene) -> dict:
    if scene.ego_future is None:
        raise ValueError(f"scene {scene.scene_id!r} has no ground-truth future")
    gt = np.array([s.position for s in scene.ego_future], dtype=float)
    means = output.means
    q = np.asarray(output.marginal, dtype=float)
    dist = np.linalg.norm(means - gt[None], axis=-1)  # (K, F)
    ade_k = dist.mean(axis=1)
    fde_k = dist[:, -1]
    sel = output.selected_index
    order = np.argsort(-q, kind="stable")
    k_star = closest_anchor(output.anchor_positions, gt)
    traj = output.refined_trajectories[sel]
    collided = plan_collides(traj.positions, traj.headings, scene)
    offroad = plan_offroad(traj.positions, traj.headings, scene)
    rank = safety_rank_2rule(not collided, not offroad)
    rec = {
        "ade": float(ade_k[sel]),
        "fde": float(fde_k[sel]),
        "pade": float(q @ ade_k),
        "pfde": float(q @ fde_k),
        "correct": sel == k_star,
        "kl_div": float(-np.log(max(q[k_star], KL_FLOOR))),
        "nll": predictive_mixture(output).nll(gt),
        "collision": collided,
        "offroad": offroad,
        "safety_rank": rank,
        "total_evidence": float(output.total_evidence),
    }
    for k in TOP_KS:
        top = order[: min(k, len(q))]
        rec[f"made_{k}"] = float(ade_k[top].min())
        rec[f"mfde_{k}"] = float(fde_k[top].min())
    return rec


def safety_score(ranks) -> float:
    ranks = np.asarray(ranks, dtype=float)
    return float(np.mean(100.0 * (ranks - 1.0) / 3.0))


def compute_metrics(outputs: Sequence[PlannerOutput], dataset) -> MetricsReport:
    """Aggregates per-scene metrics; outputs must align with the scenes by scene_id."""
    scenes = list(dataset.scenes if isinstance(dataset, Dataset) else dataset)
    if len(outputs) != len(scenes):
        raise ValueError(f"{len(outputs)} outputs for {len(scenes)} scenes")
    if len(scenes) == 0:
        raise ValueError("no scenes to evaluate")
    recs = []
    for out, scene in zip(outputs, scenes):
        if out.scene_id and out.scene_id != scene.scene_id:
            raise ValueError(f"output for {out.scene_id!r} paired with scene {scene.scene_id!r}")
        recs.append(scene_metrics(out, scene))

    def mean(key):
        return float(np.mean([r[key] for r in recs]))

    n_col = sum(r["collision"] for r in recs)
    n_off = sum(r["offroad"] for r in recs)
    return MetricsReport(
        ade=mean("ade"),
        fde=mean("fde"),
        pade=mean("pade"),
        pfde=mean("pfde"),
        accuracy=mean("correct"),
        made={k: mean(f"made_{k}") for k in TOP_KS},
        mfde={k: mean(f"mfde_{k}") for k in TOP_KS},
        kl_div=mean("kl_div"),
        nll=mean("nll"),
        pct_collision=100.0 * n_col / len(recs),
        pct_offroad=100.0 * n_off / len(recs),
        safety_score=safety_score([r["safety_rank"] for r in recs]),
        mean_total_evidence=mean("total_evidence"),
        n_scenes=len(recs),
        n_collision=int(n_col),
        n_offroad=int(n_off),
        per_scene=recs,
    )
