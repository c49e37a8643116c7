"""Rule-hierarchy planner: route search, constant-velocity prediction and the
Boltzmann prior over shared anchors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from evplan import geometry
from evplan.anchors import AnchorSet, nearest_lane
from evplan.rules import RuleHierarchy, evaluate_batch
from evplan.scene import EgoState, MapElement, RoutePlan, Scene, Trajectory

ALPHA_FLOOR = 1e-6
LANE_JOIN_TOLERANCE = 0.5  # m, end of one lane to start of the next
MAX_ROUTE_LANES = 64


@dataclass(frozen=True)
class BoltzmannConfig:
    zeta: float = 1.0

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")


@dataclass(frozen=True, eq=False)
class DirichletBelief:
    concentration: np.ndarray

    def __post_init__(self):
        c = np.array(self.concentration, dtype=float)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("concentration must be a non-empty vector")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise ValueError("concentration entries must be positive and finite")
        c.setflags(write=False)
        object.__setattr__(self, "concentration", c)

    @property
    def K(self) -> int:
        return len(self.concentration)

    @property
    def total(self) -> float:
        return float(self.concentration.sum())

    @property
    def mean(self) -> np.ndarray:
        return self.concentration / self.concentration.sum()


# --- route search ------------------------------------------------------------


def _polyline_distance(point: np.ndarray, pts: np.ndarray) -> float:
    d = np.diff(pts, axis=0)
    rel = point[None] - pts[:-1]
    t = np.clip(np.einsum("ij,ij->i", rel, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    return float(np.min(np.hypot(*(rel - t[:, None] * d).T)))


def lane_successors(lanes: Sequence[MapElement], tol: float = LANE_JOIN_TOLERANCE) -> list[list[int]]:
    """succ[i] lists lanes whose start lies within ``tol`` of lane i's end, in index order."""
    ends = np.array([lane.array[-1] for lane in lanes])
    starts = np.array([lane.array[0] for lane in lanes])
    succ = []
    for i in range(len(lanes)):
        gap = np.linalg.norm(starts - ends[i], axis=1)
        succ.append([j for j in np.flatnonzero(gap <= tol) if j != i])
    return succ


def _lane_length(lane: MapElement) -> float:
    return float(np.linalg.norm(np.diff(lane.array, axis=0), axis=1).sum())


def route_lane_sequence(scene: Scene, goal) -> Optional[list[int]]:
    """Lane indices from the ego lane to the goal lane, or None when disconnected.

    Backward depth-first search from the goal lane over predecessor links; among
    all simple paths the fewest lanes win, then the shortest arclength, then the
    lexicographically smallest index sequence.
    """
    lanes = scene.lanes()
    if not lanes:
        return None
    ego_lane = nearest_lane(lanes, scene.current)
    if ego_lane is None:
        return None
    start = next(i for i, lane in enumerate(lanes) if lane is ego_lane)
    goal = np.asarray(goal, dtype=float)
    goal_lane = int(np.argmin([_polyline_distance(goal, lane.array) for lane in lanes]))

    succ = lane_successors(lanes)
    pred: list[list[int]] = [[] for _ in lanes]
    for i, nxt in enumerate(succ):
        for j in nxt:
            pred[j].append(i)
    lengths = [_lane_length(lane) for lane in lanes]

    best = None
    stack = [(goal_lane, (goal_lane,))]
    while stack:
        node, path = stack.pop()
        if node == start:
            forward = path[::-1]
            key = (len(forward), sum(lengths[i] for i in forward), forward)
            if best is None or key < best:
                best = key
            continue
        if len(path) >= MAX_ROUTE_LANES or (best is not None and len(path) >= best[0]):
            continue
        for p in reversed(pred[node]):
            if p not in path:
                stack.append((p, path + (p,)))
    return None if best is None else list(best[2])


def plan_route(scene: Scene, goal) -> RoutePlan:
    """Concatenated centerlines from the ego lane to the lane nearest ``goal``.

    Agents are never consulted. A disconnected goal yields the ego lane extended
    straight ahead, flagged degraded.
    """
    lanes = scene.lanes()
    seq = route_lane_sequence(scene, goal)
    if seq is not None:
        return RoutePlan.from_points(np.vstack([lanes[i].array for i in seq]))
    ego_lane = nearest_lane(lanes, scene.current) if lanes else None
    cur = scene.current
    if ego_lane is None:
        p = np.asarray(cur.position, dtype=float)
        d = np.array([np.cos(cur.heading), np.sin(cur.heading)])
        return RoutePlan.from_points([p, p + 200.0 * d], degraded=True)
    pts = ego_lane.array
    tangent = pts[-1] - pts[-2]
    tangent /= np.linalg.norm(tangent)
    return RoutePlan.from_points(np.vstack([pts, pts[-1] + 200.0 * tangent]), degraded=True)


def route_goal(scene: Scene, F: int, dt: float) -> np.ndarray:
    """Ground-truth terminal position when labelled, else a straight-ahead projection."""
    if scene.ego_future:
        return np.asarray(scene.ego_future[-1].position, dtype=float)
    cur = scene.current
    reach = max(cur.speed * F * dt, 10.0)
    return np.asarray(cur.position) + reach * np.array([np.cos(cur.heading), np.sin(cur.heading)])


# --- prediction ----------------------------------------------------------------


def predict_agent_boxes_cv(scene: Scene, F: int, dt: float) -> np.ndarray:
    """(A, F, 5) constant-velocity boxes, heading and speed frozen at the last observation."""
    if not scene.agent_histories:
        return np.zeros((0, F, 5))
    last = [hist[-1] for hist in scene.agent_histories]
    pos = np.array([s.position for s in last], dtype=float)
    head = np.array([s.heading for s in last], dtype=float)
    speed = np.array([s.speed for s in last], dtype=float)
    steps = dt * np.arange(1, F + 1)
    vel = speed[:, None] * np.stack([np.cos(head), np.sin(head)], axis=1)
    xy = pos[:, None, :] + steps[None, :, None] * vel[:, None, :]
    boxes = np.empty((len(last), F, 5))
    boxes[..., :2] = xy
    boxes[..., 2] = head[:, None]
    boxes[..., 3] = np.array([s.length for s in last])[:, None]
    boxes[..., 4] = np.array([s.width for s in last])[:, None]
    return boxes


def predict_agents_cv(scene: Scene, F: int = 6, dt: float = 0.5) -> list[Trajectory]:
    boxes = predict_agent_boxes_cv(scene, F, dt)
    t0 = scene.current.timestamp_index
    return [
        Trajectory(
            tuple(
                EgoState((float(b[i, 0]), float(b[i, 1])), float(b[i, 2]), hist[-1].speed, t0 + i + 1)
                for i in range(F)
            ),
            "prediction",
        )
        for b, hist in zip(boxes, scene.agent_histories)
    ]


# --- prior -------------------------------------------------------------------------


def boltzmann_distribution(rewards, config: BoltzmannConfig = BoltzmannConfig()) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) == 0:
        raise ValueError("rewards must be a non-empty vector")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    return softmax(r / config.zeta)


@dataclass(frozen=True, eq=False)
class AnchorScores:
    robustness: np.ndarray  # (K, N_rules)
    masks: np.ndarray
    ranks: np.ndarray
    rewards: np.ndarray


def score_anchors(anchors: AnchorSet, scene: Scene, hierarchy: RuleHierarchy) -> AnchorScores:
    """Evaluates every anchor against constant-velocity agent predictions."""
    boxes = predict_agent_boxes_cv(scene, anchors.F, anchors.dt)
    rho, masks, ranks, rewards = evaluate_batch(
        anchors.positions, anchors.headings, anchors.speeds, scene, boxes, hierarchy
    )
    return AnchorScores(rho, masks, ranks, rewards)


def prior_from_rewards(rewards, config: BoltzmannConfig, n_prior: float) -> DirichletBelief:
    if n_prior < 0:
        raise ValueError("N_prior must be non-negative")
    return DirichletBelief(n_prior * boltzmann_distribution(rewards, config) + ALPHA_FLOOR)


def compute_prior(
    anchors: AnchorSet,
    scene: Scene,
    hierarchy: RuleHierarchy,
    config: BoltzmannConfig = BoltzmannConfig(),
    n_prior: float = 1.0,
) -> DirichletBelief:
    return prior_from_rewards(score_anchors(anchors, scene, hierarchy).rewards, config, n_prior)


def rh_plan(anchors: Optional[AnchorSet], prior: DirichletBelief) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(prior.concentration))
