"""Numeric encodings of scenes and anchors in the ego's current frame, padded
to fixed caps so that scenes can be stacked into batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evplan.anchors import AnchorSet
from evplan.scene import Scene

POS_SCALE = 20.0
SPEED_SCALE = 10.0
MAP_RANGE = 80.0

EGO_FEATURES = 6
AGENT_FEATURES = 8
ANCHOR_FEATURES = 5
MAP_FEATURES = 10


@dataclass(frozen=True)
class FeatureCaps:
    agents: int = 8
    map_elements: int = 24
    map_points: int = 16


class Frame:
    """Rigid transform into the ego's current pose."""

    def __init__(self, origin, heading: float):
        self.origin = np.asarray(origin, dtype=float)
        self.heading = float(heading)
        c, s = np.cos(heading), np.sin(heading)
        self.rot = np.array([[c, s], [-s, c]])  # world -> local

    def points(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.origin) @ self.rot.T

    def vectors(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rot.T

    def to_world_vectors(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rot

    def angles(self, h) -> np.ndarray:
        return np.asarray(h, dtype=float) - self.heading


def scene_frame(scene: Scene) -> Frame:
    cur = scene.current
    return Frame(cur.position, cur.heading)


@dataclass(frozen=True, eq=False)
class SceneFeatures:
    ego: np.ndarray  # (H+1, EGO_FEATURES)
    agents: np.ndarray  # (A, H+1, AGENT_FEATURES)
    agent_mask: np.ndarray  # (A,)
    map_points: np.ndarray  # (M, P, MAP_FEATURES)
    point_mask: np.ndarray  # (M, P)
    map_mask: np.ndarray  # (M,)
    anchors: np.ndarray  # (K, F, ANCHOR_FEATURES)
    anchor_local: np.ndarray  # (K, F, 2) anchor positions in metres, local frame
    target_local: np.ndarray  # (F, 2) ground truth in the local frame, NaN if unlabelled
    k_star: int  # -1 if unlabelled
    frame_heading: float


def _kin(pos, head, speed):
    return [pos[..., 0] / POS_SCALE, pos[..., 1] / POS_SCALE, np.cos(head), np.sin(head), speed / SPEED_SCALE]


def closest_anchor(anchor_positions: np.ndarray, target: np.ndarray) -> int:
    """argmin_k of the summed squared distance to the target; lowest index on ties."""
    err = ((anchor_positions - target[None]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(err))


def _resample(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) <= n:
        return points
    idx = np.round(np.linspace(0, len(points) - 1, n)).astype(int)
    return points[idx]


def scene_features(scene: Scene, anchors: AnchorSet, caps: FeatureCaps = FeatureCaps()) -> SceneFeatures:
    frame = scene_frame(scene)
    h1 = len(scene.ego_history)
    hist = scene.ego_history_array
    ego_pos = frame.points(hist[:, :2])
    ego = np.stack(_kin(ego_pos, frame.angles(hist[:, 2]), hist[:, 3]) + [np.ones(h1)], axis=-1)

    agents = np.zeros((caps.agents, h1, AGENT_FEATURES))
    agent_mask = np.zeros(caps.agents, dtype=bool)
    if scene.agent_histories:
        cur = np.asarray(scene.current.position)
        dist = [np.hypot(*(np.asarray(h[-1].position) - cur)) for h in scene.agent_histories]
        order = sorted(range(len(dist)), key=lambda i: (dist[i], scene.agent_histories[i][-1].agent_id))
        for slot, i in enumerate(order[: caps.agents]):
            states = scene.agent_histories[i]
            pos = frame.points([s.position for s in states])
            head = frame.angles([s.heading for s in states])
            speed = np.array([s.speed for s in states])
            size = np.array([[s.length / 5.0, s.width / 5.0, float(s.filled)] for s in states])
            agents[slot] = np.concatenate([np.stack(_kin(pos, head, speed), axis=-1), size], axis=-1)
            agent_mask[slot] = True

    m, p = caps.map_elements, caps.map_points
    map_points = np.zeros((m, p, MAP_FEATURES))
    point_mask = np.zeros((m, p), dtype=bool)
    map_mask = np.zeros(m, dtype=bool)
    elems = []
    for idx, el in enumerate(scene.map):
        local = frame.points(el.array)
        d = float(np.min(np.hypot(local[:, 0], local[:, 1])))
        if d <= MAP_RANGE:
            elems.append((d, idx, local, el))
    elems.sort(key=lambda t: (t[0], t[1]))
    kinds = ("lane_centerline", "road_boundary", "stop_line")
    for slot, (_, _, local, el) in enumerate(elems[:m]):
        pts = _resample(local, p)
        seg = np.diff(pts, axis=0)
        seg = np.vstack([seg, seg[-1:]])
        direction = seg / np.maximum(np.linalg.norm(seg, axis=1, keepdims=True), 1e-9)
        n = len(pts)
        feat = np.zeros((n, MAP_FEATURES))
        feat[:, 0:2] = pts / POS_SCALE
        feat[:, 2:4] = direction
        feat[:, 4 + kinds.index(el.kind)] = 1.0
        feat[:, 7] = (el.speed_limit or 0.0) / 20.0
        feat[:, 8] = float(el.light_state == "red")
        feat[:, 9] = 1.0
        map_points[slot, :n] = feat
        point_mask[slot, :n] = True
        map_mask[slot] = True

    a_pos = frame.points(anchors.positions)
    a_feat = np.stack(_kin(a_pos, frame.angles(anchors.headings), anchors.speeds), axis=-1)

    if scene.ego_future is not None:
        target = frame.points([s.position for s in scene.ego_future])
        k_star = closest_anchor(a_pos, target)
    else:
        target = np.full((anchors.F, 2), np.nan)
        k_star = -1
    return SceneFeatures(
        ego, agents, agent_mask, map_points, point_mask, map_mask, a_feat, a_pos, target, k_star, frame.heading
    )


@dataclass(frozen=True, eq=False)
class Batch:
    ego: np.ndarray  # (B, H+1, E)
    agents: np.ndarray  # (B, A, H+1, Fa)
    agent_mask: np.ndarray
    map_points: np.ndarray
    point_mask: np.ndarray
    map_mask: np.ndarray
    anchors: np.ndarray  # (B, K, F, 5)
    anchor_local: np.ndarray  # (B, K, F, 2)
    target_local: np.ndarray  # (B, F, 2)
    k_star: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.ego.shape[0]

    def astype(self, dtype) -> "Batch":
        fields = {}
        for name in self.__dataclass_fields__:
            arr = getattr(self, name)
            fields[name] = arr.astype(dtype) if arr.dtype == np.float64 else arr
        return Batch(**fields)

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def collate(features) -> Batch:
    features = list(features)
    return Batch(
        ego=np.stack([f.ego for f in features]),
        agents=np.stack([f.agents for f in features]),
        agent_mask=np.stack([f.agent_mask for f in features]),
        map_points=np.stack([f.map_points for f in features]),
        point_mask=np.stack([f.point_mask for f in features]),
        map_mask=np.stack([f.map_mask for f in features]),
        anchors=np.stack([f.anchors for f in features]),
        anchor_local=np.stack([f.anchor_local for f in features]),
        target_local=np.stack([f.target_local for f in features]),
        k_star=np.array([f.k_star for f in features], dtype=int),
    )
