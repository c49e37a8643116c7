"""Scene, trajectory and dataset types plus line-delimited JSON serialization."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

DEFAULT_DT = 0.5
DEFAULT_H = 4
DEFAULT_F = 6
EGO_LENGTH = 4.7
EGO_WIDTH = 1.9

MAP_KINDS = ("lane_centerline", "road_boundary", "stop_line")
LIGHT_STATES = ("green", "red", "none")
REGIMES = ("ID", "OOD", "unknown")
TRAJ_SOURCES = ("anchor", "refined", "ground_truth", "prediction")


class DatasetError(ValueError):
    """Raised for malformed dataset records or violated invariants."""

    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None):
        self.line = line
        self.field_name = field_name
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class EgoState:
    position: tuple[float, float]
    heading: float
    speed: float
    timestamp_index: int

    def __post_init__(self):
        if self.speed < 0:
            raise DatasetError(f"ego speed must be >= 0, got {self.speed}", field_name="speed")
        if not (-math.pi < self.heading <= math.pi):
            raise DatasetError(f"heading {self.heading} outside (-pi, pi]", field_name="heading")
        if self.timestamp_index < 0:
            raise DatasetError("timestamp_index must be >= 0", field_name="timestamp_index")
        if not _finite(*self.position, self.heading, self.speed):
            raise DatasetError("non-finite ego state", field_name="position")


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    position: tuple[float, float]
    heading: float
    speed: float
    length: float
    width: float
    filled: bool = False  # True when forward-filled over a missing observation

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise DatasetError("agent footprint must be positive", field_name="footprint")
        if self.speed < 0:
            raise DatasetError("agent speed must be >= 0", field_name="speed")
        if not _finite(*self.position, self.heading, self.speed):
            raise DatasetError("non-finite agent state", field_name="position")


@dataclass(frozen=True)
class MapElement:
    kind: str
    points: tuple[tuple[float, float], ...]
    speed_limit: Optional[float] = None
    light_state: str = "none"
    red_interval: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise DatasetError(f"unknown map element kind {self.kind!r}", field_name="kind")
        if len(self.points) < 2:
            raise DatasetError("map element needs >= 2 points", field_name="points")
        for a, b in zip(self.points[:-1], self.points[1:]):
            if a == b:
                raise DatasetError("consecutive map points must be distinct", field_name="points")
        if self.light_state not in LIGHT_STATES:
            raise DatasetError(f"unknown light state {self.light_state!r}", field_name="light_state")

    @cached_property
    def array(self) -> np.ndarray:
        arr = np.array(self.points, dtype=float)
        arr.setflags(write=False)
        return arr


@dataclass(frozen=True)
class RoutePlan:
    polyline: tuple[tuple[float, float], ...]
    cumulative_arclength: tuple[float, ...]
    degraded: bool = False

    def __post_init__(self):
        if not self.polyline:
            raise DatasetError("route polyline is empty", field_name="route")
        if len(self.cumulative_arclength) != len(self.polyline):
            raise DatasetError("route arclength length mismatch", field_name="route")
        s = self.cumulative_arclength
        if any(b <= a for a, b in zip(s[:-1], s[1:])):
            raise DatasetError("route arclength must be strictly increasing", field_name="route")

    @classmethod
    def from_points(cls, points, degraded: bool = False) -> "RoutePlan":
        pts = np.asarray(points, dtype=float)
        keep = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
                keep.append(i)
        pts = pts[keep]
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        return cls(
            tuple((float(x), float(y)) for x, y in pts),
            tuple(float(c) for c in cum),
            degraded,
        )

    @cached_property
    def array(self) -> np.ndarray:
        arr = np.array(self.polyline, dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def arclength(self) -> np.ndarray:
        arr = np.array(self.cumulative_arclength, dtype=float)
        arr.setflags(write=False)
        return arr

    @property
    def length(self) -> float:
        return self.cumulative_arclength[-1]


@dataclass(frozen=True)
class Trajectory:
    """F future ego states; index i holds time step t + i + 1."""

    states: tuple[EgoState, ...]
    source: str = "anchor"

    def __post_init__(self):
        if self.source not in TRAJ_SOURCES:
            raise DatasetError(f"unknown trajectory source {self.source!r}")

    @classmethod
    def from_positions(cls, positions, dt: float, start: EgoState, source: str = "refined") -> "Trajectory":
        """Builds a trajectory whose headings/speeds come from backward differences."""
        pts = np.asarray(positions, dtype=float)
        full = np.vstack([np.asarray(start.position, dtype=float)[None], pts])
        headings, speeds = derive_kinematics(full, dt, initial_heading=start.heading)
        # segment i (p_i -> p_{i+1}) describes the motion arriving at state i+1
        states = tuple(
            EgoState((float(p[0]), float(p[1])), float(h), float(v), start.timestamp_index + i + 1)
            for i, (p, h, v) in enumerate(zip(pts, headings[:-1], speeds[:-1]))
        )
        return cls(states, source)

    def __len__(self) -> int:
        return len(self.states)

    @cached_property
    def positions(self) -> np.ndarray:
        arr = np.array([s.position for s in self.states], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def headings(self) -> np.ndarray:
        return np.array([s.heading for s in self.states], dtype=float)

    @cached_property
    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.states], dtype=float)


@dataclass(frozen=True)
class Scene:
    ego_history: tuple[EgoState, ...]
    agent_histories: tuple[tuple[AgentState, ...], ...]
    map: tuple[MapElement, ...]
    route: Optional[RoutePlan]
    ego_future: Optional[tuple[EgoState, ...]]
    scene_id: str
    regime_tag: str = "unknown"
    # ground-truth agent futures (label side, like ego_future); used by safety metrics
    agent_futures: Optional[tuple[tuple[AgentState, ...], ...]] = None
    ego_size: tuple[float, float] = (EGO_LENGTH, EGO_WIDTH)
    dt: Optional[float] = None  # None inherits the dataset step

    def __post_init__(self):
        if self.regime_tag not in REGIMES:
            raise DatasetError(f"unknown regime tag {self.regime_tag!r}", field_name="regime_tag")
        n = len(self.ego_history)
        if n < 1:
            raise DatasetError("ego_history is empty", field_name="ego_history")
        for hist in self.agent_histories:
            if len(hist) != n:
                raise DatasetError(
                    f"agent history length {len(hist)} != ego history length {n}", field_name="agents"
                )
        steps = [s.timestamp_index for s in self.ego_history]
        if any(b != a + 1 for a, b in zip(steps[:-1], steps[1:])):
            raise DatasetError("ego_history timestamps are not consecutive", field_name="ego_history")
        if self.agent_futures is not None and self.ego_future is not None:
            for fut in self.agent_futures:
                if len(fut) != len(self.ego_future):
                    raise DatasetError("agent future length != ego future length", field_name="agent_futures")
        if self.agent_futures is not None and len(self.agent_futures) != len(self.agent_histories):
            raise DatasetError("agent_futures count != agent count", field_name="agent_futures")

    @property
    def current(self) -> EgoState:
        return self.ego_history[-1]

    @property
    def H(self) -> int:
        return len(self.ego_history) - 1

    @cached_property
    def ego_history_array(self) -> np.ndarray:
        """(H+1, 4) array of x, y, heading, speed."""
        return np.array([[*s.position, s.heading, s.speed] for s in self.ego_history], dtype=float)

    def future_trajectory(self) -> Optional[Trajectory]:
        if self.ego_future is None:
            return None
        return Trajectory(self.ego_future, "ground_truth")

    def lanes(self) -> list[MapElement]:
        return [m for m in self.map if m.kind == "lane_centerline"]

    def boundaries(self) -> list[MapElement]:
        return [m for m in self.map if m.kind == "road_boundary"]

    def stop_lines(self) -> list[MapElement]:
        return [m for m in self.map if m.kind == "stop_line"]


@dataclass(frozen=True)
class DatasetMeta:
    dt: float = DEFAULT_DT
    H: int = DEFAULT_H
    F: int = DEFAULT_F
    seed: Optional[int] = None
    regime: str = ""

    def __post_init__(self):
        if self.dt <= 0 or self.H < 0 or self.F < 1:
            raise DatasetError("invalid dataset metadata")


@dataclass(frozen=True)
class Dataset:
    scenes: tuple[Scene, ...]
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        for i, scene in enumerate(self.scenes):
            validate_scene(scene, self.meta, line=None, index=i)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def by_id(self, scene_id: str) -> Scene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)


def validate_scene(scene: Scene, meta: DatasetMeta, line: Optional[int] = None, index: Optional[int] = None):
    where = f" (scene {index})" if index is not None else ""
    if scene.dt is not None and abs(scene.dt - meta.dt) > 1e-12:
        raise DatasetError(f"scene dt {scene.dt} != dataset dt {meta.dt}{where}", line, "dt")
    if len(scene.ego_history) != meta.H + 1:
        raise DatasetError(
            f"ego_history has {len(scene.ego_history)} states, expected H+1={meta.H + 1}{where}",
            line,
            "ego_history",
        )
    if scene.ego_future is not None and len(scene.ego_future) != meta.F:
        raise DatasetError(
            f"ego_future has {len(scene.ego_future)} states, expected F={meta.F}{where}", line, "ego_future"
        )
    if scene.agent_futures is not None:
        for fut in scene.agent_futures:
            if len(fut) != meta.F:
                raise DatasetError(f"agent future length != F{where}", line, "agent_futures")


def derive_kinematics(positions, dt: float, initial_heading: Optional[float] = None):
    """Headings and speeds from a position sequence by forward differences.

    Args:
        positions: (N, 2) positions, N >= 2.
        dt: step duration in seconds.
        initial_heading: heading used when the first segments are stationary.

    Returns:
        (headings, speeds), each of length N; the last entry repeats the previous one.
    """
    pts = np.asarray(positions, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("derive_kinematics needs at least 2 positions")
    if dt <= 0:
        raise ValueError("dt must be positive")
    diff = np.diff(pts, axis=0)
    dist = np.hypot(diff[:, 0], diff[:, 1])
    speeds = dist / dt
    raw = np.arctan2(diff[:, 1], diff[:, 0])
    headings = np.empty(len(diff))
    prev = 0.0 if initial_heading is None else float(initial_heading)
    for i in range(len(diff)):
        if dist[i] < 1e-6:
            headings[i] = prev
        else:
            headings[i] = raw[i]
            prev = raw[i]
    headings = np.append(headings, headings[-1])
    speeds = np.append(speeds, speeds[-1])
    return wrap_angle(headings), speeds


# --- serialization -----------------------------------------------------------


def _num(x: float) -> float:
    return float(x)


def _ego_rec(s: EgoState) -> list:
    return [_num(s.position[0]), _num(s.position[1]), _num(s.heading), _num(s.speed), int(s.timestamp_index)]


def _agent_rec(s: AgentState) -> Optional[list]:
    if s.filled:
        return None
    return [_num(s.position[0]), _num(s.position[1]), _num(s.heading), _num(s.speed)]


def scene_to_record(scene: Scene) -> dict:
    agents = []
    for i, hist in enumerate(scene.agent_histories):
        rec = {
            "id": int(hist[0].agent_id),
            "length": _num(hist[0].length),
            "width": _num(hist[0].width),
            "history": [_agent_rec(s) for s in hist],
        }
        if scene.agent_futures is not None:
            rec["future"] = [_agent_rec(s) for s in scene.agent_futures[i]]
        agents.append(rec)
    map_recs = []
    for m in scene.map:
        rec = {"kind": m.kind, "points": [[_num(x), _num(y)] for x, y in m.points]}
        if m.speed_limit is not None:
            rec["speed_limit"] = _num(m.speed_limit)
        if m.kind == "stop_line":
            rec["light_state"] = m.light_state
            rec["red_interval"] = list(m.red_interval) if m.red_interval is not None else None
        map_recs.append(rec)
    route = None
    if scene.route is not None:
        route = {
            "polyline": [[_num(x), _num(y)] for x, y in scene.route.polyline],
            "cumulative_arclength": [_num(c) for c in scene.route.cumulative_arclength],
            "degraded": scene.route.degraded,
        }
    rec = {
        "scene_id": scene.scene_id,
        "regime_tag": scene.regime_tag,
        "ego_size": [_num(scene.ego_size[0]), _num(scene.ego_size[1])],
        "ego_history": [_ego_rec(s) for s in scene.ego_history],
        "agents": agents,
        "map": map_recs,
        "route": route,
        "ego_future": None if scene.ego_future is None else [_ego_rec(s) for s in scene.ego_future],
    }
    if scene.dt is not None:
        rec["dt"] = _num(scene.dt)
    return rec


def _parse_ego(rec, name: str, line: Optional[int]) -> EgoState:
    if not isinstance(rec, list) or len(rec) != 5:
        raise DatasetError(f"malformed ego state in {name}", line, name)
    x, y, h, v, t = rec
    try:
        return EgoState((float(x), float(y)), float(h), float(v), int(t))
    except DatasetError as exc:
        raise DatasetError(f"{name}: {exc}", line, name) from None


def _parse_agent_states(recs, agent_id, length, width, name, line) -> tuple[AgentState, ...]:
    if not isinstance(recs, list) or not recs:
        raise DatasetError(f"malformed {name}", line, name)
    states: list[Optional[AgentState]] = []
    for r in recs:
        if r is None:
            states.append(None)
            continue
        if not isinstance(r, list) or len(r) != 4:
            raise DatasetError(f"malformed agent state in {name}", line, name)
        states.append(AgentState(int(agent_id), (float(r[0]), float(r[1])), float(r[2]), float(r[3]), length, width))
    first = next((s for s in states if s is not None), None)
    if first is None:
        raise DatasetError(f"{name} has no observed states", line, name)
    out = []
    last = first
    for s in states:
        if s is None:
            out.append(AgentState(last.agent_id, last.position, last.heading, last.speed, length, width, filled=True))
        else:
            out.append(s)
            last = s
    return tuple(out)


def record_to_scene(rec: dict, line: Optional[int] = None) -> Scene:
    if not isinstance(rec, dict):
        raise DatasetError("scene record must be an object", line)
    required = ("ego_history", "agents", "map", "route", "ego_future", "scene_id", "regime_tag")
    for key in required:
        if key not in rec:
            raise DatasetError(f"missing key {key!r}", line, key)
    try:
        ego_hist = tuple(_parse_ego(r, "ego_history", line) for r in rec["ego_history"])
        ego_future = None
        if rec["ego_future"] is not None:
            ego_future = tuple(_parse_ego(r, "ego_future", line) for r in rec["ego_future"])
        histories, futures = [], []
        has_future = all("future" in a for a in rec["agents"]) and len(rec["agents"]) > 0
        for a in rec["agents"]:
            length, width = float(a["length"]), float(a["width"])
            histories.append(_parse_agent_states(a["history"], a["id"], length, width, "agents.history", line))
            if has_future:
                futures.append(_parse_agent_states(a["future"], a["id"], length, width, "agents.future", line))
        if not rec["agents"] and ego_future is not None:
            has_future = True
        elements = []
        for m in rec["map"]:
            ri = m.get("red_interval")
            elements.append(
                MapElement(
                    m["kind"],
                    tuple((float(x), float(y)) for x, y in m["points"]),
                    float(m["speed_limit"]) if m.get("speed_limit") is not None else None,
                    m.get("light_state", "none"),
                    (int(ri[0]), int(ri[1])) if ri is not None else None,
                )
            )
        route = None
        if rec["route"] is not None:
            r = rec["route"]
            route = RoutePlan(
                tuple((float(x), float(y)) for x, y in r["polyline"]),
                tuple(float(c) for c in r["cumulative_arclength"]),
                bool(r.get("degraded", False)),
            )
        size = rec.get("ego_size", [EGO_LENGTH, EGO_WIDTH])
        return Scene(
            ego_history=ego_hist,
            agent_histories=tuple(histories),
            map=tuple(elements),
            route=route,
            ego_future=ego_future,
            scene_id=str(rec["scene_id"]),
            regime_tag=rec["regime_tag"],
            agent_futures=tuple(futures) if has_future else None,
            ego_size=(float(size[0]), float(size[1])),
            dt=float(rec["dt"]) if rec.get("dt") is not None else None,
        )
    except DatasetError as exc:
        if exc.line is None:
            raise DatasetError(str(exc), line, exc.field_name) from None
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed scene record: {exc}", line) from None


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def meta_to_record(meta: DatasetMeta) -> dict:
    return {"dt": meta.dt, "H": meta.H, "F": meta.F, "seed": meta.seed, "regime": meta.regime}


def save_dataset(dataset: Dataset, path) -> None:
    """Writes a header line followed by one JSON object per scene."""
    dts = {scene.dt for scene in dataset.scenes if scene.dt is not None} | {dataset.meta.dt}
    if len(dts) != 1:
        raise DatasetError("mixed dt across scenes")
    for scene in dataset.scenes:
        validate_scene(scene, dataset.meta)
    lines = [_dumps(meta_to_record(dataset.meta))]
    lines.extend(_dumps(scene_to_record(s)) for s in dataset.scenes)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetError("missing metadata header", 1)
    try:
        header = json.loads(lines[0])
        meta = DatasetMeta(
            float(header["dt"]), int(header["H"]), int(header["F"]), header.get("seed"), header.get("regime", "")
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed header: {exc}", 1) from None
    scenes = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"parse error: {exc.msg}", lineno) from None
        scene = record_to_scene(rec, lineno)
        validate_scene(scene, meta, lineno)
        scenes.append(scene)
    return Dataset(tuple(scenes), meta)


def scene_checksum(scene: Scene) -> str:
    """Digest of every numeric and text field, by direct traversal of the objects."""
    h = hashlib.sha256()

    def put(*vals):
        for v in vals:
            if isinstance(v, str):
                h.update(v.encode())
            elif v is None:
                h.update(b"\x00none")
            else:
                h.update(struct.pack("<d", float(v)))

    put(scene.scene_id, scene.regime_tag, *scene.ego_size)
    for s in scene.ego_history:
        put(*s.position, s.heading, s.speed, s.timestamp_index)
    for hist in scene.agent_histories:
        for a in hist:
            put(a.agent_id, *a.position, a.heading, a.speed, a.length, a.width, int(a.filled))
    for fut in scene.agent_futures or ():
        for a in fut:
            put(*a.position, a.heading, a.speed)
    for m in scene.map:
        put(m.kind, m.speed_limit, m.light_state)
        for p in m.points:
            put(*p)
        if m.red_interval is not None:
            put(*m.red_interval)
    if scene.route is not None:
        for p in scene.route.polyline:
            put(*p)
    for s in scene.ego_future or ():
        put(*s.position, s.heading, s.speed, s.timestamp_index)
    return h.hexdigest()
