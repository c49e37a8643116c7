"""Quantitative STL robustness and the seven-rule driving hierarchy.

Robustness forms, margins and scales below are reconstructions: the rule
formulas are built programmatically here, not parsed from text.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from evplan import geometry
from evplan.anchors import anchor_boxes
from evplan.scene import Scene, Trajectory, wrap_angle

ROBUSTNESS_CAP = 1e6

RULE_NAMES = (
    "avoid_collision",
    "drivable_area",
    "traffic_lights",
    "speed_limit",
    "forward_progress",
    "near_route",
    "route_alignment",
)

# rules that need a route; in prediction mode they are vacuously satisfied
ROUTE_RULES = ("traffic_lights", "forward_progress", "near_route", "route_alignment")

# --- STL ---------------------------------------------------------------------

SignalFn = Callable[[Mapping[str, np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class StlExpr:
    kind: str
    children: tuple["StlExpr", ...] = ()
    signal: Union[str, SignalFn, None] = None
    interval: Optional[tuple[int, int]] = None

    def __post_init__(self):
        arity = {"predicate": 0, "not": 1, "always": 1, "eventually": 1}
        if self.kind in ("and", "or"):
            if len(self.children) < 1:
                raise ValueError(f"{self.kind} needs at least one child")
        elif self.kind in arity:
            if len(self.children) != arity[self.kind]:
                raise ValueError(f"{self.kind} takes {arity[self.kind]} child(ren)")
        else:
            raise ValueError(f"unknown STL node {self.kind!r}")
        if self.kind == "predicate" and self.signal is None:
            raise ValueError("predicate needs a signal")
        if self.kind in ("always", "eventually"):
            if self.interval is None:
                raise ValueError("temporal operator needs an interval")
            a, b = self.interval
            if not 0 <= a <= b:
                raise ValueError("interval must satisfy 0 <= a <= b")

    def __and__(self, other):
        return conj(self, other)

    def __or__(self, other):
        return disj(self, other)

    def __invert__(self):
        return neg(self)

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)


def predicate(signal: Union[str, SignalFn]) -> StlExpr:
    return StlExpr("predicate", signal=signal)


def neg(phi: StlExpr) -> StlExpr:
    return StlExpr("not", (phi,))


def conj(*phis: StlExpr) -> StlExpr:
    return StlExpr("and", tuple(phis))


def disj(*phis: StlExpr) -> StlExpr:
    return StlExpr("or", tuple(phis))


def always(phi: StlExpr, a: int, b: int) -> StlExpr:
    return StlExpr("always", (phi,), interval=(a, b))


def eventually(phi: StlExpr, a: int, b: int) -> StlExpr:
    return StlExpr("eventually", (phi,), interval=(a, b))


def _signal_values(expr: StlExpr, signals) -> np.ndarray:
    if callable(expr.signal):
        return np.asarray(expr.signal(signals), dtype=float)
    return np.asarray(signals[expr.signal], dtype=float)


def robustness_trace(expr: StlExpr, signals, length: int) -> np.ndarray:
    """Robustness at every start step (..., length); NaN where a window runs off the end."""
    if expr.kind == "predicate":
        return _signal_values(expr, signals)
    if expr.kind == "not":
        return -robustness_trace(expr.children[0], signals, length)
    if expr.kind in ("and", "or"):
        traces = np.stack([robustness_trace(c, signals, length) for c in expr.children], axis=0)
        return traces.min(axis=0) if expr.kind == "and" else traces.max(axis=0)
    a, b = expr.interval
    child = robustness_trace(expr.children[0], signals, length)
    out = np.full(child.shape, np.nan)
    reduce = np.min if expr.kind == "always" else np.max
    for t in range(length):
        if t + b < length:
            out[..., t] = reduce(child[..., t + a : t + b + 1], axis=-1)
    return out


def stl_robustness(expr: StlExpr, signals: Mapping[str, np.ndarray]):
    """Robustness of ``expr`` at step 0 of the signal bundle.

    Signals are arrays whose last axis is time; leading axes are batched.
    """
    lengths = {np.shape(v)[-1] for v in signals.values()}
    if len(lengths) != 1:
        raise ValueError("signals must share one length")
    length = lengths.pop()
    rho = robustness_trace(expr, signals, length)[..., 0]
    if np.any(np.isnan(rho)):
        raise ValueError("temporal window extends past the end of the signal")
    return float(rho) if np.ndim(rho) == 0 else rho


# --- hierarchy ---------------------------------------------------------------


@dataclass(frozen=True)
class RuleParams:
    collision_margin: float = 0.3
    d_max: float = 3.5
    theta_max: float = math.pi / 4
    progress_min: float = 0.5
    scales: tuple[float, ...] = (1.0, 1.0, 5.0, 2.0, 1.0, 1.0, 0.5)
    cap: float = ROBUSTNESS_CAP
    boundary_inflation: float = 0.0
    stop_line_tolerance: float = 3.0
    reward_epsilon: float = 0.5

    def __post_init__(self):
        if len(self.scales) != len(RULE_NAMES) or min(self.scales) <= 0:
            raise ValueError("need seven positive robustness scales")
        if not 0 < self.reward_epsilon < 1:
            raise ValueError("reward_epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class Rule:
    name: str
    formula: StlExpr
    scale: float


@dataclass(frozen=True)
class RuleHierarchy:
    rules: tuple[Rule, ...]
    params: RuleParams = field(default_factory=RuleParams)

    def __post_init__(self):
        names = [r.name for r in self.rules]
        if len(set(names)) != len(names):
            raise ValueError("rule names must be unique")
        if any(r.scale <= 0 for r in self.rules):
            raise ValueError("rule scales must be positive")

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    def scaled(self, factor: float) -> "RuleHierarchy":
        return RuleHierarchy(tuple(replace(r, scale=r.scale * factor) for r in self.rules), self.params)


def default_hierarchy(F: int = 6, params: Optional[RuleParams] = None) -> RuleHierarchy:
    """The seven driving rules, most important first."""
    params = params or RuleParams()
    last = F - 1
    formulas = {
        "avoid_collision": always(predicate(lambda s: s["clearance"] - params.collision_margin), 0, last),
        "drivable_area": always(predicate(lambda s: s["drivable"] + params.boundary_inflation), 0, last),
        "traffic_lights": always(predicate("red_light_gap"), 0, last),
        "speed_limit": always(predicate(lambda s: s["speed_limit"] - s["speed"]), 0, last),
        "forward_progress": always(predicate(lambda s: s["progress"] - params.progress_min), last, last),
        "near_route": always(predicate(lambda s: params.d_max - np.abs(s["lateral"])), 0, last),
        "route_alignment": always(predicate(lambda s: params.theta_max - np.abs(s["heading_error"])), 0, last),
    }
    rules = tuple(Rule(name, formulas[name], scale) for name, scale in zip(RULE_NAMES, params.scales))
    return RuleHierarchy(rules, params)


@dataclass(frozen=True, eq=False)
class HierarchyResult:
    robustness: np.ndarray  # (N_rules,)
    satisfied_mask: np.ndarray  # (N_rules,) bool
    rank: int
    reward: float


def hierarchy_rank(mask: Sequence[bool]) -> int:
    """1 + the integer whose bits are the negated mask, most important rule first."""
    value = 0
    for bit in mask:
        value = (value << 1) | (0 if bit else 1)
    return value + 1


def hierarchy_reward(result_mask, robustness, epsilon: float = 0.5):
    """Sum of 2^(N-i) over satisfied rules plus a bounded logistic tie-break.

    The tie-break lies in (0, epsilon) with epsilon < 1, so a mask that is
    lexicographically better always scores higher. Batched over leading axes.
    """
    mask = np.asarray(result_mask, dtype=bool)
    rho = np.asarray(robustness, dtype=float)
    if mask.shape != rho.shape:
        raise ValueError("mask and robustness lengths differ")
    n = mask.shape[-1]
    weights = 2.0 ** np.arange(n - 1, -1, -1)
    reward = (mask * weights).sum(axis=-1) + (epsilon / n) * expit(rho).sum(axis=-1)
    return float(reward) if np.ndim(reward) == 0 else reward


def ranks_from_masks(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    n = masks.shape[-1]
    weights = 2 ** np.arange(n - 1, -1, -1)
    return ((~masks) * weights).sum(axis=-1) + 1


def safety_rank_2rule(collision_free: bool, on_road: bool) -> int:
    """Rank under the two-rule hierarchy (collision, then off-road); 1 best, 4 worst."""
    return hierarchy_rank((bool(collision_free), bool(on_road)))


# --- signals -----------------------------------------------------------------


def drivable_rings(scene: Scene):
    return geometry.pack_rings([b.array for b in scene.boundaries()])


def _lane_speed_limits(scene: Scene, points: np.ndarray) -> np.ndarray:
    lanes = [lane for lane in scene.lanes() if lane.speed_limit is not None]
    if not lanes:
        return np.full(len(points), np.inf)
    best_d = np.full(len(points), np.inf)
    limit = np.full(len(points), np.inf)
    for lane in lanes:
        pts = lane.array
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        s, lat, _ = geometry.project_polyline(points, pts, cum)
        outside = np.maximum(np.maximum(-s, s - cum[-1]), 0.0)
        d = np.hypot(lat, outside)
        better = d < best_d
        best_d = np.where(better, d, best_d)
        limit = np.where(better, lane.speed_limit, limit)
    return limit


def rule_signals(
    positions: np.ndarray,
    headings: np.ndarray,
    speeds: np.ndarray,
    scene: Scene,
    agent_boxes: np.ndarray,
    params: RuleParams,
) -> dict[str, np.ndarray]:
    """Per-step signals (K, F) for a batch of ego trajectories."""
    positions = np.asarray(positions, dtype=float)
    k, f = positions.shape[:2]
    length, width = scene.ego_size
    boxes = anchor_boxes(positions, headings, length, width)
    signals: dict[str, np.ndarray] = {"speed": np.asarray(speeds, dtype=float)}

    signals["clearance"] = geometry.clearance(boxes, agent_boxes)

    flat, offsets = drivable_rings(scene)
    if len(offsets) > 1:
        corners = geometry.box_corners(boxes)  # (K, F, 4, 2)
        sd = geometry.region_signed_distance(corners.reshape(-1, 2), flat, offsets).reshape(k, f, 4)
        signals["drivable"] = sd.min(axis=-1)
    else:
        signals["drivable"] = np.full((k, f), np.inf)

    signals["speed_limit"] = _lane_speed_limits(scene, positions.reshape(-1, 2)).reshape(k, f)

    route = scene.route
    if route is None or len(route.polyline) < 2:
        for name in ("red_light_gap", "progress", "lateral", "heading_error"):
            signals[name] = np.full((k, f), np.inf)
        signals["prediction_mode"] = np.ones((k, f))
        return signals

    poly, cum = route.array, route.arclength
    s, lat, tan = geometry.project_polyline(positions.reshape(-1, 2), poly, cum)
    s, lat, tan = s.reshape(k, f), lat.reshape(k, f), tan.reshape(k, f)
    s0 = geometry.project_polyline(np.asarray(scene.current.position)[None], poly, cum)[0][0]
    signals["progress"] = s - s0
    signals["lateral"] = lat
    signals["heading_error"] = wrap_angle(np.asarray(headings) - tan)

    gap = np.full((k, f), np.inf)
    steps = scene.current.timestamp_index + 1 + np.arange(f)
    for line in scene.stop_lines():
        if line.light_state != "red" or line.red_interval is None:
            continue
        mid = line.array.mean(axis=0)
        s_stop, lat_stop, _ = geometry.project_polyline(mid[None], poly, cum)
        if abs(lat_stop[0]) > params.stop_line_tolerance or s_stop[0] < s0 + length / 2:
            continue
        a, b = line.red_interval
        red = (steps >= a) & (steps <= b)
        value = s_stop[0] - (s + length / 2)
        gap = np.where(red[None, :], np.minimum(gap, value), gap)
    signals["red_light_gap"] = gap
    return signals


def robustness_vectors(signals, hierarchy: RuleHierarchy) -> np.ndarray:
    """(K, N_rules) scaled robustness, +inf capped."""
    cols = []
    no_route = "prediction_mode" in signals
    for rule in hierarchy.rules:
        if no_route and rule.name in ROUTE_RULES:
            cols.append(np.full(np.shape(signals["speed"])[:-1], hierarchy.params.cap))
            continue
        rho = stl_robustness(rule.formula, signals)
        cols.append(np.minimum(np.asarray(rho, dtype=float) / rule.scale, hierarchy.params.cap))
    return np.stack(cols, axis=-1)


def evaluate_batch(positions, headings, speeds, scene: Scene, agent_boxes, hierarchy: RuleHierarchy):
    """Robustness (K, N), masks (K, N), ranks (K,) and rewards (K,) for K trajectories."""
    signals = rule_signals(positions, headings, speeds, scene, agent_boxes, hierarchy.params)
    rho = robustness_vectors(signals, hierarchy)
    masks = rho > 0
    rewards = hierarchy_reward(masks, rho, hierarchy.params.reward_epsilon)
    return rho, masks, ranks_from_masks(masks), np.atleast_1d(rewards)


def agent_boxes_from_trajectories(predicted_agents, sizes) -> np.ndarray:
    """(A, F, 5) boxes from per-agent trajectories and (length, width) pairs."""
    if len(predicted_agents) == 0:
        return np.zeros((0, 0, 5))
    out = []
    for traj, (length, width) in zip(predicted_agents, sizes):
        out.append(anchor_boxes(traj.positions, traj.headings, length, width))
    return np.stack(out)


def evaluate_rules(
    traj: Trajectory,
    scene: Scene,
    predicted_agents: Sequence[Trajectory],
    hierarchy: RuleHierarchy,
    agent_sizes: Optional[Sequence[tuple[float, float]]] = None,
) -> HierarchyResult:
    if agent_sizes is None:
        agent_sizes = [(h[-1].length, h[-1].width) for h in scene.agent_histories]
    boxes = agent_boxes_from_trajectories(predicted_agents, agent_sizes)
    if boxes.size == 0:
        boxes = np.zeros((0, len(traj), 5))
    rho, masks, ranks, rewards = evaluate_batch(
        traj.positions[None], traj.headings[None], traj.speeds[None], scene, boxes, hierarchy
    )
    return HierarchyResult(rho[0], masks[0], int(ranks[0]), float(rewards[0]))


# --- config file ---------------------------------------------------------------


def load_rule_config(path) -> RuleParams:
    """Read ``key = value`` lines; ``scales`` takes a comma-separated list of seven values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[rules]\n" + Path(path).read_text(encoding="utf-8"))
    section = parser["rules"]
    kwargs = {}
    defaults = RuleParams()
    for key, raw in section.items():
        if not hasattr(defaults, key):
            raise ValueError(f"unknown rule parameter {key!r}")
        if key == "scales":
            kwargs[key] = tuple(float(v) for v in raw.split(","))
        else:
            kwargs[key] = float(raw)
    return RuleParams(**kwargs)
