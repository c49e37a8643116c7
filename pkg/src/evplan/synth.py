"""Synthetic driving scenes: straight, curved and signalised roads with
car-following traffic.

Scenes are simulated in a right-hand-traffic world; the left-hand variant is
the same draw reflected about the ego's road axis. Everything is expressed in
the ego's current frame (ego at the origin heading along +x).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from evplan import geometry
from evplan.anchors import anchor_boxes
from evplan.rh_planner import plan_route
from evplan.scene import (
    EGO_LENGTH,
    EGO_WIDTH,
    AgentState,
    Dataset,
    DatasetMeta,
    EgoState,
    MapElement,
    Scene,
    wrap_angle,
)

LANE_WIDTH = 3.5
SHOULDER = 0.5
SPEED_LIMIT = 13.9
SUBSTEP = 0.1
ROAD_START, ROAD_END = -60.0, 200.0
MIN_PLACEMENT_GAP = 12.0
MAX_DENSITY = 16.0
MAX_ATTEMPTS = 200

# car-following parameters
IDM_ACCEL = 1.5
IDM_DECEL = 2.0
IDM_GAP = 2.0
IDM_HEADWAY = 1.2


@dataclass(frozen=True)
class GenConfig:
    n_scenes: int = 100
    driving_side: str = "right"
    mean_agent_density: float = 3.0
    road_kinds: dict = field(default_factory=lambda: {"straight": 0.5, "curve": 0.3, "intersection": 0.2})
    speed_noise: float = 0.3
    lateral_noise: float = 0.05
    lane_change_prob: float = 0.2
    brake_event_prob: float = 0.15
    seed: int = 0
    dt: float = 0.5
    H: int = 4
    F: int = 6
    regime_tag: Optional[str] = None

    def __post_init__(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be non-negative")
        if self.driving_side not in ("right", "left"):
            raise ValueError("driving_side must be 'right' or 'left'")
        if self.mean_agent_density < 0:
            raise ValueError("agent density must be non-negative")
        if self.mean_agent_density > MAX_DENSITY:
            raise ValueError(f"agent density above road capacity ({MAX_DENSITY} per scene)")
        w = self.road_kinds
        if set(w) - {"straight", "curve", "intersection"} or any(v < 0 for v in w.values()):
            raise ValueError("unknown road kind or negative weight")
        if abs(sum(w.values()) - 1.0) > 1e-9:
            raise ValueError("road kind weights must sum to 1")
        if self.speed_noise < 0 or self.lateral_noise < 0:
            raise ValueError("noise scales must be non-negative")

    @property
    def regime(self) -> str:
        if self.regime_tag is not None:
            return self.regime_tag
        return "ID" if self.driving_side == "right" else "OOD"


class RoadCurve:
    """Arclength-parameterised reference curve: straight when ``curvature`` is 0."""

    def __init__(self, curvature: float = 0.0, origin=(0.0, 0.0), heading: float = 0.0):
        self.k = curvature
        self.origin = np.asarray(origin, dtype=float)
        self.h0 = heading

    def heading(self, s):
        return self.h0 + self.k * np.asarray(s, dtype=float)

    def point(self, s):
        s = np.asarray(s, dtype=float)
        if self.k == 0.0:
            local = np.stack([s, np.zeros_like(s)], axis=-1)
        else:
            local = np.stack([np.sin(self.k * s) / self.k, (1 - np.cos(self.k * s)) / self.k], axis=-1)
        c, sn = np.cos(self.h0), np.sin(self.h0)
        return self.origin + local @ np.array([[c, sn], [-sn, c]])

    def frenet(self, s, d):
        th = self.heading(s)
        normal = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        return self.point(s) + np.asarray(d, dtype=float)[..., None] * normal


@dataclass
class _Lane:
    curve: RoadCurve
    offset: float
    direction: int  # +1 along the curve, -1 against it
    speed_limit: float = SPEED_LIMIT
    stop_u: Optional[float] = None  # travel coordinate of the stop line
    red: Optional[tuple[int, int]] = None  # red interval in step indices


@dataclass
class _Vehicle:
    lane: int
    u: float  # travel coordinate, s = direction * u
    v: float
    v_des: float
    length: float
    width: float
    brake_at: Optional[float] = None
    brake_rate: float = 0.0
    scripted_accel: Optional[Callable[[float], float]] = None  # overrides car following


def _idm(v, v_des, gap, dv):
    s_star = IDM_GAP + max(0.0, v * IDM_HEADWAY + v * dv / (2 * np.sqrt(IDM_ACCEL * IDM_DECEL)))
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    return IDM_ACCEL * (free - (s_star / max(gap, 0.1)) ** 2)


def _polygon_strip(curve: RoadCurve, s0: float, s1: float, half: float, n: int = 60) -> np.ndarray:
    s = np.linspace(s0, s1, n)
    left = curve.frenet(s, np.full(n, half))
    right = curve.frenet(s[::-1], np.full(n, -half))
    return np.vstack([left, right])


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10 - 15 * x + 6 * x * x)


class _World:
    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.kind = rng.choice(list(cfg.road_kinds), p=list(cfg.road_kinds.values()))
        self.n_lanes = int(rng.integers(1, 3))
        self.lanes: list[_Lane] = []
        self.elements: list[MapElement] = []
        self.boundaries: list[np.ndarray] = []
        self.stop_lines = []  # (points, red interval or None)
        self.ego_lane = 0
        self.s_int = None

    def build(self, ego_u_now: float):
        cfg, rng = self.cfg, self.rng
        if self.kind == "curve":
            radius = rng.uniform(60.0, 160.0)
            main = RoadCurve(rng.choice([-1.0, 1.0]) / radius)
        else:
            main = RoadCurve(0.0)
        self.main = main
        half = self.n_lanes * LANE_WIDTH + SHOULDER
        for j in range(self.n_lanes):
            self.lanes.append(_Lane(main, -LANE_WIDTH / 2 - j * LANE_WIDTH, +1))
        for j in range(self.n_lanes):
            self.lanes.append(_Lane(main, LANE_WIDTH / 2 + j * LANE_WIDTH, -1))
        self.ego_lane = int(rng.integers(0, self.n_lanes))
        self.boundaries.append(_polygon_strip(main, ROAD_START, ROAD_END, half, 120))
        cuts = [ROAD_START, -10.0, 40.0, 90.0, 140.0, ROAD_END]

        total_steps = cfg.H + cfg.F
        if self.kind == "intersection":
            s_int = ego_u_now + rng.uniform(18.0, 45.0)
            self.s_int = s_int
            cross_half = LANE_WIDTH + SHOULDER
            cross = RoadCurve(0.0, origin=main.point(s_int), heading=np.pi / 2)
            self.boundaries.append(_polygon_strip(cross, -60.0, 60.0, cross_half, 2))
            cuts = [ROAD_START, s_int - cross_half, s_int + cross_half, ROAD_END]
            red_main = None
            if rng.random() < 0.5:
                red_main = (0, int(rng.integers(cfg.H + 2, total_steps + 12)))
            red_cross = None if red_main is not None else (0, total_steps + 12)
            stop_s = s_int - cross_half
            for lane in self.lanes:
                if lane.direction > 0:
                    lane.stop_u, lane.red = stop_s, red_main
                else:
                    lane.stop_u, lane.red = -(s_int + cross_half), red_main
            # stop lines across each travel direction
            self.stop_lines.append(
                (main.frenet(np.full(2, stop_s), np.array([-0.2, -self.n_lanes * LANE_WIDTH + 0.2])), red_main)
            )
            self.stop_lines.append(
                (main.frenet(np.full(2, s_int + cross_half), np.array([self.n_lanes * LANE_WIDTH - 0.2, 0.2])), red_main)
            )
            for d, direction in ((-LANE_WIDTH / 2, 1), (LANE_WIDTH / 2, -1)):
                lane = _Lane(cross, d, direction)
                lane.stop_u = -half  # travel coordinate of the near edge of the main road
                lane.red = red_cross
                self.lanes.append(lane)
                s_stop = -half if direction > 0 else half
                pts = cross.frenet(np.full(2, s_stop), np.array([-0.2, -LANE_WIDTH + 0.2]) * direction)
                self.stop_lines.append((pts, red_cross))
            self.cross = cross

        for li, lane in enumerate(self.lanes):
            if lane.curve is main:
                segs = list(zip(cuts[:-1], cuts[1:]))
            else:
                segs = [(-60.0, -half), (-half, half), (half, 60.0)]
            for a, b in segs:
                n = max(2, int(np.ceil((b - a) / 5.0)) + 1)
                s = np.linspace(a, b, n)
                if lane.direction < 0:
                    s = s[::-1]
                pts = lane.curve.frenet(s, np.full(n, lane.offset))
                self.elements.append(("lane", pts, lane.speed_limit))

    # -- vehicles ------------------------------------------------------------------

    def lane_position(self, li: int, u, d_extra=0.0):
        lane = self.lanes[li]
        s = lane.direction * np.asarray(u, dtype=float)
        d = lane.offset + np.asarray(d_extra, dtype=float) * lane.direction
        return lane.curve.frenet(s, d)


def _lane_change_profile(rng, cfg: GenConfig, n_steps: int):
    """Lateral offset per substep (+ toward the left of travel)."""
    t_total = (cfg.H + cfg.F) * cfg.dt
    start = rng.uniform(0.3 * t_total, 0.6 * t_total)
    duration = rng.uniform(3.0, 4.5)
    t = np.arange(n_steps) * SUBSTEP
    return start, duration, _smoothstep((t - start) / duration)


def _simulate(world: _World, cfg: GenConfig, ego: _Vehicle, agents: list[_Vehicle], lateral_target: float,
              lc_profile, ego_plan):
    """Integrates all vehicles on the substep grid; returns per-vehicle (u, d) tracks."""
    n_steps = int(round((cfg.H + cfg.F) * cfg.dt / SUBSTEP)) + 1
    steps_per = int(round(cfg.dt / SUBSTEP))
    vehicles = [ego] + agents
    us = np.zeros((len(vehicles), n_steps))
    vs = np.zeros((len(vehicles), n_steps))
    for i in range(n_steps):
        t = i * SUBSTEP
        step_index = t / cfg.dt
        us[:, i] = [veh.u for veh in vehicles]
        vs[:, i] = [veh.v for veh in vehicles]
        ego_d = lateral_target * lc_profile[i]
        ego.v_des = ego_plan(t)
        accs = []
        for vi, veh in enumerate(vehicles):
            lane = world.lanes[veh.lane]
            gap, dv = np.inf, 0.0
            for vj, other in enumerate(vehicles):
                if vj == vi:
                    continue
                same = other.lane == veh.lane
                if vj == 0 and vi != 0:
                    # ego occupies its lane and, during a lane change, the target lane as well
                    same = same or (lc_profile[i] > 0.05 and world.lanes[veh.lane].direction == 1
                                     and world.lanes[veh.lane].curve is world.main
                                     and abs(world.lanes[ego.lane].offset + ego_d - lane.offset) < LANE_WIDTH * 0.75)
                if vi == 0 and not same and lc_profile[i] > 0.05:
                    same = (world.lanes[other.lane].direction == 1 and world.lanes[other.lane].curve is world.main
                            and abs(world.lanes[other.lane].offset - (lane.offset + ego_d)) < LANE_WIDTH * 0.75)
                if not same:
                    continue
                ahead = other.u - veh.u
                if ahead <= 0:
                    continue
                g = ahead - (other.length + veh.length) / 2
                if g < gap:
                    gap, dv = g, veh.v - other.v
            if lane.stop_u is not None and lane.red is not None and lane.red[0] <= step_index <= lane.red[1]:
                g = lane.stop_u - (veh.u + veh.length / 2)
                if g > -0.5 and (veh.v**2 / (2 * max(g, 0.1)) <= 5.0 or veh.v < 1.0) and g < gap:
                    gap, dv = max(g, 0.05), veh.v
            a = _idm(veh.v, veh.v_des, gap, dv)
            if veh.brake_at is not None and t >= veh.brake_at:
                a = min(a, -veh.brake_rate)
            if veh.scripted_accel is not None:
                a = veh.scripted_accel(t)
            accs.append(max(a, -8.0))
        for veh, a in zip(vehicles, accs):
            v_new = max(veh.v + a * SUBSTEP, 0.0)
            veh.u += 0.5 * (veh.v + v_new) * SUBSTEP
            veh.v = v_new
    return us, vs, steps_per, n_steps


def _track_states(positions: np.ndarray, cfg: GenConfig, steps_per: int, fallback_heading: float):
    """Headings/speeds at sample steps from central differences on the substep grid."""
    idx = np.arange(0, positions.shape[0], steps_per)
    lo = np.clip(idx - 1, 0, len(positions) - 1)
    hi = np.clip(idx + 1, 0, len(positions) - 1)
    vel = (positions[hi] - positions[lo]) / ((hi - lo) * SUBSTEP)[:, None]
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.empty(len(idx))
    prev = fallback_heading
    for i, (v, sp) in enumerate(zip(vel, speed)):
        if sp > 1e-3:
            prev = np.arctan2(v[1], v[0])
        heading[i] = prev
    return positions[idx], heading, speed


def _draw_scene(cfg: GenConfig, rng: np.random.Generator, index: int):
    H, F, dt = cfg.H, cfg.F, cfg.dt
    t_hist = H * dt
    v0 = rng.uniform(4.0, 13.0)
    ego_u_now_guess = v0 * t_hist
    world = _World(cfg, rng)
    world.build(ego_u_now_guess)

    # ego plan: cruise, then possibly change desired speed
    v_a = v0 + rng.normal(0, cfg.speed_noise)
    v_b = float(np.clip(v_a + rng.choice([-1, 0, 1]) * rng.uniform(1.5, 4.0), 2.0, 15.0))
    t_switch = rng.uniform(0.0, (H + F) * dt)

    def ego_plan(t):
        return v_a if t < t_switch else v_b

    ego = _Vehicle(world.ego_lane, 0.0, v0, v_a, EGO_LENGTH, EGO_WIDTH)

    n_steps_total = int(round((H + F) * dt / SUBSTEP)) + 1
    lateral_target = 0.0
    lc = np.zeros(n_steps_total)
    if world.n_lanes == 2 and world.kind != "intersection" and rng.random() < cfg.lane_change_prob:
        # lane 0 is next to the centre line, lane 1 outside it; offsets grow to the left
        lateral_target = LANE_WIDTH if world.ego_lane == 1 else -LANE_WIDTH
        _, _, lc = _lane_change_profile(rng, cfg, n_steps_total)

    n_agents = int(min(rng.poisson(cfg.mean_agent_density), MAX_DENSITY))
    agents: list[_Vehicle] = []
    occupied: dict[int, list[float]] = {world.ego_lane: [0.0]}
    for _ in range(n_agents):
        for _try in range(20):
            li = int(rng.integers(0, len(world.lanes)))
            lane = world.lanes[li]
            if lane.curve is world.main and lane.direction > 0:
                u = rng.uniform(-35.0, 70.0)
            elif lane.curve is world.main:
                u = -rng.uniform(-20.0, 120.0)
            else:
                u = rng.uniform(-45.0, -12.0)
            if all(abs(u - o) >= MIN_PLACEMENT_GAP for o in occupied.get(li, [])):
                break
        else:
            continue
        occupied.setdefault(li, []).append(u)
        v_des = float(np.clip(rng.uniform(6.0, 14.0) + rng.normal(0, cfg.speed_noise), 2.0, 16.0))
        veh = _Vehicle(li, u, v_des * rng.uniform(0.7, 1.0), v_des, rng.uniform(4.2, 5.2), rng.uniform(1.8, 2.1))
        if lane.curve is world.main and rng.random() < cfg.brake_event_prob:
            veh.brake_at = rng.uniform(0.5 * t_hist, (H + F) * dt)
            veh.brake_rate = rng.uniform(3.0, 6.0)
        agents.append(veh)

    us, vs, steps_per, _ = _simulate(world, cfg, ego, agents, lateral_target, lc, ego_plan)

    # world positions on the substep grid
    noise_e = np.clip(rng.normal(0, cfg.lateral_noise, us.shape[1]), -2 * cfg.lateral_noise, 2 * cfg.lateral_noise)
    smooth = np.convolve(noise_e, np.ones(5) / 5, mode="same")
    ego_xy = world.lane_position(ego.lane, us[0], lateral_target * lc + smooth)
    agent_xy = [world.lane_position(a.lane, us[i + 1]) for i, a in enumerate(agents)]

    e_pos, e_head, e_speed = _track_states(ego_xy, cfg, steps_per, 0.0)
    tracks = []
    for i, a in enumerate(agents):
        lane = world.lanes[a.lane]
        h0 = float(lane.curve.heading(lane.direction * us[i + 1][0])) + (0.0 if lane.direction > 0 else np.pi)
        tracks.append(_track_states(agent_xy[i], cfg, steps_per, h0))
    return world, e_pos, e_head, e_speed, agents, tracks


def _to_local(points, origin, heading):
    c, s = np.cos(heading), np.sin(heading)
    return (np.asarray(points) - origin) @ np.array([[c, -s], [s, c]])


def _reflect(points):
    pts = np.array(points, dtype=float)
    pts[..., 1] *= -1
    return pts


def _scene_from_draw(cfg: GenConfig, draw, scene_id: str) -> Optional[Scene]:
    world, e_pos, e_head, e_speed, agents, tracks = draw
    H, F = cfg.H, cfg.F
    if e_speed[H] < 3.0:
        return None
    origin, h0 = e_pos[H], e_head[H]
    mirror = cfg.driving_side == "left"

    def pts(p):
        out = _to_local(p, origin, h0)
        return _reflect(out) if mirror else out

    def ang(h):
        return wrap_angle(-(np.asarray(h) - h0) if mirror else np.asarray(h) - h0)

    ego_p, ego_h = pts(e_pos), ang(e_head)
    states = [
        EgoState((float(p[0]), float(p[1])), float(h), float(v), i)
        for i, (p, h, v) in enumerate(zip(ego_p, ego_h, e_speed))
    ]
    hist, fut = tuple(states[: H + 1]), tuple(states[H + 1 :])

    agent_hists, agent_futs = [], []
    for aid, (veh, (p, h, v)) in enumerate(zip(agents, tracks)):
        p, h = pts(p), ang(h)
        ss = [
            AgentState(aid, (float(q[0]), float(q[1])), float(hh), float(vv), veh.length, veh.width)
            for q, hh, vv in zip(p, h, v)
        ]
        agent_hists.append(tuple(ss[: H + 1]))
        agent_futs.append(tuple(ss[H + 1 :]))

    elements = []
    for _, p, limit in world.elements:
        elements.append(MapElement("lane_centerline", tuple(map(tuple, pts(p))), speed_limit=limit))
    for ring in world.boundaries:
        r = pts(ring)
        if mirror:
            r = r[::-1]  # keep counter-clockwise orientation
        elements.append(MapElement("road_boundary", tuple(map(tuple, r))))
    for line, red in world.stop_lines:
        state = "red" if red is not None else "green"
        elements.append(MapElement("stop_line", tuple(map(tuple, pts(line))), light_state=state, red_interval=red))

    scene = Scene(
        ego_history=hist,
        agent_histories=tuple(agent_hists),
        map=tuple(elements),
        route=None,
        ego_future=fut,
        scene_id=scene_id,
        regime_tag=cfg.regime,
        agent_futures=tuple(agent_futs),
    )
    if not _future_is_valid(scene):
        return None
    return replace(scene, route=plan_route(scene, np.asarray(fut[-1].position)))


def _future_is_valid(scene: Scene) -> bool:
    """Ground truth stays on the road and clear of every agent."""
    fut = scene.future_trajectory()
    length, width = scene.ego_size
    boxes = anchor_boxes(fut.positions[None], fut.headings[None], length, width)
    corners = geometry.box_corners(boxes).reshape(-1, 2)
    flat, offsets = geometry.pack_rings([b.array for b in scene.boundaries()])
    if np.min(geometry.region_signed_distance(corners, flat, offsets)) <= 0.05:
        return False
    if scene.agent_futures:
        agent_boxes = np.stack([
            anchor_boxes(np.array([s.position for s in f]), np.array([s.heading for s in f]), f[0].length, f[0].width)
            for f in scene.agent_futures
        ])
        if geometry.boxes_overlap(boxes, agent_boxes).any():
            return False
    return True


def generate_scene(cfg: GenConfig, index: int) -> Scene:
    """Scene ``index`` of the stream defined by ``cfg.seed``; redraws until valid."""
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([cfg.seed, index, attempt])
        draw = _draw_scene(cfg, rng, index)
        scene = _scene_from_draw(cfg, draw, f"{cfg.seed}-{index:06d}")
        if scene is not None:
            return scene
    raise RuntimeError(f"could not draw a valid scene for index {index}")


def generate_scenes(cfg: GenConfig) -> Dataset:
    meta = DatasetMeta(
        dt=cfg.dt,
        H=cfg.H,
        F=cfg.F,
        seed=cfg.seed,
        regime=f"{cfg.driving_side}-side traffic, density {cfg.mean_agent_density:g}",
    )
    return Dataset(tuple(generate_scene(cfg, i) for i in range(cfg.n_scenes)), meta)


def scripted_follower_scene(
    ego_speed: float = 10.0,
    follower_gap: float = 6.0,
    brake: float = 2.0,
    brake_until: float = 2.0,
    reaccel: float = 2.0,
    cfg: Optional[GenConfig] = None,
    scene_id: str = "scripted-follower",
) -> Scene:
    """Straight two-way road with the ego cruising and a tailgater behind it.

    The follower starts at the ego's speed ``follower_gap`` metres (centre to centre)
    behind, brakes until ``brake_until`` seconds, i.e. through the observed history,
    and then speeds up again until it matches the ego. A constant-velocity
    extrapolation at the end of the history therefore under-predicts its travel.
    """
    cfg = cfg or GenConfig(n_scenes=1, lateral_noise=0.0)
    world = _World(replace(cfg, road_kinds={"straight": 1.0}), np.random.default_rng(0))
    world.kind, world.n_lanes = "straight", 1
    world.build(ego_speed * cfg.H * cfg.dt)
    world.ego_lane = 0
    ego = _Vehicle(0, 0.0, ego_speed, ego_speed, EGO_LENGTH, EGO_WIDTH)
    follower = _Vehicle(0, -follower_gap, ego_speed, ego_speed, 4.7, 1.9)

    def follower_accel(t):
        if t < brake_until:
            return -brake
        return reaccel if follower.v < ego_speed else 0.0

    follower.scripted_accel = follower_accel
    n = int(round((cfg.H + cfg.F) * cfg.dt / SUBSTEP)) + 1
    us, _, steps_per, _ = _simulate(world, cfg, ego, [follower], 0.0, np.zeros(n), lambda t: ego_speed)
    e_pos, e_head, e_speed = _track_states(world.lane_position(0, us[0]), cfg, steps_per, 0.0)
    track = _track_states(world.lane_position(0, us[1]), cfg, steps_per, 0.0)
    scene = _scene_from_draw(cfg, (world, e_pos, e_head, e_speed, [follower], [track]), scene_id)
    if scene is None:
        raise ValueError("scripted scenario violates its own ground truth")
    return scene
