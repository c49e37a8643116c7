"""Candidate future trajectories from quintic splines in the flat outputs (x, y)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from evplan import geometry
from evplan.scene import EgoState, MapElement, RoutePlan, Scene, Trajectory, wrap_angle

SPEED_MULTIPLIERS = (0.0, 0.5, 1.0, 1.25)
LATERAL_OFFSETS = (-3.0, -1.5, 0.0, 1.5, 3.0)
ARCLENGTH_FACTORS = (0.6, 1.0)
DEFAULT_K = 40


class TerminalSpec(NamedTuple):
    arclength: float  # metres of route progress from the ego's projection
    offset: float  # metres, left of the reference positive
    speed: float  # m/s, along the reference tangent


@dataclass(frozen=True)
class BicycleLimits:
    max_accel: float = 4.0
    max_decel: float = 8.0
    max_curvature: float = 0.3
    max_speed: float = 40.0

    def __post_init__(self):
        if min(self.max_accel, self.max_decel, self.max_curvature, self.max_speed) <= 0:
            raise ValueError("bicycle limits must be strictly positive")


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """K anchors sampled at steps 1..F, with their spline coefficients.

    ``coeffs[k, axis]`` holds the quintic coefficients c0..c5 in seconds.
    """

    positions: np.ndarray  # (K, F, 2)
    headings: np.ndarray  # (K, F)
    speeds: np.ndarray  # (K, F)
    coeffs: np.ndarray  # (K, 2, 6)
    terminal_specs: tuple[TerminalSpec, ...]
    feasible: np.ndarray  # (K,) bool, False only when no feasible neighbour existed
    dt: float
    start: EgoState
    route_clamped: bool = False

    @property
    def K(self) -> int:
        return self.positions.shape[0]

    @property
    def F(self) -> int:
        return self.positions.shape[1]

    @cached_property
    def anchors(self) -> tuple[Trajectory, ...]:
        out = []
        for k in range(self.K):
            states = tuple(
                EgoState(
                    (float(self.positions[k, i, 0]), float(self.positions[k, i, 1])),
                    float(self.headings[k, i]),
                    float(self.speeds[k, i]),
                    self.start.timestamp_index + i + 1,
                )
                for i in range(self.F)
            )
            out.append(Trajectory(states, "anchor"))
        return tuple(out)

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        """Spline values (K, len(t), 2) at times ``t`` seconds after the current step."""
        return eval_quintic(self.coeffs, np.atleast_1d(np.asarray(t, dtype=float)), derivative)


def lattice_spec(K: int, base_speed: float, horizon: float = 3.0) -> list[TerminalSpec]:
    """Terminal specs for K anchors, ordered center-out.

    The base lattice is speeds x offsets x arclength factors; duplicates are
    dropped and the lattice is densified with midpoints when K exceeds it.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    base_speed = max(float(base_speed), 0.0)
    nominal = base_speed * horizon
    speeds, offsets, factors = list(SPEED_MULTIPLIERS), list(LATERAL_OFFSETS), list(ARCLENGTH_FACTORS)
    while True:
        specs = _lattice(speeds, offsets, factors, base_speed, nominal)
        if len(specs) >= K:
            return specs[:K]
        speeds, offsets, factors = _densify(speeds), _densify(offsets), _densify(factors)


def _densify(values):
    vals = sorted(values)
    mids = [(a + b) / 2.0 for a, b in zip(vals[:-1], vals[1:])]
    return sorted(vals + mids)


def _lattice(speeds, offsets, factors, base_speed, nominal):
    keyed = {}
    for m in speeds:
        for o in offsets:
            for f in factors:
                spec = TerminalSpec(f * nominal, float(o), max(m * base_speed, 0.0))
                key = tuple(round(v, 9) for v in spec)
                if key in keyed:
                    continue
                order = (abs(o), abs(m - 1.0), abs(f - 1.0), o, m, f)
                keyed[key] = (order, spec)
    return [spec for _, spec in sorted(keyed.values(), key=lambda item: item[0])]


# --- quintic splines ---------------------------------------------------------


def quintic_coefficients(p0, v0, a0, pT, vT, aT, T: float) -> np.ndarray:
    """Coefficients (..., 6) of the quintic matching position/velocity/acceleration at 0 and T."""
    p0, v0, a0, pT, vT, aT = (np.asarray(x, dtype=float) for x in (p0, v0, a0, pT, vT, aT))
    T2, T3 = T * T, T * T * T
    A = np.array(
        [[T3, T2 * T2, T3 * T2], [3 * T2, 4 * T3, 5 * T2 * T2], [6 * T, 12 * T2, 20 * T3]],
        dtype=float,
    )
    rhs = np.stack([pT - p0 - v0 * T - 0.5 * a0 * T2, vT - v0 - a0 * T, aT - a0], axis=-1)
    high = np.linalg.solve(A, rhs[..., None])[..., 0]
    low = np.stack(np.broadcast_arrays(p0, v0, 0.5 * a0), axis=-1)
    low = np.broadcast_to(low, high.shape[:-1] + (3,))
    return np.concatenate([low, high], axis=-1)


def eval_quintic(coeffs: np.ndarray, t: np.ndarray, derivative: int = 0) -> np.ndarray:
    """Evaluate coefficients (K, 2, 6) at times t (N,) -> (K, N, 2)."""
    powers = np.arange(6)
    c = np.asarray(coeffs, dtype=float)
    for _ in range(derivative):
        c = c[..., 1:] * np.arange(1, c.shape[-1])
    p = powers[: c.shape[-1]]
    basis = t[:, None] ** p[None, :]  # (N, n)
    return np.einsum("kan,tn->kta", c, basis)


def spline_curvature(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Signed path curvature (K, N); zero where the speed is below 1e-9."""
    v = eval_quintic(coeffs, t, 1)
    a = eval_quintic(coeffs, t, 2)
    speed = np.hypot(v[..., 0], v[..., 1])
    num = v[..., 0] * a[..., 1] - v[..., 1] * a[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(speed > 1e-9, num / np.maximum(speed, 1e-9) ** 3, 0.0)
    return kappa


# --- reference path ----------------------------------------------------------


def reference_path(scene: Scene) -> RoutePlan:
    """Route in planning mode; otherwise the ego's nearest lane centerline.

    Falls back to a straight 200 m line along the ego heading.
    """
    if scene.route is not None and len(scene.route.polyline) >= 2:
        return scene.route
    lane = nearest_lane(scene.lanes(), scene.current)
    if lane is not None:
        return RoutePlan.from_points(lane.array)
    cur = scene.current
    p = np.asarray(cur.position)
    d = np.array([np.cos(cur.heading), np.sin(cur.heading)])
    return RoutePlan.from_points([p - 50 * d, p + 200 * d], degraded=True)


def nearest_lane(lanes: list[MapElement], state: EgoState) -> Optional[MapElement]:
    """Closest lane whose tangent is within 90 degrees of the heading; ties by list order."""
    best, best_d = None, np.inf
    pos = np.asarray(state.position, dtype=float)[None]
    for lane in lanes:
        pts = lane.array
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        s, lat, tan = geometry.project_polyline(pos, pts, cum)
        inside = -1.0 <= s[0] <= cum[-1] + 1.0
        aligned = abs(wrap_angle(tan[0] - state.heading)) < np.pi / 2
        d = abs(lat[0]) if inside else abs(lat[0]) + 1e3
        if aligned and d < best_d:
            best, best_d = lane, d
    return best


def point_at(route: RoutePlan, s: np.ndarray):
    """Positions and tangent headings at arclengths ``s`` (clamped to the route)."""
    pts, cum = route.array, route.arclength
    s = np.clip(np.asarray(s, dtype=float), cum[0], cum[-1])
    j = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
    seg = pts[j + 1] - pts[j]
    seg_len = cum[j + 1] - cum[j]
    frac = (s - cum[j]) / seg_len
    pos = pts[j] + frac[:, None] * seg
    tangent = np.arctan2(seg[:, 1], seg[:, 0])
    return pos, tangent


# --- generation --------------------------------------------------------------


def _initial_conditions(scene: Scene, dt: float):
    cur = scene.current
    p0 = np.asarray(cur.position, dtype=float)
    v0 = cur.speed * np.array([np.cos(cur.heading), np.sin(cur.heading)])
    if len(scene.ego_history) >= 2:
        prev = scene.ego_history[-2]
        vp = prev.speed * np.array([np.cos(prev.heading), np.sin(prev.heading)])
        a0 = (v0 - vp) / dt
    else:
        a0 = np.zeros(2)
    return p0, v0, a0


def _build(specs, p0, v0, a0, route, s0, T):
    specs_arr = np.array(specs, dtype=float).reshape(-1, 3)
    s_target = s0 + specs_arr[:, 0]
    clamped = bool(np.any(s_target > route.length + 1e-9))
    pos, tan = point_at(route, s_target)
    normal = np.stack([-np.sin(tan), np.cos(tan)], axis=1)
    pT = pos + specs_arr[:, 1:2] * normal
    vT = specs_arr[:, 2:3] * np.stack([np.cos(tan), np.sin(tan)], axis=1)
    coeffs = quintic_coefficients(p0[None], v0[None], a0[None], pT, vT, np.zeros_like(pT), T)
    return np.ascontiguousarray(coeffs), clamped


def _feasibility(coeffs, times, limits: BicycleLimits, route: RoutePlan):
    v = eval_quintic(coeffs, times, 1)
    a = eval_quintic(coeffs, times, 2)
    speed = np.hypot(v[..., 0], v[..., 1])
    unit = v / np.maximum(speed, 1e-9)[..., None]
    a_long = np.einsum("kti,kti->kt", a, unit)
    kappa = np.abs(spline_curvature(coeffs, times))
    moving = speed > 0.5
    ok = speed <= limits.max_speed
    ok &= np.where(speed > 1e-6, (a_long <= limits.max_accel) & (a_long >= -limits.max_decel), True)
    ok &= np.where(moving, kappa <= limits.max_curvature, True)
    # no reversing against the reference direction
    pos = eval_quintic(coeffs, times, 0)
    k, n = speed.shape
    _, _, tan = geometry.project_polyline(pos.reshape(-1, 2), route.array, route.arclength)
    tan = tan.reshape(k, n)
    v_along = v[..., 0] * np.cos(tan) + v[..., 1] * np.sin(tan)
    ok &= v_along >= -0.1
    return ok.all(axis=1)


def _spec_distance(a: TerminalSpec, b: TerminalSpec, scale_s: float, scale_v: float) -> float:
    return float(
        np.sqrt(((a.arclength - b.arclength) / scale_s) ** 2 + ((a.offset - b.offset) / 1.5) ** 2
                + ((a.speed - b.speed) / scale_v) ** 2)
    )


def generate_anchors(
    scene: Scene,
    K: int = DEFAULT_K,
    limits: Optional[BicycleLimits] = None,
    dt: float = 0.5,
    F: int = 6,
) -> AnchorSet:
    """Deterministic K anchors for a scene; infeasible lattice entries are swapped
    for the nearest feasible spec from a densified lattice.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    limits = limits or BicycleLimits()
    T = F * dt
    route = reference_path(scene)
    cur = scene.current
    p0, v0, a0 = _initial_conditions(scene, dt)
    s0 = float(geometry.project_polyline(p0[None], route.array, route.arclength)[0][0])

    specs = lattice_spec(K, cur.speed, T)
    coeffs, clamped = _build(specs, p0, v0, a0, route, s0, T)
    times = dt * np.arange(1, F + 1)
    ok = _feasibility(coeffs, times, limits, route)
    feasible = ok.copy()
    if not ok.all():
        pool = lattice_spec(max(4 * K, 160), cur.speed, T)
        pool_coeffs, pool_clamped = _build(pool, p0, v0, a0, route, s0, T)
        pool_ok = _feasibility(pool_coeffs, times, limits, route)
        used = {tuple(s) for s, good in zip(specs, ok) if good}
        scale_s = max(cur.speed * T, 1.0)
        scale_v = max(cur.speed, 1.0)
        specs = list(specs)
        for k in np.flatnonzero(~ok):
            order = sorted(
                (i for i in range(len(pool)) if pool_ok[i]),
                key=lambda i: (_spec_distance(specs[k], pool[i], scale_s, scale_v), i),
            )
            fresh = [i for i in order if tuple(pool[i]) not in used]
            choice = fresh[0] if fresh else (order[0] if order else None)
            if choice is None:
                continue
            specs[k] = pool[choice]
            used.add(tuple(pool[choice]))
            coeffs[k] = pool_coeffs[choice]
            feasible[k] = True
            clamped = clamped or pool_clamped
    if clamped:
        warnings.warn("route shorter than the lattice arclength; terminal states clamped", RuntimeWarning)

    pos = eval_quintic(coeffs, times, 0)
    vel = eval_quintic(coeffs, times, 1)
    speeds = np.hypot(vel[..., 0], vel[..., 1])
    headings = np.empty_like(speeds)
    for k in range(len(specs)):
        prev = cur.heading
        for i in range(F):
            if speeds[k, i] > 1e-6:
                prev = np.arctan2(vel[k, i, 1], vel[k, i, 0])
            headings[k, i] = prev
    headings = wrap_angle(headings)
    for arr in (pos, headings, speeds, coeffs):
        arr.setflags(write=False)
    return AnchorSet(
        positions=pos,
        headings=headings,
        speeds=speeds,
        coeffs=coeffs,
        terminal_specs=tuple(specs),
        feasible=feasible,
        dt=dt,
        start=cur,
        route_clamped=clamped,
    )


def anchor_boxes(positions, headings, length: float, width: float) -> np.ndarray:
    """(..., F, 5) ego boxes along trajectories."""
    positions = np.asarray(positions, dtype=float)
    headings = np.asarray(headings, dtype=float)
    shape = headings.shape
    return np.concatenate(
        [positions, headings[..., None], np.full(shape + (1,), length), np.full(shape + (1,), width)], axis=-1
    )
