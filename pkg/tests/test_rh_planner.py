import math
from fractions import Fraction
from decimal import Decimal, getcontext

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplan.anchors import generate_anchors
from evplan.rh_planner import (
    ALPHA_FLOOR,
    BoltzmannConfig,
    DirichletBelief,
    boltzmann_distribution,
    compute_prior,
    lane_successors,
    plan_route,
    predict_agents_cv,
    prior_from_rewards,
    rh_plan,
    route_lane_sequence,
)
from evplan.rules import default_hierarchy, evaluate_batch
from evplan.scene import AgentState, EgoState, MapElement, Scene

from conftest import straight_road_scene

SPACING = 50.0


def grid_lanes():
    lanes = []
    nodes = [(i, j) for i in range(3) for j in range(3)]
    for a in nodes:
        for b in nodes:
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1:
                pa = (a[0] * SPACING, a[1] * SPACING)
                pb = (b[0] * SPACING, b[1] * SPACING)
                lanes.append(MapElement("lane_centerline", (pa, pb), speed_limit=15.0))
    return lanes


def grid_scene(agents=()):
    hist = tuple(EgoState((10.0 + (i - 4) * 2.0, 0.0), 0.0, 4.0, i) for i in range(5))
    return Scene(hist, tuple(agents), tuple(grid_lanes()), None, None, "grid")


def oracle_route(lanes, start, goal_lane):
    g = nx.DiGraph()
    g.add_nodes_from(range(len(lanes)))
    for i, nxt in enumerate(lane_successors(lanes)):
        g.add_edges_from((i, j) for j in nxt)
    paths = list(nx.all_shortest_paths(g, start, goal_lane))
    length = lambda p: sum(float(np.linalg.norm(np.diff(lanes[i].array, axis=0), axis=1).sum()) for i in p)
    return list(min(paths, key=lambda p: (len(p), length(p), tuple(p))))


def test_route_search_matches_graph_oracle():
    sc = grid_scene()
    lanes = sc.lanes()
    start = next(i for i, l in enumerate(lanes) if l.points == ((0.0, 0.0), (SPACING, 0.0)))
    for lane in lanes:
        goal = lane.array.mean(axis=0)
        # a midpoint lies on both directions of a segment; the lower index is the goal lane
        goal_lane = min(i for i, other in enumerate(lanes) if set(other.points) == set(lane.points))
        assert route_lane_sequence(sc, goal) == oracle_route(lanes, start, goal_lane)


def test_route_plan_concatenates_centerlines():
    sc = grid_scene()
    route = plan_route(sc, (100.0, 75.0))
    assert not route.degraded
    assert route.polyline[0] == (0.0, 0.0)
    assert route.polyline[-1] == (100.0, 100.0)
    assert route.length == pytest.approx(4 * SPACING)


def test_route_ignores_agents():
    agent = tuple(AgentState(1, (60.0, 0.0), 0.0, 0.0, 4.5, 2.0) for _ in range(5))
    assert plan_route(grid_scene(), (100.0, 75.0)) == plan_route(grid_scene([agent]), (100.0, 75.0))


def test_disconnected_goal_is_degraded():
    lanes = (
        MapElement("lane_centerline", ((0.0, 0.0), (100.0, 0.0))),
        MapElement("lane_centerline", ((0.0, 50.0), (100.0, 50.0))),
    )
    hist = tuple(EgoState((10.0 + (i - 4), 0.0), 0.0, 2.0, i) for i in range(5))
    sc = Scene(hist, (), lanes, None, None, "split")
    assert route_lane_sequence(sc, (90.0, 50.0)) is None
    route = plan_route(sc, (90.0, 50.0))
    assert route.degraded
    assert route.polyline[0] == (0.0, 0.0)
    assert route.length > 100.0


# --- constant-velocity prediction -----------------------------------------------------------


def test_cv_prediction_straight_line():
    hist = tuple(AgentState(3, (i * 2.5, 5.0), 0.0, 5.0, 4.5, 2.0) for i in range(5))
    sc = straight_road_scene(agents=(hist,))
    (pred,) = predict_agents_cv(sc, F=6, dt=0.5)
    np.testing.assert_allclose(pred.positions[:, 0], 10.0 + 2.5 * np.arange(1, 7))
    np.testing.assert_allclose(pred.positions[:, 1], 5.0)
    assert pred.states[0].timestamp_index == 5


def test_cv_prediction_overshoots_decelerating_agent():
    # an agent braking at 2 m/s^2 is predicted to keep its last speed
    speeds = [10.0, 9.0, 8.0, 7.0, 6.0]
    xs = np.concatenate([[0.0], np.cumsum(0.5 * (np.array(speeds[:-1]) + speeds[1:]) / 2)])
    hist = tuple(AgentState(4, (float(x), 0.0), 0.0, v, 4.5, 2.0) for x, v in zip(xs, speeds))
    sc = straight_road_scene(agents=(hist,))
    (pred,) = predict_agents_cv(sc, F=3, dt=0.5)
    v_true = 6.0 - 2.0 * 0.5 * np.arange(1, 4)
    x_true = xs[-1] + np.cumsum(0.5 * (np.concatenate([[6.0], v_true[:-1]]) + v_true) / 2)
    assert np.all(pred.positions[:, 0] > x_true)
    np.testing.assert_allclose(pred.positions[:, 0], xs[-1] + 3.0 * np.arange(1, 4))


def test_cv_prediction_heading():
    hist = tuple(AgentState(5, (0.0, 2.0 * i), math.pi / 2, 4.0, 4.5, 2.0) for i in range(5))
    sc = straight_road_scene(agents=(hist,))
    (pred,) = predict_agents_cv(sc, F=2, dt=0.5)
    np.testing.assert_allclose(pred.positions, [[0.0, 10.0], [0.0, 12.0]], atol=1e-12)


# --- Boltzmann ---------------------------------------------------------------------------------


def test_boltzmann_example_against_decimal():
    getcontext().prec = 40
    exps = [Decimal(r).exp() for r in (1, 2, 3)]
    want = [float(e / sum(exps)) for e in exps]
    got = boltzmann_distribution([1.0, 2.0, 3.0])
    np.testing.assert_allclose(got, want, atol=1e-15)
    np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_boltzmann_uniform_on_equal_rewards():
    np.testing.assert_allclose(boltzmann_distribution(np.full(7, 3.3)), np.full(7, 1 / 7), atol=1e-12)


def test_boltzmann_high_temperature():
    p = boltzmann_distribution([1.0, 5.0, 9.0], BoltzmannConfig(zeta=1e9))
    np.testing.assert_allclose(p, 1 / 3, atol=1e-6)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20), st.integers(0, 19))
def test_boltzmann_low_temperature(rewards, idx):
    r = np.array(rewards)
    idx %= len(r)
    r[idx] = r.max() + 1.0
    p = boltzmann_distribution(r, BoltzmannConfig(zeta=1e-9))
    assert p[idx] >= 1 - 1e-6


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(-1e3, 1e3))
def test_boltzmann_shift_invariance(rewards, c):
    a = boltzmann_distribution(rewards)
    b = boltzmann_distribution(np.array(rewards) + c)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1.0) <= 1e-12


def test_boltzmann_rejects_bad_input():
    with pytest.raises(ValueError):
        boltzmann_distribution([1.0, np.inf])
    with pytest.raises(ValueError):
        boltzmann_distribution([])
    with pytest.raises(ValueError):
        BoltzmannConfig(zeta=0.0)


# --- prior ---------------------------------------------------------------------------------------


def test_prior_equal_rewards():
    prior = prior_from_rewards([4.0, 4.0], BoltzmannConfig(), 10.0)
    np.testing.assert_allclose(prior.concentration, [5 + ALPHA_FLOOR, 5 + ALPHA_FLOOR])


def test_prior_zero_strength_is_floor():
    prior = prior_from_rewards([1.0, 9.0, 3.0], BoltzmannConfig(), 0.0)
    np.testing.assert_array_equal(prior.concentration, np.full(3, ALPHA_FLOOR))
    with pytest.raises(ValueError):
        prior_from_rewards([1.0], BoltzmannConfig(), -1.0)


def test_prior_compliant_anchor_dominates_offroad():
    sc = straight_road_scene(speed=10.0, half_width=4.0)
    t = 0.5 * np.arange(1, 7)
    on = np.column_stack([10 * t, np.zeros(6)])
    off = np.column_stack([10 * t, np.linspace(1.5, 9.0, 6)])
    pos = np.stack([off, on])
    head = np.arctan2(np.diff(np.concatenate([np.zeros((2, 1, 2)), pos], axis=1), axis=1)[..., 1],
                      np.diff(np.concatenate([np.zeros((2, 1, 2)), pos], axis=1), axis=1)[..., 0])
    _, masks, _, rewards = evaluate_batch(pos, head, np.full((2, 6), 10.0), sc, np.zeros((0, 6, 5)),
                                          default_hierarchy())
    assert not masks[0, 1] and masks[1, 1]
    prior = prior_from_rewards(rewards, BoltzmannConfig(zeta=1.0), 100.0)
    assert prior.concentration[1] > 99


def test_compute_prior_sums_to_strength(small_id_data):
    hier = default_hierarchy()
    for sc in small_id_data[:3]:
        a = generate_anchors(sc)
        prior = compute_prior(a, sc, hier, n_prior=25.0)
        assert prior.K == a.K
        assert prior.total == pytest.approx(25.0 + a.K * ALPHA_FLOOR)
        assert np.all(prior.concentration >= ALPHA_FLOOR)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=30), st.floats(0, 1e6))
def test_prior_preserves_reward_order(rewards, n):
    c = prior_from_rewards(rewards, BoltzmannConfig(), n).concentration
    r = np.array(rewards)
    i, j = np.argmax(r), np.argmin(r)
    assert c[i] >= c[j]


def test_rh_plan_tie_break_and_argmax():
    assert rh_plan(None, DirichletBelief(np.ones(5))) == 0
    assert rh_plan(None, DirichletBelief(np.array([1.0, 3.0, 3.0]))) == 1


def test_dirichlet_belief_validation():
    with pytest.raises(ValueError):
        DirichletBelief(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        DirichletBelief(np.array([]))
    b = DirichletBelief(np.array([1.0, 3.0]))
    np.testing.assert_allclose(b.mean, [0.25, 0.75])
    assert b.total == 4.0
