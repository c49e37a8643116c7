import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplan.rules import (
    RULE_NAMES,
    RuleParams,
    always,
    conj,
    default_hierarchy,
    disj,
    evaluate_batch,
    evaluate_rules,
    eventually,
    hierarchy_rank,
    hierarchy_reward,
    load_rule_config,
    neg,
    predicate,
    ranks_from_masks,
    safety_rank_2rule,
    stl_robustness,
)
from evplan.anchors import generate_anchors
from evplan.rh_planner import predict_agent_boxes_cv
from evplan.scene import AgentState, EgoState, MapElement, Trajectory

from conftest import straight_road_scene

# --- STL against a direct recursive interpreter --------------------------------

LENGTH = 8


def oracle(expr, sig, t):
    k = expr.kind
    if k == "predicate":
        return sig[expr.signal][t]
    if k == "not":
        return -oracle(expr.children[0], sig, t)
    if k == "and":
        return min(oracle(c, sig, t) for c in expr.children)
    if k == "or":
        return max(oracle(c, sig, t) for c in expr.children)
    a, b = expr.interval
    vals = [oracle(expr.children[0], sig, t + i) for i in range(a, b + 1)]
    return min(vals) if k == "always" else max(vals)


def horizon(expr):
    if expr.kind in ("always", "eventually"):
        return expr.interval[1] + horizon(expr.children[0])
    return max((horizon(c) for c in expr.children), default=0)


def formulas(depth):
    leaf = st.sampled_from(["x", "y", "z"]).map(predicate)
    if depth == 0:
        return leaf
    sub = formulas(depth - 1)
    window = st.tuples(st.integers(0, 2), st.integers(0, 2)).map(lambda ab: (ab[0], ab[0] + ab[1]))
    return st.one_of(
        leaf,
        sub.map(neg),
        st.lists(sub, min_size=1, max_size=3).map(lambda cs: conj(*cs)),
        st.lists(sub, min_size=1, max_size=3).map(lambda cs: disj(*cs)),
        st.tuples(sub, window).map(lambda p: always(p[0], *p[1])),
        st.tuples(sub, window).map(lambda p: eventually(p[0], *p[1])),
    )


signal_values = st.lists(st.floats(-50, 50, allow_nan=False), min_size=LENGTH, max_size=LENGTH)


@given(formulas(3), signal_values, signal_values, signal_values)
def test_stl_matches_recursive_oracle(expr, x, y, z):
    sig = {"x": np.array(x), "y": np.array(y), "z": np.array(z)}
    if horizon(expr) >= LENGTH:
        with pytest.raises(ValueError):
            stl_robustness(expr, sig)
        return
    assert stl_robustness(expr, sig) == oracle(expr, sig, 0)


def test_stl_operator_examples():
    sig = {"x": np.array([3.0, -1.0, 2.0, 5.0])}
    x = predicate("x")
    assert stl_robustness(x, sig) == 3.0
    assert stl_robustness(~x, sig) == -3.0
    assert stl_robustness(always(x, 0, 3), sig) == -1.0
    assert stl_robustness(eventually(x, 1, 2), sig) == 2.0
    assert stl_robustness(x & always(x, 2, 3), sig) == 2.0
    assert stl_robustness(x | ~x, sig) == 3.0


def test_stl_batched_leading_axes():
    sig = {"x": np.array([[1.0, 2.0], [-3.0, 4.0]])}
    np.testing.assert_array_equal(stl_robustness(always(predicate("x"), 0, 1), sig), [1.0, -3.0])


def test_stl_rejects_bad_nodes():
    with pytest.raises(ValueError):
        always(predicate("x"), 2, 1)
    with pytest.raises(ValueError):
        stl_robustness(predicate("x"), {"x": np.zeros(3), "y": np.zeros(4)})


# --- rule evaluation ---------------------------------------------------------------------


def cv_trajectory(speed, F=6, dt=0.5, y=0.0, H=4):
    return Trajectory(
        tuple(EgoState((speed * dt * (i + 1), y), 0.0, speed, H + i + 1) for i in range(F)), "anchor"
    )


def parked_agent(x, y=0.0, length=4.5, width=2.0, H=4):
    return tuple(AgentState(7, (x, y), 0.0, 0.0, length, width) for _ in range(H + 1))


def test_nominal_compliance_all_rules_satisfied():
    # just under the posted limit: at exactly the limit the speed margin is zero, which is not > 0
    sc = straight_road_scene(speed=14.5, half_width=10.0)
    res = evaluate_rules(cv_trajectory(14.5), sc, [], default_hierarchy())
    assert np.all(res.robustness > 0)
    assert res.rank == 1
    assert res.satisfied_mask.all()


def test_offroad_violation():
    sc = straight_road_scene(speed=10.0, half_width=5.0)
    states = list(cv_trajectory(10.0).states)
    s = states[3]
    states[3] = EgoState((s.position[0], 6.0), 0.0, s.speed, s.timestamp_index)  # 1 m beyond the edge
    res = evaluate_rules(Trajectory(tuple(states), "anchor"), sc, [], default_hierarchy())
    assert res.robustness[1] <= -1.0
    assert not res.satisfied_mask[1]


def aligned_signed_distance(ax, ay, al, aw, bx, by, bl, bw):
    gx = abs(ax - bx) - (al + bl) / 2
    gy = abs(ay - by) - (aw + bw) / 2
    if gx > 0 or gy > 0:
        return math.hypot(max(gx, 0.0), max(gy, 0.0))
    return max(gx, gy)


def test_collision_course_matches_dense_clearance_oracle():
    sc = straight_road_scene(speed=10.0, agents=(parked_agent(19.0),))
    traj = cv_trajectory(10.0)
    predicted = predict_agent_boxes_cv(sc, 6, 0.5)
    hier = default_hierarchy()
    rho, *_ = evaluate_batch(traj.positions[None], traj.headings[None], traj.speeds[None], sc, predicted, hier)
    el, ew = sc.ego_size
    # ego front first touches the parked car between steps 2 and 3
    assert aligned_signed_distance(10.0, 0, el, ew, 19.0, 0, 4.5, 2.0) > 0
    assert aligned_signed_distance(15.0, 0, el, ew, 19.0, 0, 4.5, 2.0) < 0
    times = np.linspace(0.5, 3.0, 1000)
    dense = min(aligned_signed_distance(10.0 * t, 0, el, ew, 19.0, 0, 4.5, 2.0) for t in times)
    assert rho[0, 0] < 0
    assert rho[0, 0] == pytest.approx(dense - 0.3, abs=1e-6)


def test_vacuous_rules_are_capped():
    sc = straight_road_scene(speed=10.0, with_route=False)
    res = evaluate_rules(cv_trajectory(10.0), sc, [], default_hierarchy())
    cap = RuleParams().cap
    for name in ("avoid_collision", "traffic_lights", "forward_progress", "near_route", "route_alignment"):
        assert res.robustness[RULE_NAMES.index(name)] == cap


def test_red_light_violation_and_compliance():
    line = MapElement("stop_line", ((20.0, -2.0), (20.0, 2.0)), light_state="red", red_interval=(0, 20))
    sc = straight_road_scene(speed=10.0, stop_lines=(line,))
    hier = default_hierarchy()
    through = evaluate_rules(cv_trajectory(10.0), sc, [], hier)
    assert through.robustness[2] < 0
    stop = evaluate_rules(cv_trajectory(2.0), sc, [], hier)
    assert stop.robustness[2] > 0


def test_speed_limit_rule():
    sc = straight_road_scene(speed=20.0, speed_limit=15.0)
    res = evaluate_rules(cv_trajectory(20.0), sc, [], default_hierarchy())
    assert res.robustness[3] == pytest.approx((15.0 - 20.0) / 2.0)


def test_rank_and_reward_consistent(small_id_data):
    hier = default_hierarchy()
    for sc in small_id_data[:4]:
        a = generate_anchors(sc)
        rho, masks, ranks, rewards = evaluate_batch(
            a.positions, a.headings, a.speeds, sc, predict_agent_boxes_cv(sc, 6, 0.5), hier
        )
        assert np.all(np.isfinite(rho))
        np.testing.assert_array_equal(masks, rho > 0)
        assert [hierarchy_rank(m) for m in masks] == list(ranks)
        order = np.argsort(ranks, kind="stable")
        assert np.all(np.diff(np.floor(rewards[order])) <= 0)


# --- hierarchy reward -------------------------------------------------------------------------


def test_reward_limit_all_satisfied():
    r = hierarchy_reward(np.ones(7, bool), np.full(7, 1e6))
    assert r == pytest.approx(127.5)


def test_reward_dominance_example():
    m1 = np.array([1, 0, 0, 0, 0, 0, 0], bool)
    m2 = np.array([0, 1, 1, 1, 1, 1, 1], bool)
    worst1 = hierarchy_reward(m1, np.where(m1, 1e-12, -1e6))
    best2 = hierarchy_reward(m2, np.where(m2, 1e6, 0.0))
    assert worst1 > best2


def test_reward_dominance_exhaustive():
    masks = np.array(list(itertools.product([False, True], repeat=7)))
    low = hierarchy_reward(masks, np.where(masks, 1e-300, -1e300))  # smallest reward each mask admits
    high = hierarchy_reward(masks, np.where(masks, 1e300, 0.0))  # largest
    ranks = ranks_from_masks(masks)
    better = ranks[:, None] < ranks[None, :]
    violations = better & ~(low[:, None] > high[None, :])
    assert better.sum() == 128 * 127 // 2
    assert violations.sum() == 0


def test_reward_rejects_length_mismatch():
    with pytest.raises(ValueError):
        hierarchy_reward(np.ones(7, bool), np.ones(6))


@given(
    st.lists(st.booleans(), min_size=7, max_size=7),
    st.lists(st.floats(-1e3, 1e3), min_size=7, max_size=7),
    st.integers(0, 6),
    st.floats(0, 1e3),
)
def test_reward_monotone_in_robustness(mask, rho, i, bump):
    mask = np.array(mask)
    rho = np.array(rho)
    up = rho.copy()
    up[i] += bump
    assert hierarchy_reward(mask, up) >= hierarchy_reward(mask, rho)


@given(st.floats(0.01, 100.0))
def test_rank_scale_invariance(factor):
    sc = straight_road_scene(speed=11.0, agents=(parked_agent(30.0, y=3.0),))
    a = generate_anchors(sc, K=20)
    boxes = predict_agent_boxes_cv(sc, 6, 0.5)
    hier = default_hierarchy()
    _, m1, r1, _ = evaluate_batch(a.positions, a.headings, a.speeds, sc, boxes, hier)
    _, m2, r2, _ = evaluate_batch(a.positions, a.headings, a.speeds, sc, boxes, hier.scaled(factor))
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(r1, r2)


def test_hierarchy_rank_examples():
    assert hierarchy_rank([True] * 7) == 1
    assert hierarchy_rank([False] * 7) == 128
    assert hierarchy_rank([True] * 6 + [False]) == 2
    assert hierarchy_rank([False] + [True] * 6) == 65


def test_safety_rank_two_rule_table():
    assert safety_rank_2rule(True, True) == 1
    assert safety_rank_2rule(True, False) == 2
    assert safety_rank_2rule(False, True) == 3
    assert safety_rank_2rule(False, False) == 4


# --- config ------------------------------------------------------------------------------------


def test_rule_config_file(tmp_path):
    p = tmp_path / "rules.cfg"
    p.write_text("d_max = 2.0  # metres\ncollision_margin=0.5\nscales = 1,1,1,1,1,1,1\n")
    params = load_rule_config(p)
    assert params.d_max == 2.0 and params.collision_margin == 0.5
    assert params.scales == (1.0,) * 7
    assert params.theta_max == RuleParams().theta_max


def test_rule_config_rejects_unknown_and_bad_scales(tmp_path):
    p = tmp_path / "rules.cfg"
    p.write_text("speed_bonus = 3\n")
    with pytest.raises(ValueError):
        load_rule_config(p)
    p.write_text("scales = 1,1\n")
    with pytest.raises(ValueError):
        load_rule_config(p)
