import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evplan.fusion import (
    MODES,
    Mixture,
    fuse,
    plan,
    plan_from_inputs,
    plan_many,
    predictive_mixture,
    prepare,
    select,
    uniform_prior,
)
from evplan.net import NetConfig, init_params
from evplan.rh_planner import ALPHA_FLOOR, BoltzmannConfig, DirichletBelief, boltzmann_distribution
from evplan.rules import default_hierarchy

CFG = NetConfig(d=8, K=10, n_hist_blocks=1, n_joint_blocks=1, n_flow_layers=2, n_budget=50.0)


@pytest.fixture(scope="module")
def params():
    p = init_params(CFG, 0)
    p.flat[:] += 0.2 * np.random.default_rng(0).standard_normal(p.size)
    return p


@pytest.fixture(scope="module")
def inputs(params, small_id_data):
    return prepare(small_id_data.scenes, params, default_hierarchy())


# --- fuse ------------------------------------------------------------------------------


def test_fuse_example():
    post = fuse(DirichletBelief(np.array([1.0, 1.0])), [3.0, 1.0])
    np.testing.assert_allclose(post.concentration, [4.0, 2.0])
    np.testing.assert_allclose(post.mean, [2 / 3, 1 / 3])


def test_fuse_vanishing_evidence_returns_prior():
    prior = DirichletBelief(np.array([2.0, 5.0, 3.0]))
    np.testing.assert_allclose(fuse(prior, np.full(3, 1e-12)).mean, prior.mean, atol=1e-9)


def test_fuse_floor_prior_gives_normalized_evidence():
    n = np.array([4.0, 0.5, 2.5, 3.0])
    np.testing.assert_allclose(fuse(uniform_prior(4), n).mean, n / n.sum(), atol=1e-6)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse(uniform_prior(3), [1.0, 2.0])


def simplex_posterior_mean(alpha, n, m=200):
    """Midpoint quadrature of q * Dir(q; alpha) * prod q^n over the 2-simplex."""
    h = 1.0 / m
    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    lower = (i + j) <= m - 2
    q1, q2 = (i + 1 / 3) * h, (j + 1 / 3) * h  # centroids of lower triangles
    r1, r2 = (i + 2 / 3) * h, (j + 2 / 3) * h  # centroids of upper triangles
    pts = [np.column_stack([q1.ravel(), q2.ravel(), 1 - q1.ravel() - q2.ravel()])]
    mask = [np.ones(q1.size, bool)]
    pts.append(np.column_stack([r1.ravel(), r2.ravel(), 1 - r1.ravel() - r2.ravel()]))
    mask.append(lower.ravel())
    q = np.vstack(pts)[np.concatenate(mask)]
    q = q[(q > 0).all(axis=1)]
    log_w = ((np.asarray(alpha) - 1 + np.asarray(n)) * np.log(q)).sum(axis=1)
    w = np.exp(log_w - log_w.max())
    return (q * w[:, None]).sum(axis=0) / w.sum()


@pytest.mark.parametrize(
    "alpha,n", [((1, 1, 1), (3, 1, 0)), ((2, 1, 1), (0, 4, 2)), ((1, 3, 2), (5, 5, 1)), ((1, 1, 2), (0, 0, 0))]
)
def test_fuse_matches_simplex_quadrature(alpha, n):
    post = fuse(DirichletBelief(np.array(alpha, float)), np.array(n, float))
    np.testing.assert_allclose(post.mean, simplex_posterior_mean(alpha, n), atol=1e-3)


@given(
    st.lists(st.floats(0.01, 100), min_size=2, max_size=12),
    st.lists(st.floats(0.01, 100), min_size=12, max_size=12),
    st.floats(1e-3, 1e3),
)
def test_selection_scale_invariance(prior, evidence, c):
    prior = np.array(prior)
    n = np.array(evidence[: len(prior)])
    a = select(fuse(DirichletBelief(prior), n).mean)
    b = select(fuse(DirichletBelief(c * prior), c * n).mean)
    m = fuse(DirichletBelief(prior), n).concentration
    if np.sort(m)[-1] - np.sort(m)[-2] > 1e-9 * m.max():
        assert a == b


def test_select_tie_break():
    assert select(np.array([0.25, 0.5, 0.25, 0.0]) + np.array([0, 0, 0.25, 0])) == 1


# --- mixture ---------------------------------------------------------------------------------


def test_mixture_single_component_at_mean():
    means = np.random.default_rng(0).normal(size=(1, 6, 2))
    assert Mixture(np.ones(1), means).nll(means[0]) == pytest.approx(6 * math.log(2 * math.pi))


def test_mixture_degenerate_weights():
    rng = np.random.default_rng(1)
    means = rng.normal(size=(2, 6, 2))
    x = rng.normal(size=(6, 2))
    mix = Mixture(np.array([1.0, 0.0]), means)
    assert mix.nll(x) == pytest.approx(Mixture(np.ones(1), means[:1]).nll(x), abs=1e-12)


def test_mixture_matches_direct_sum():
    rng = np.random.default_rng(2)
    means = rng.normal(scale=0.5, size=(3, 6, 2))
    w = rng.dirichlet(np.ones(3))
    x = rng.normal(scale=0.5, size=(6, 2))
    direct = 0.0
    for k in range(3):
        dens = 1.0
        for t in range(6):
            d2 = float(((x[t] - means[k, t]) ** 2).sum())
            dens *= math.exp(-0.5 * d2) / (2 * math.pi)
        direct += w[k] * dens
    assert Mixture(w, means).nll(x) == pytest.approx(-math.log(direct), abs=1e-10)


def test_mixture_far_query_stays_finite():
    means = np.zeros((2, 6, 2))
    assert np.isfinite(Mixture(np.array([0.5, 0.5]), means).nll(np.full((6, 2), 1e3)))


# --- planning modes -----------------------------------------------------------------------------


def test_output_invariants(inputs):
    for mode in MODES:
        for out in plan_many(inputs, mode, n_prior=7.0):
            assert abs(out.marginal.sum() - 1) < 1e-9
            assert out.selected_index == int(np.argmax(out.marginal))
            assert len(out.refined_trajectories) == out.K == CFG.K
            assert out.mode == mode


def test_zero_prior_matches_il(inputs):
    for i in inputs:
        a = plan_from_inputs(i, "rulefuser", n_prior=0.0)
        b = plan_from_inputs(i, "il")
        np.testing.assert_allclose(a.marginal, b.marginal, atol=1e-6)


def test_huge_prior_matches_rh(inputs):
    agree = [plan_from_inputs(i, "rulefuser", n_prior=1e9).selected_index == plan_from_inputs(i, "rh").selected_index
             for i in inputs]
    assert np.mean(agree) >= 0.99


def test_tv_to_prior_non_increasing(inputs):
    grid = np.concatenate([[0.0], np.logspace(-1, 9, 14)])
    for i in inputs:
        p = boltzmann_distribution(i.rewards, BoltzmannConfig(1.0))
        tv = [0.5 * np.abs(plan_from_inputs(i, "rulefuser", n_prior=n).marginal - p).sum() for n in grid]
        assert np.all(np.diff(tv) <= 1e-12)


def test_rh_mode_has_no_evidence_and_unrefined_plans(inputs):
    out = plan_from_inputs(inputs[0], "rh")
    assert out.total_evidence == 0.0
    np.testing.assert_allclose(out.means, inputs[0].anchors.positions, atol=1e-12)


def test_mix_endpoints(inputs):
    i = inputs[1]
    il = plan_from_inputs(i, "il")
    np.testing.assert_allclose(plan_from_inputs(i, "mix", lam=1.0).marginal, il.marginal, atol=1e-12)
    rh = boltzmann_distribution(i.rewards, BoltzmannConfig(1.0))
    np.testing.assert_allclose(plan_from_inputs(i, "mix", lam=0.0).marginal, rh, atol=1e-12)
    with pytest.raises(ValueError):
        plan_from_inputs(i, "mix", lam=1.5)


def test_plan_requires_mode_inputs(small_id_data, params):
    sc = small_id_data.scenes[0]
    with pytest.raises(ValueError):
        plan(sc, "il", None, default_hierarchy())
    with pytest.raises(ValueError):
        plan(sc, "rh", params, None)
    with pytest.raises(ValueError):
        plan(sc, "bogus", params, default_hierarchy())


def test_plan_single_scene_matches_batch(small_id_data, params, inputs):
    sc = small_id_data.scenes[2]
    one = plan(sc, "rulefuser", params, default_hierarchy(), n_prior=5.0)
    many = plan_from_inputs(inputs[2], "rulefuser", n_prior=5.0)
    np.testing.assert_allclose(one.marginal, many.marginal, rtol=1e-9)
    assert one.selected_index == many.selected_index


def test_rh_selects_compliant_over_offroad():
    from conftest import straight_road_scene
    from evplan.anchors import generate_anchors
    from evplan.rh_planner import score_anchors

    sc = straight_road_scene(speed=10.0, half_width=2.0)
    out = plan(sc, "rh", None, default_hierarchy())
    a = generate_anchors(sc)
    masks = score_anchors(a, sc, default_hierarchy()).masks
    assert masks[out.selected_index, 1]
    assert not masks[:, 1].all()


def test_predictive_mixture_uses_marginal(inputs):
    out = plan_from_inputs(inputs[0], "rulefuser", n_prior=3.0)
    mix = predictive_mixture(out)
    np.testing.assert_array_equal(mix.weights, out.marginal)
    assert mix.means.shape == (CFG.K, 6, 2)
    assert ALPHA_FLOOR > 0
