import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vutsim.cost import (DEFAULT_PRIOR, FEATURE_NAMES, N_FEATURES, WHEELBASE, CostWeights,
                         DistributionalCostWeights, FeatureError, FitError, LaneTable, ParameterError,
                         bayesian_update, cost_tensor, efficiency_sd_gap, evaluate_cost, extract_cost_features,
                         features_array, fit_weights, fit_weights_from_features, load_distribution, load_key,
                         sample_key, save_distribution, save_key, select_key, time_derivative)
from vutsim.numeric import ParamStore, grad_check
from vutsim.scenario import DT, VutFuturePlan
from vutsim.synth import Path

T = np.arange(1, 51) * DT


def straight_lane(limit=10.0, heading=0.0, origin=(0.0, 0.0)):
    return Path(origin, heading).line(200.0).lane(limit)


def plan(xy, start=(0.0, 0.0), heading=0.0):
    return VutFuturePlan.from_xy(np.asarray(xy), start, heading)


def test_constant_speed_on_centerline_is_free():
    lane = straight_lane(limit=10.0)
    p = plan(np.column_stack([10.0 * T + 5.0, np.zeros(50)]), start=(5.0, 0.0))
    f = extract_cost_features(p, [lane])
    assert np.allclose(f.as_array(), 0.0, atol=1e-20)


def test_linear_speed_profile():
    lane = straight_lane(limit=50.0)
    x = T + T ** 2  # v = 1 + 2t
    f = extract_cost_features(plan(np.column_stack([x, np.zeros(50)])), [lane])
    assert f.f_accel == pytest.approx(4.0, abs=1e-9)
    assert f.f_jerk == pytest.approx(0.0, abs=1e-9)
    assert f.f_steer == 0.0 and f.f_center == 0.0


def test_circular_arc_steering_matches_closed_form():
    r, v = 50.0, 10.0
    lane = Path((0.0, -r), 0.0).arc(r, math.pi).lane(v)
    ang = v * T / r
    xy = np.column_stack([r * np.sin(ang), -r * np.cos(ang)])
    f = extract_cost_features(plan(xy, start=(0.0, -r)), [lane])
    expect = (WHEELBASE / r) ** 2
    assert abs(f.f_steer - expect) / expect < 0.01
    # one-sided end stencils leave a small residue; interior steps are jerk-free
    assert f.f_jerk < 1e-2
    pts = torch.as_tensor(np.vstack([[0.0, -r], xy]))
    speed = torch.linalg.norm(time_derivative(pts, DT, dim=-2), dim=-1)
    jerk = time_derivative(time_derivative(speed))
    assert float(jerk[4:-4].abs().max()) < 1e-6


def test_time_derivative_exact_on_quadratics(rng):
    c = rng.normal(size=3)
    t = torch.arange(20, dtype=torch.float64) * DT
    f = c[0] + c[1] * t + c[2] * t ** 2
    assert torch.allclose(time_derivative(f), c[1] + 2 * c[2] * t, atol=1e-11)


def test_no_lanes_is_feature_error():
    with pytest.raises(FeatureError):
        features_array([plan(np.column_stack([T, np.zeros(50)]))], [])


def test_cost_examples(rng):
    lane = straight_lane()
    p = plan(np.column_stack([8 * T + 0.5 * T ** 2, 0.3 * np.sin(T)]))
    f = extract_cost_features(p, [lane]).as_array()
    assert evaluate_cost(p, CostWeights(np.zeros(7)), [lane]) == 0.0
    assert evaluate_cost(p, CostWeights(np.eye(7)[1]), [lane]) == f[1]
    w = rng.uniform(0, 3, 7)
    assert evaluate_cost(p, CostWeights(w), [lane]) == pytest.approx(sum(a * b for a, b in zip(w, f)), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(0, 2 ** 31 - 1))
def test_cost_linear_in_weights(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    lane = straight_lane()
    p = plan(np.column_stack([9 * T, rng.normal(scale=0.2, size=50)]))
    w1, w2 = rng.uniform(0, 2, 7), rng.uniform(0, 2, 7)
    f = extract_cost_features(p, [lane]).as_array()
    lhs = float(np.dot(alpha * w1 + beta * w2, f))
    rhs = alpha * float(np.dot(w1, f)) + beta * float(np.dot(w2, f))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
    assert evaluate_cost(p, CostWeights(alpha * w1 + beta * w2), [lane]) == pytest.approx(lhs, rel=1e-12, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-math.pi, math.pi))
def test_features_rigid_motion_invariant(dx, dy, th):
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    xy = np.column_stack([7 * T + 0.4 * T ** 2, 0.5 * np.sin(1.3 * T)])
    base = extract_cost_features(plan(xy, (0.0, 0.0), 0.0), [straight_lane(origin=(-20.0, 0.0))])
    moved_lane = Path(rot @ np.array([-20.0, 0.0]) + [dx, dy], th).line(200.0).lane(10.0)
    moved = extract_cost_features(plan(xy @ rot.T + [dx, dy], (dx, dy), th), [moved_lane])
    assert np.allclose(base.as_array(), moved.as_array(), rtol=1e-9, atol=1e-9)


def test_cost_gradient_passes_grad_check(rng):
    lanes = LaneTable.from_lanes([straight_lane()])
    xy0 = np.column_stack([8 * T + 0.3 * T ** 2, 0.4 * np.sin(T)]) + rng.normal(scale=0.01, size=(50, 2))
    ps = ParamStore({"xy": xy0})
    key = CostWeights(rng.uniform(0.1, 2, 7))
    report = grad_check(lambda: cost_tensor(ps["xy"], key, lanes), ps)
    assert report.n_checked == 100 and report.ok, report.max_rel_error


# --- fitting ------------------------------------------------------------------

def _jerk_demo():
    truth = np.array([1.0, 2.0, 0.1, 3.0, 1.0, 0.5, 0.2])
    cands = np.tile(truth, (4, 1))
    cands[:, 2] += np.array([0.5, 1.0, 2.0, 0.0])
    return truth, cands


def test_fit_puts_mass_on_discriminating_feature():
    truth, cands = _jerk_demo()
    w = fit_weights_from_features([truth], [cands]).w
    jerk = FEATURE_NAMES.index("jerk")
    assert w[jerk] > 0
    costs = np.vstack([truth, cands]) @ w
    assert np.argmin(costs[:-1]) == 0 and np.all(costs[1:4] > costs[0])


def test_fit_fixed_point():
    truth, cands = _jerk_demo()
    init = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    w = fit_weights_from_features([truth], [cands], init=init).w
    assert np.array_equal(w, init)


def test_fit_duplicated_demonstrations_same_ranking():
    truth, cands = _jerk_demo()
    w1 = fit_weights_from_features([truth], [cands]).w
    w2 = fit_weights_from_features([truth, truth], [cands, cands]).w
    order = lambda w: np.argsort(cands @ w, kind="stable")  # noqa: E731
    assert np.array_equal(order(w1), order(w2))
    assert np.allclose(w1, w2)


def test_fit_degenerate_raises():
    truth = np.ones(7)
    with pytest.raises(FitError):
        fit_weights_from_features([truth], [np.tile(truth, (3, 1))])
    with pytest.raises(FitError):
        fit_weights([], [])


# --- distribution -------------------------------------------------------------

def test_update_examples():
    prior = DistributionalCostWeights(np.ones(7), np.ones(7))
    assert bayesian_update(prior, []) is prior
    post = bayesian_update(prior, [CostWeights(np.full(7, 3.0))], np.ones(7))
    assert np.allclose(post.mu, 2.0) and np.allclose(post.sigma2, 0.5)
    assert np.all(post.sigma2 < prior.sigma2)


def test_update_matches_grid_integration():
    mu0, s0, noise = 1.3, 0.7, 0.4
    obs = [2.1, 0.4, 3.3]
    x = np.linspace(mu0 - 12, mu0 + 12, 400001)
    logp = -0.5 * (x - mu0) ** 2 / s0 - sum(0.5 * (o - x) ** 2 / noise for o in obs)
    p = np.exp(logp - logp.max())
    p /= np.trapezoid(p, x)
    m = np.trapezoid(x * p, x)
    v = np.trapezoid((x - m) ** 2 * p, x)
    prior = DistributionalCostWeights(np.full(7, mu0), np.full(7, s0))
    post = bayesian_update(prior, [CostWeights(np.full(7, o)) for o in obs], np.full(7, noise))
    assert abs(post.mu[0] - m) < 1e-6 and abs(post.sigma2[0] - v) < 1e-6


def test_update_order_independent(rng):
    obs = [CostWeights(rng.uniform(0, 5, 7)) for _ in range(5)]
    batch = bayesian_update(DEFAULT_PRIOR, obs)
    seq = DEFAULT_PRIOR
    for o in obs[::-1]:
        seq = bayesian_update(seq, [o])
    assert np.allclose(batch.mu, seq.mu, rtol=1e-12) and np.allclose(batch.sigma2, seq.sigma2, rtol=1e-12)


def test_invalid_distribution_and_weights():
    with pytest.raises(ParameterError):
        DistributionalCostWeights(np.ones(7), np.zeros(7))
    with pytest.raises(ParameterError):
        CostWeights(-np.ones(7))
    with pytest.raises(ParameterError):
        bayesian_update(DEFAULT_PRIOR, [CostWeights(np.ones(7))], np.zeros(7))


def test_sampling_degenerate_and_deterministic():
    d = DistributionalCostWeights(np.arange(1.0, 8.0), np.full(7, 1e-12))
    assert np.allclose(sample_key(d, 3).w, d.mu, atol=1e-5)
    assert np.array_equal(sample_key(DEFAULT_PRIOR, 9).w, sample_key(DEFAULT_PRIOR, 9).w)


def test_sampling_monte_carlo_mean():
    d = DistributionalCostWeights(np.array([5.0, 4.0, 10.0, 8.0, 6.0, 5.0, 20.0]), np.full(7, 1.0))
    n = 100_000
    draws = np.stack([sample_key(d, s).w for s in range(n)])
    se = np.sqrt(d.sigma2 / n)
    assert np.all(np.abs(draws.mean(0) - d.mu) < 3 * se)


def test_select_key_and_gap():
    k = select_key(DEFAULT_PRIOR, [2.0, 0, 0, 0, 0, 0, 0])
    assert k.w[0] == pytest.approx(DEFAULT_PRIOR.mu[0] + 2 * DEFAULT_PRIOR.std[0])
    assert efficiency_sd_gap(DEFAULT_PRIOR, k, DEFAULT_PRIOR.mean_key()) == pytest.approx(2.0)
    assert select_key(DEFAULT_PRIOR, -10 * np.ones(7)).w.min() == 0.0


def test_key_and_distribution_files(tmp_path):
    k = CostWeights(np.arange(7.0))
    save_key(k, tmp_path / "k.json")
    assert np.array_equal(load_key(tmp_path / "k.json").w, k.w)
    save_distribution(DEFAULT_PRIOR, tmp_path / "d.json")
    back = load_distribution(tmp_path / "d.json")
    assert np.array_equal(back.mu, DEFAULT_PRIOR.mu) and np.array_equal(back.sigma2, DEFAULT_PRIOR.sigma2)
    (tmp_path / "bad.json").write_text('{"format": "cost-key/v1", "weights": {"speed": 1}}')
    with pytest.raises(ParameterError):
        load_key(tmp_path / "bad.json")
    assert N_FEATURES == 7
