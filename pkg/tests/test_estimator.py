import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from subsmc.errors import ConfigError, NumericOverflowError
from subsmc.estimator import (
    LogLikEstimate,
    SubsampleLayout,
    annealed_log_estimate,
    build_control_variate,
    estimate_loglik,
    exact_loglik,
    q_term,
    q_total,
)
from subsmc.model import Dataset, ModelSpec, Problem, log_density_term

from .conftest import make_problem, normal_prior


def enumerate_mean(prob, cv, theta, m):
    vals = [estimate_loglik(prob, cv, np.array(u), theta).ell_hat
            for u in itertools.product(range(prob.n), repeat=m)]
    return float(np.mean(vals))


def test_unbiased_by_enumeration(logistic_toy):
    rng = np.random.default_rng(0)
    cv = build_control_variate(logistic_toy, np.array([0.2, -0.1]))
    for _ in range(20):
        theta = rng.normal(0, 1, 2)
        assert enumerate_mean(logistic_toy, cv, theta, 2) == pytest.approx(logistic_toy.loglik(theta), abs=1e-10)


@pytest.mark.parametrize("n,m", [(4, 2), (6, 3), (5, 1)])
def test_unbiased_by_enumeration_all_families(family, n, m):
    prob = make_problem(family, n=n, seed=n + m)
    for order in (1, 2):
        cv = build_control_variate(prob, np.array([0.1, 0.0, -0.1]), order)
        theta = np.array([0.3, -0.2, 0.1])
        assert enumerate_mean(prob, cv, theta, m) == pytest.approx(prob.loglik(theta), abs=1e-10)


def test_gaussian_second_order_is_exact():
    prob = make_problem("gaussian_linear", n=200, sigma2=1.5)
    cv = build_control_variate(prob, np.zeros(3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        theta = rng.normal(0, 2, 3)
        u = rng.integers(0, prob.n, 17)
        est = estimate_loglik(prob, cv, u, theta)
        assert est.ell_hat == pytest.approx(prob.loglik(theta), rel=1e-12, abs=1e-10)
        assert abs(est.var_hat) < 1e-10
        assert q_total(cv, theta) == pytest.approx(prob.loglik(theta), rel=1e-12)
        for k in u[:3]:
            assert q_term(cv, prob, theta, k) == pytest.approx(log_density_term(prob.spec, prob.data, theta, k), abs=1e-10)


def test_complete_identity_draw_is_exact(family):
    prob = make_problem(family, n=30)
    cv = build_control_variate(prob, np.array([0.05, 0.1, 0.0]))
    theta = np.array([0.2, -0.3, 0.25])
    est = estimate_loglik(prob, cv, np.arange(prob.n), theta)
    assert est.ell_hat == pytest.approx(prob.loglik(theta), rel=1e-12)


def test_control_variate_summaries(family):
    prob = make_problem(family, n=40)
    centre = np.array([0.1, -0.2, 0.3])
    cv = build_control_variate(prob, centre)
    direct = math.fsum(log_density_term(prob.spec, prob.data, centre, k) for k in range(prob.n))
    assert cv.A == pytest.approx(direct, rel=1e-12)
    np.testing.assert_array_equal(cv.C, cv.C.T)
    assert q_total(cv, centre) == cv.A
    cv1 = build_control_variate(prob, centre, order=1)
    assert cv1.C is None and cv1.f2_bar is None
    t1, t2 = centre + 0.1, centre - 0.3
    # first-order surrogate is affine
    assert q_total(cv1, 0.5 * (t1 + t2)) == pytest.approx(0.5 * (q_total(cv1, t1) + q_total(cv1, t2)), rel=1e-12)


def test_q_total_hand_expansion_one_dimension():
    # logistic, d=1: l(t) = y x t - log(1 + exp(x t)); expand by hand at c
    x = np.array([0.5, -1.0, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    prob = Problem(ModelSpec("logistic", normal_prior(1)), Dataset(y, x[:, None]))
    c = 0.3
    cv = build_control_variate(prob, np.array([c]))
    s = 1 / (1 + np.exp(-x * c))
    A = np.sum(y * x * c - np.log1p(np.exp(x * c)))
    B = np.sum((y - s) * x)
    C = -np.sum(s * (1 - s) * x * x)
    for t in (-1.0, 0.0, 0.7, 2.5):
        expect = A + B * (t - c) + 0.5 * C * (t - c) ** 2
        assert q_total(cv, np.array([t])) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_exact_loglik_kahan_oracle(family):
    prob = make_problem(family, n=2000, seed=9)
    theta = np.array([0.2, 0.1, -0.4])
    terms = [log_density_term(prob.spec, prob.data, theta, k) for k in range(prob.n)]
    total, comp = 0.0, 0.0
    for v in terms:
        yk = v - comp
        t = total + yk
        comp = (t - total) - yk
        total = t
    est = exact_loglik(prob, theta)
    assert est.var_hat == 0.0
    assert est.ell_hat == pytest.approx(total, rel=1e-10)
    single = Problem(prob.spec, Dataset(prob.y[:1], prob.X[:1]))
    assert exact_loglik(single, theta).ell_hat == pytest.approx(terms[0], rel=1e-14)


def test_variance_formula_matches_direct():
    prob = make_problem("student_t", n=100, seed=4)
    cv = build_control_variate(prob, np.zeros(3))
    theta = np.array([0.4, -0.2, 0.3])
    u = np.random.default_rng(2).integers(0, prob.n, 20)
    d = np.array([log_density_term(prob.spec, prob.data, theta, k) - q_term(cv, prob, theta, k) for k in u])
    est = estimate_loglik(prob, cv, u, theta)
    n, m = prob.n, u.size
    assert est.var_hat == pytest.approx((n / m) ** 2 * np.sum((d - d.mean()) ** 2), rel=1e-10)
    assert est.ell_hat == pytest.approx(q_total(cv, theta) + (n / m) * d.sum(), rel=1e-12)


@given(st.permutations(list(range(12))))
def test_variance_permutation_invariant(perm):
    prob = make_problem("logistic", n=60, seed=1)
    cv = build_control_variate(prob, np.zeros(3))
    theta = np.array([0.3, 0.3, -0.6])
    u = np.arange(0, 60, 5)
    a = estimate_loglik(prob, cv, u, theta)
    b = estimate_loglik(prob, cv, u[list(perm)], theta)
    assert b.var_hat == pytest.approx(a.var_hat, rel=1e-12)
    assert b.ell_hat == pytest.approx(a.ell_hat, rel=1e-12)
    assert a.var_hat >= 0


def test_variance_scales_inversely_with_m():
    prob = make_problem("logistic", n=2000, seed=7)
    cv = build_control_variate(prob, np.zeros(3))
    theta = np.array([0.5, -0.5, 0.4])
    rng = np.random.default_rng(3)
    ms = np.array([25, 50, 100, 200, 400])
    variances = []
    for m in ms:
        vals = [estimate_loglik(prob, cv, rng.integers(0, prob.n, m), theta).ell_hat for _ in range(2000)]
        variances.append(np.var(vals))
    slope = np.polyfit(np.log(ms), np.log(variances), 1)[0]
    assert abs(slope + 1) < 0.3


def test_second_order_dominates_first(logistic_toy):
    prob = make_problem("logistic", n=500, seed=2)
    centre = np.array([0.1, 0.2, -0.1])
    cv1 = build_control_variate(prob, centre, 1)
    cv2 = build_control_variate(prob, centre, 2)
    theta = centre + 0.05
    rng = np.random.default_rng(5)
    wins = 0
    for _ in range(1000):
        u = rng.integers(0, prob.n, 20)
        wins += estimate_loglik(prob, cv2, u, theta).var_hat <= estimate_loglik(prob, cv1, u, theta).var_hat
    assert stats.binomtest(wins, 1000, 0.5, alternative="greater").pvalue < 0.01


def test_annealed_log_estimate():
    est = LogLikEstimate(-12.5, 3.0)
    assert annealed_log_estimate(est, 0.0) == 0.0
    assert annealed_log_estimate(est, 1.0) == -12.5 - 1.5
    assert annealed_log_estimate(LogLikEstimate(-4.0, 0.0), 0.3) == pytest.approx(-1.2)


def test_overflow_names_subsample_index():
    X = np.array([[1.0], [1.0], [1e200]])
    prob = Problem(ModelSpec("gaussian_linear", normal_prior(1)), Dataset(np.zeros(3), X))
    cv = build_control_variate(prob, np.zeros(1))
    with pytest.raises(NumericOverflowError) as err:
        estimate_loglik(prob, cv, np.array([0, 2, 1]), np.array([1e200]))
    assert err.value.index in (0, 1, 2)
    with pytest.raises(NumericOverflowError) as err:
        build_control_variate(prob, np.array([1e200]))


def test_layout_validation():
    with pytest.raises(ConfigError, match="G must divide m"):
        SubsampleLayout.single(5000, 1000, 7)
    with pytest.raises(ConfigError):
        SubsampleLayout.single(10, 11, 1)
    layout = SubsampleLayout.by_group(np.repeat([0, 1], [20, 2000]), [5, 100], [1, 50])
    u = layout.draw(np.random.default_rng(0))
    assert u.shape == (105,)
    assert np.all(u[:5] < 20) and np.all(u[5:] >= 20)
    assert layout.block_bounds(1, 49) == (103, 105)


def test_redraw_blocks_one_block_per_stratum():
    layout = SubsampleLayout.by_group(np.repeat([0, 1, 2], [30, 40, 500]), [6, 4, 100], [3, 1, 50])
    rng = np.random.default_rng(3)
    u = layout.draw(rng)
    hits = np.zeros((3, 50))
    for _ in range(3000):
        new = layout.redraw_blocks(u, rng)
        assert np.all(new[:6] < 30) and np.all((new[6:10] >= 30) & (new[6:10] < 70)) and np.all(new[10:] >= 70)
        for s in range(3):
            lo, hi = layout.starts[s], layout.starts[s + 1]
            width = (hi - lo) // layout.blocks[s]
            changed = np.flatnonzero(new[lo:hi] != u[lo:hi]) // width
            # redraws can repeat an index, so at most one block differs
            assert np.unique(changed).size <= 1
            if changed.size:
                hits[s, changed[0]] += 1
        u = new
    # the changed block is uniform over each stratum's blocks
    for s, g in enumerate(layout.blocks):
        counts = hits[s, :g]
        if g > 1:
            assert stats.chisquare(counts).pvalue > 1e-3
    assert hits[1, 0] > 2900


def test_stratified_estimator_unbiased_by_enumeration():
    prob = make_problem("poisson", n=5, seed=11)
    layout = SubsampleLayout([np.array([0, 1]), np.array([2, 3, 4])], [1, 2], [1, 1])
    cv = build_control_variate(prob, np.zeros(3))
    theta = np.array([0.3, -0.1, 0.2])
    vals = [estimate_loglik(prob, cv, np.array([a, b, c]), theta, layout).ell_hat
            for a in (0, 1) for b in (2, 3, 4) for c in (2, 3, 4)]
    assert np.mean(vals) == pytest.approx(prob.loglik(theta), abs=1e-10)
