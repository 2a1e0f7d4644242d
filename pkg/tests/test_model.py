import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from subsmc.errors import ConfigError, NumericOverflowError
from subsmc.model import (
    Dataset,
    ModelSpec,
    PriorBlock,
    PriorSpec,
    Problem,
    SimDesign,
    grad_log_prior,
    grad_term,
    hessian_term,
    load_dataset,
    log_density_term,
    log_prior,
    save_dataset,
    simulate_dataset,
)

from .conftest import make_problem, normal_prior


def scipy_term(family, y, eta, nu=5.0, sigma2=1.0):
    if family == "logistic":
        p = 1.0 / (1.0 + math.exp(-eta))
        return math.log(p) if y == 1 else math.log1p(-p)
    if family == "poisson":
        return stats.poisson.logpmf(y, math.exp(eta))
    if family == "student_t":
        return stats.t.logpdf(y, nu, loc=eta)
    return stats.norm.logpdf(y, eta, math.sqrt(sigma2))


def test_log_density_term_matches_scipy(family):
    prob = make_problem(family, n=20)
    theta = np.array([0.2, -0.1, 0.3])
    for k in range(prob.n):
        eta = float(prob.X[k] @ theta)
        expect = scipy_term(family, prob.y[k], eta)
        assert log_density_term(prob.spec, prob.data, theta, k) == pytest.approx(expect, abs=1e-10)


def test_terms_sum_to_loglik(family):
    prob = make_problem(family, n=30)
    theta = np.array([0.1, 0.4, -0.2])
    total = sum(log_density_term(prob.spec, prob.data, theta, k) for k in range(prob.n))
    assert prob.loglik(theta) == pytest.approx(total, rel=1e-12)


def test_logistic_zero_row_gives_log_half():
    data = Dataset(np.array([1.0]), np.zeros((1, 2)))
    spec = ModelSpec("logistic", normal_prior(2))
    assert log_density_term(spec, data, np.zeros(2), 0) == pytest.approx(math.log(0.5), abs=1e-15)


def test_gaussian_mode_value():
    data = Dataset(np.array([0.7]), np.array([[0.7]]))
    spec = ModelSpec("gaussian_linear", normal_prior(1), sigma2=1.0)
    assert log_density_term(spec, data, np.ones(1), 0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_poisson_pmf_at_two():
    data = Dataset(np.array([2.0]), np.zeros((1, 1)))
    spec = ModelSpec("poisson", normal_prior(1))
    assert log_density_term(spec, data, np.zeros(1), 0) == pytest.approx(-1 - math.log(2), abs=1e-14)


def test_gaussian_gradient_and_hessian_closed_form():
    prob = make_problem("gaussian_linear", n=5, sigma2=2.0)
    theta = np.array([0.3, -0.2, 0.5])
    for k in range(prob.n):
        x = prob.X[k]
        r = prob.y[k] - x @ theta
        np.testing.assert_allclose(grad_term(prob.spec, prob.data, theta, k), r * x / 2.0, atol=1e-14)
        H = hessian_term(prob.spec, prob.data, theta, k)
        np.testing.assert_allclose(H, -np.outer(x, x) / 2.0, atol=1e-14)
        np.testing.assert_array_equal(H, hessian_term(prob.spec, prob.data, theta + 5.0, k))


def test_logistic_at_zero():
    prob = make_problem("logistic", n=6)
    for k in range(prob.n):
        x = prob.X[k]
        g = grad_term(prob.spec, prob.data, np.zeros(3), k)
        np.testing.assert_allclose(g, (prob.y[k] - 0.5) * x, atol=1e-15)
        np.testing.assert_allclose(hessian_term(prob.spec, prob.data, np.zeros(3), k), -0.25 * np.outer(x, x), atol=1e-15)


def fd_grad(f, theta, h=1e-5):
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def test_gradient_and_hessian_match_finite_differences(family):
    prob = make_problem(family, n=12, seed=3)
    theta = np.array([0.25, -0.15, 0.4])
    for k in range(prob.n):
        f = lambda t: log_density_term(prob.spec, prob.data, t, k)  # noqa: E731
        g = grad_term(prob.spec, prob.data, theta, k)
        assert np.max(np.abs(g - fd_grad(f, theta))) < 1e-6
        H = hessian_term(prob.spec, prob.data, theta, k)
        np.testing.assert_array_equal(H, H.T)
        H_fd = np.array([fd_grad(lambda t: grad_term(prob.spec, prob.data, t, k)[i], theta) for i in range(3)])
        assert np.max(np.abs(H - H_fd)) < 1e-6


def test_summed_gradient_matches_fd_of_sum(family):
    prob = make_problem(family, n=40, seed=5)
    theta = np.array([0.1, 0.2, -0.3])
    _, g = prob.loglik_grad(theta)
    fd = fd_grad(prob.loglik, theta)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_out_of_range_index():
    prob = make_problem("logistic", n=3)
    with pytest.raises(IndexError):
        log_density_term(prob.spec, prob.data, np.zeros(3), 3)


def test_overflow_names_observation():
    X = np.array([[0.0], [1.0], [1e300]])
    data = Dataset(np.array([0.0, 1.0, 2.0]), X)
    spec = ModelSpec("gaussian_linear", normal_prior(1))
    with pytest.raises(NumericOverflowError) as err:
        log_density_term(spec, data, np.array([1e10]), 2)
    assert err.value.index == 2
    with pytest.raises(NumericOverflowError) as err:
        Problem(spec, data).loglik(np.array([1e10]))
    assert err.value.index == 2


def test_poisson_clamp_is_finite_and_flagged():
    data = Dataset(np.array([3.0, 0.0]), np.array([[1.0], [1.0]]))
    prob = Problem(ModelSpec("poisson", normal_prior(1)), data)
    assert math.isfinite(prob.loglik(np.array([100.0])))
    assert prob.clamped_count(np.array([100.0, 2.0])) == 1


# --------------------------------------------------------------------------
# priors


def test_normal_prior_at_mean():
    for d in (1, 3, 7):
        assert log_prior(normal_prior(d), np.zeros(d)) == pytest.approx(-(d / 2) * math.log(20 * math.pi), rel=1e-14)


def test_truncated_prior_support_and_normalisation():
    prior = PriorSpec([PriorBlock("truncated_normal", 1, 0.0, 9.0)])
    assert log_prior(prior, np.array([-1e-9])) == -math.inf
    for mean in (0.0, 1.5, -2.0):
        p = PriorSpec([PriorBlock("truncated_normal", 1, mean, 9.0)])
        total, _ = integrate.quad(lambda t: math.exp(log_prior(p, np.array([t]))), 0, np.inf, epsabs=1e-12, epsrel=1e-12)
        assert abs(total - 1.0) < 1e-8


def test_mixture_prior_value_at_zero():
    prior = PriorSpec([PriorBlock("normal_mixture", 1, w=0.8, var1=0.01, var2=12.25)])
    expect = math.log(0.8 * stats.norm.pdf(0, 0, 0.1) + 0.2 * stats.norm.pdf(0, 0, 3.5))
    assert log_prior(prior, np.zeros(1)) == pytest.approx(expect, rel=1e-14)


@given(st.floats(-4, 4), st.floats(0.05, 0.95))
def test_mixture_prior_density_and_gradient(t, w):
    prior = PriorSpec([PriorBlock("normal_mixture", 1, w=w, var1=0.01, var2=12.25)])
    expect = math.log(w * stats.norm.pdf(t, 0, 0.1) + (1 - w) * stats.norm.pdf(t, 0, 3.5))
    assert log_prior(prior, np.array([t])) == pytest.approx(expect, rel=1e-10, abs=1e-10)
    fd = fd_grad(lambda x: log_prior(prior, x), np.array([t]), 1e-6)
    assert grad_log_prior(prior, np.array([t]))[0] == pytest.approx(fd[0], rel=1e-5, abs=1e-4)


def test_prior_sampling_moments():
    prior = PriorSpec([
        PriorBlock("normal", 2, 1.0, 4.0),
        PriorBlock("truncated_normal", 1, 0.0, 9.0),
        PriorBlock("normal_mixture", 1, w=0.8, var1=0.01, var2=12.25),
    ])
    draws = prior.sample(np.random.default_rng(0), 200_000)
    np.testing.assert_allclose(draws.mean(axis=0), prior.mean(), atol=0.03)
    assert np.all(draws[:, 2] >= 0)
    np.testing.assert_allclose(draws[:, 3].var(), 0.8 * 0.01 + 0.2 * 12.25, rtol=0.03)


def test_prior_validation():
    with pytest.raises(ConfigError):
        PriorSpec([PriorBlock("normal", 1, 0.0, -1.0)])
    with pytest.raises(ConfigError):
        PriorSpec([PriorBlock("normal_mixture", 1, w=1.0)])
    with pytest.raises(ConfigError):
        ModelSpec("student_t", normal_prior(1), nu=2.0)


# --------------------------------------------------------------------------
# datasets


def test_dataset_invariants():
    with pytest.raises(ConfigError):
        Dataset(np.zeros(0), np.zeros((0, 1)))
    with pytest.raises(ConfigError):
        Dataset(np.zeros(2), np.array([[1.0], [np.inf]]))
    with pytest.raises(ConfigError):
        Dataset(np.zeros(3), np.zeros((3, 1)), np.array([1, 3, 3]))
    d = Dataset(np.zeros(3), np.zeros((3, 1)), np.array([2, 1, 2]))
    assert d.n_groups == 2
    with pytest.raises(ValueError):
        d.responses[0] = 1.0


def test_simulation_is_deterministic():
    design = SimDesign("student_t", 500, 4, rho=0.9, theta_law=("uniform", -5, 5))
    a, b = simulate_dataset(design, 42), simulate_dataset(design, 42)
    assert a == b
    assert a.covariates.tobytes() == b.covariates.tobytes()
    assert simulate_dataset(design, 43) != a


def test_simulated_covariate_correlation():
    design = SimDesign("student_t", 20_000, 5, rho=0.9)
    X = simulate_dataset(design, 1).covariates
    c = np.corrcoef(X.T)
    off = c[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off - 0.9) < 0.05)
    np.testing.assert_allclose(X.var(axis=0), 1.0, atol=0.05)


def test_simulated_theta_laws():
    st_design = SimDesign("student_t", 10, 200, theta_law=("uniform", -5, 5))
    th = np.array(simulate_dataset(st_design, 0).meta["true_theta"])
    assert th.min() >= -5 and th.max() <= 5 and th.std() > 2
    p_design = SimDesign("poisson", 10, 50, intercept=True, theta_law=("uniform", -0.2, 0.2))
    data = simulate_dataset(p_design, 0)
    assert np.all(np.abs(data.meta["true_theta"]) <= 0.2)
    np.testing.assert_array_equal(data.covariates[:, -1], 1.0)
    assert data.columns[-1] == "intercept"


def test_invalid_rho():
    with pytest.raises(ConfigError):
        simulate_dataset(SimDesign("logistic", 10, 2, rho=1.0), 0)


def test_fixed_effects_design_matrix():
    design = SimDesign("fixed_effects", 30, 2, group_sizes=(10, 20),
                       alpha_laws=(("normal", 0.5, 0.05), ("truncated_normal", 0.1, 0.1)))
    data = simulate_dataset(design, 3)
    prior = PriorSpec([PriorBlock("normal_mixture", 2, w=0.8, var1=0.01, var2=12.25), PriorBlock("normal", 2, 0, 9)])
    prob = Problem(ModelSpec("fixed_effects", prior), data)
    assert prob.X.shape == (30, 4)
    np.testing.assert_array_equal(prob.X[:10, 0], 1.0)
    np.testing.assert_array_equal(prob.X[10:, 1], 1.0)
    assert data.meta["true_theta"][1] >= 0


def test_csv_round_trip(tmp_path):
    design = SimDesign("fixed_effects", 12, 2, group_sizes=(5, 7),
                       alpha_laws=(("normal", 0, 1), ("normal", 0, 1)))
    data = simulate_dataset(design, 9)
    save_dataset(data, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert back == data
    assert back.columns == data.columns


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError, match="missing 'y'"):
        load_dataset(p)
    p.write_text("y,x\n1,abc\n")
    with pytest.raises(ConfigError):
        load_dataset(p)


def test_problem_response_validation():
    X = np.ones((2, 1))
    with pytest.raises(ConfigError):
        Problem(ModelSpec("logistic", normal_prior(1)), Dataset(np.array([0.0, 2.0]), X))
    with pytest.raises(ConfigError):
        Problem(ModelSpec("poisson", normal_prior(1)), Dataset(np.array([0.5, 2.0]), X))
    with pytest.raises(ConfigError):
        Problem(ModelSpec("poisson", normal_prior(3)), Dataset(np.array([0.0, 2.0]), X))
