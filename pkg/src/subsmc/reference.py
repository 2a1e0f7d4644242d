"""Single-chain subsampling MCMC at full temperature, used as a cross-check.

The chain starts at the posterior mode (found once on the full data), uses
the mode's inverse Hessian as its initial covariance, and applies the same
Gibbs move as the SMC engine with a fixed control variate. Every
``recentre_every`` iterations the control variate is rebuilt at the running
posterior mean and the mass matrix at the running covariance.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError
from .estimator import build_control_variate, estimate_loglik, exact_loglik
from .kernels import DualAveraging, KernelConfig, MassMatrix, MoveContext, gibbs_move, tune_mass_matrix
from .model import Problem
from .runtime import Phase, derive_stream
from .smc import SmcConfig, SmcResult, make_layout


def posterior_mode(problem: Problem, start=None):
    """Maximise the full-data log posterior; returns ``(mode, covariance)``."""
    prior = problem.prior
    x0 = prior.mean() if start is None else np.asarray(start, dtype=float)

    def neg(theta):
        val, g = problem.loglik_grad(theta, want_value=True)
        return -(val + prior.log_density(theta)), -(g + prior.grad_log_density(theta))

    bounds = [(0.0, None) if t else (None, None) for t in prior.truncated]
    res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds)
    mode = res.x
    _, _, f2, _ = problem.terms(mode)
    H = -(problem.X.T @ (f2[:, None] * problem.X))
    eps = 1e-6 * np.sqrt(np.sum(problem.X**2, axis=0)).max()
    prior_h = np.array([
        (prior.grad_log_density(mode - eps * e) - prior.grad_log_density(mode + eps * e)) / (2 * eps)
        for e in np.eye(problem.dim)
    ])
    H = H + 0.5 * (prior_h + prior_h.T)
    try:
        cov = np.linalg.inv(0.5 * (H + H.T))
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = np.diag(1.0 / np.maximum(np.diag(H), 1e-6))
    return mode, cov


def reference_mcmc(problem: Problem, config: SmcConfig, seed: int, iterations: int = 10000,
                   burn_in: int = 2000, recentre_every: int = 1000) -> SmcResult:
    """Post-burn-in draws of an MH-within-Gibbs chain at ``a = 1``.

    Returned as an equally weighted :class:`SmcResult` with ``log_z`` NaN.
    """
    if iterations < 1 or burn_in < 0 or recentre_every < 1:
        raise ConfigError("iterations, burn_in and recentre_every must be positive")
    t0 = time.perf_counter()
    kcfg: KernelConfig = config.kernel
    layout = make_layout(problem, config)
    subsampled = layout is not None
    rng = derive_stream(seed, 0, 0, Phase.REFERENCE)

    theta, cov = posterior_mode(problem)
    mass = MassMatrix.from_covariance(cov)
    cv = build_control_variate(problem, theta, config.cv_order) if subsampled else None
    u = layout.draw(rng) if subsampled else np.zeros(0, dtype=np.int64)

    def estimate(th, uu):
        return estimate_loglik(problem, cv, uu, th, layout) if subsampled else exact_loglik(problem, th)

    est = estimate(theta, u)
    da = DualAveraging(kcfg.step_size, kcfg.target_accept)
    step = kcfg.step_size
    total = burn_in + iterations
    draws = np.empty((iterations, problem.dim))
    window = []
    trace = []
    acc_u = acc_t = div = 0
    for it in range(total):
        ctx = MoveContext(1.0, mass, kcfg, step, seed, 0, it, cv, layout, Phase.REFERENCE)
        res = gibbs_move(theta, u, est, problem, ctx, rng)
        theta, u, est = res.theta, res.u, res.est
        acc_u += res.stats.accepted_u
        acc_t += res.stats.accepted_theta
        div += res.stats.divergences
        if it < burn_in and kcfg.kind != "rw":
            step = da.update(res.accept_prob)
            if it == burn_in - 1:
                step = da.final
        if it >= burn_in:
            draws[it - burn_in] = theta
        window.append(theta)
        if (it + 1) % recentre_every == 0:
            block = np.asarray(window)
            window = []
            past = draws[: max(0, it + 1 - burn_in)]
            centre = past.mean(axis=0) if past.shape[0] else block.mean(axis=0)
            if it < burn_in or past.shape[0] > problem.dim:
                mass = tune_mass_matrix(past if past.shape[0] > problem.dim else block)
            if subsampled:
                cv = build_control_variate(problem, centre, config.cv_order)
                est = estimate(theta, u)
            trace.append({
                "iteration": it + 1, "acc_theta": acc_t / recentre_every,
                "acc_u": acc_u / recentre_every, "divergences": div, "step_size": step,
                "mean_var_hat": float(est.var_hat),
            })
            acc_u = acc_t = div = 0
    weights = np.full(iterations, 1.0 / iterations)
    meta = {"sampler": "reference_mcmc", "iterations": iterations, "burn_in": burn_in,
            "recentre_every": recentre_every, "seed": seed}
    return SmcResult(draws, weights, float("nan"), trace, config.to_dict(),
                     time.perf_counter() - t0, meta)

