"""Markov moves leaving the extended tempered target invariant.

One Gibbs sweep refreshes a block of subsample indices ``u`` with a
pseudo-marginal Metropolis step, then moves ``theta`` given ``u`` with HMC,
MALA or a random walk. Tuning helpers (mass matrix, step size, number of
moves) read the whole cloud and run between particle maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve

from .errors import ConfigError, NumericOverflowError
from .estimator import (
    ControlVariate,
    LogLikEstimate,
    SubsampleLayout,
    annealed_log_estimate,
    estimate_loglik,
    estimate_with_grad,
    exact_loglik,
)
from .model import Problem
from .runtime import Phase, derive_stream

KINDS = ("hmc", "mala", "rw")


@dataclass
class KernelConfig:
    kind: str = "hmc"
    leapfrog_steps: int = 10
    step_size: float = 0.5
    r_max: int = 100
    autocorr_threshold: float = 0.6
    autocorr_fraction: float = 0.9
    target_accept: float = 0.8
    adapt_step_size: bool = True
    pilot_fraction: float = 0.1
    pilot_iters: int = 15
    jitter: bool = True
    variance_gradient: bool = True
    rw_scale: float = 0.1
    max_divergence_fraction: float = 0.5

    def validate(self):
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kernel.kind must be one of {KINDS}")
        if self.leapfrog_steps < 1:
            problems.append("kernel.leapfrog_steps must be >= 1")
        if not self.step_size > 0:
            problems.append("kernel.step_size must be > 0")
        if self.r_max < 1:
            problems.append("kernel.r_max must be >= 1")
        if not 0.0 < self.autocorr_threshold < 1.0:
            problems.append("kernel.autocorr_threshold must lie in (0, 1)")
        if not 0.0 < self.autocorr_fraction <= 1.0:
            problems.append("kernel.autocorr_fraction must lie in (0, 1]")
        if not 0.0 < self.target_accept < 1.0:
            problems.append("kernel.target_accept must lie in (0, 1)")
        if not 0.0 < self.pilot_fraction <= 1.0:
            problems.append("kernel.pilot_fraction must lie in (0, 1]")
        if self.pilot_iters < 1:
            problems.append("kernel.pilot_iters must be >= 1")
        if not self.rw_scale > 0:
            problems.append("kernel.rw_scale must be > 0")
        return problems

    def to_dict(self):
        return asdict(self)


@dataclass
class MoveStats:
    accepted_u: int = 0
    accepted_theta: int = 0
    proposals: int = 0
    divergences: int = 0

    def add(self, other: "MoveStats"):
        self.accepted_u += other.accepted_u
        self.accepted_theta += other.accepted_theta
        self.proposals += other.proposals
        self.divergences += other.divergences


@dataclass(frozen=True, eq=False)
class MassMatrix:
    """HMC mass ``H`` with its inverse (the particle covariance) and factors."""

    H: np.ndarray
    H_inv: np.ndarray
    chol_H: np.ndarray
    chol_cov: np.ndarray
    diagonal_fallback: bool = False

    @classmethod
    def from_covariance(cls, cov, diagonal_fallback=False):
        cov = 0.5 * (cov + cov.T)
        chol_cov = np.linalg.cholesky(cov)
        H = cho_solve((chol_cov, True), np.eye(cov.shape[0]))
        H = 0.5 * (H + H.T)
        return cls(H, cov, np.linalg.cholesky(H), chol_cov, diagonal_fallback)

    @classmethod
    def identity(cls, dim):
        return cls.from_covariance(np.eye(dim))


def tune_mass_matrix(theta, weights=None) -> MassMatrix:
    """Mass matrix from the (weighted) particle covariance.

    Diagonal loading lifts the smallest eigenvalue to at least 1e-6; a
    rank-deficient covariance (e.g. duplicated particles) falls back to its
    diagonal plus 1e-6.
    """
    theta = np.asarray(theta, dtype=float)
    M, d = theta.shape
    if weights is None:
        weights = np.full(M, 1.0 / M)
    w = np.asarray(weights, dtype=float) / np.sum(weights)
    mean = w @ theta
    dev = theta - mean
    cov = (dev * w[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(cov)
    scale = max(float(eig[-1]), 1e-300)
    distinct = np.unique(theta, axis=0).shape[0]
    if distinct <= d or eig[0] <= 1e-10 * scale:
        cov = np.diag(np.diag(cov) + 1e-6)
        return MassMatrix.from_covariance(cov, diagonal_fallback=True)
    lam = max(0.0, 1e-6 - float(eig[0]))
    return MassMatrix.from_covariance(cov + lam * np.eye(d))


# --------------------------------------------------------------------------
# targets


class ExtendedTarget:
    """``a * ell_hat - a^2/2 * var_hat + log p(theta)`` at fixed ``u``.

    Without a control variate the exact log-likelihood is used (``var_hat``
    is zero), which is the full-data engine.
    """

    def __init__(self, problem: Problem, a: float, cv: ControlVariate | None = None,
                 layout: SubsampleLayout | None = None, u=None, variance_gradient=True):
        self.problem = problem
        self.prior = problem.prior
        self.a = float(a)
        self.cv = cv
        self.layout = layout
        self.u = None if u is None else np.ascontiguousarray(u, dtype=np.int64)
        self.variance_gradient = variance_gradient
        self.subsampled = cv is not None

    def estimate(self, theta) -> LogLikEstimate:
        if self.subsampled:
            return estimate_loglik(self.problem, self.cv, self.u, theta, self.layout)
        return exact_loglik(self.problem, theta)

    def log_density(self, theta, est=None):
        """``(log target, estimate)``; ``-inf`` outside the prior support."""
        lp = self.prior.log_density(theta)
        if est is None:
            if not math.isfinite(lp):
                return lp, LogLikEstimate(math.nan, math.nan)
            est = self.estimate(theta)
        return annealed_log_estimate(est, self.a) + lp, est

    def proposal_density(self, theta):
        """As :meth:`log_density` but a non-finite likelihood term gives NaN."""
        try:
            return self.log_density(theta)
        except NumericOverflowError:
            return math.nan, LogLikEstimate(math.nan, math.nan)

    def grad(self, theta) -> np.ndarray:
        theta = np.ascontiguousarray(theta, dtype=float)
        g = self.prior.grad_log_density(theta)
        if self.a == 0.0:
            return g
        if self.subsampled:
            _, gl = estimate_with_grad(self.problem, self.cv, self.u, theta, self.a,
                                       self.layout, self.variance_gradient)
            return g + gl
        _, gl = self.problem.loglik_grad(theta)
        return g + self.a * gl


# --------------------------------------------------------------------------
# subsample index updates


def propose_u_block(u, block: int, rng, layout: SubsampleLayout, stratum: int = 0) -> np.ndarray:
    """Copy of ``u`` with one block of one stratum redrawn from ``p(u)``.

    ``block`` is 0-based.
    """
    if not 0 <= block < layout.blocks[stratum]:
        raise IndexError(f"block {block} out of range for G={layout.blocks[stratum]}")
    out = np.array(u, dtype=np.int64, copy=True)
    lo, hi = layout.block_bounds(stratum, block)
    out[lo:hi] = layout.draw_block(stratum, hi - lo, rng)
    return out


def accept_u(est_current: LogLikEstimate, est_proposed: LogLikEstimate, a: float, rng) -> bool:
    """Pseudo-marginal acceptance; ``p(u)`` cancels as the proposal is drawn from it."""
    log_r = annealed_log_estimate(est_proposed, a) - annealed_log_estimate(est_current, a)
    if math.isnan(log_r):
        return False
    return bool(math.log(rng.random()) < log_r) if log_r < 0.0 else True


# --------------------------------------------------------------------------
# theta updates


class LeapfrogResult(NamedTuple):
    theta: np.ndarray
    rho: np.ndarray
    grad: np.ndarray
    diverged: bool


def leapfrog(theta, rho, grad_log_target, step_size, n_steps, inv_mass, grad0=None) -> LeapfrogResult:
    """``n_steps`` leapfrog steps for kinetic energy ``rho^T inv_mass rho / 2``."""
    theta = np.array(theta, dtype=float, copy=True)
    g = grad_log_target(theta) if grad0 is None else grad0
    rho = np.asarray(rho, dtype=float) + 0.5 * step_size * g
    for i in range(n_steps):
        theta = theta + step_size * (inv_mass @ rho)
        g = grad_log_target(theta)
        if not np.isfinite(g).all():
            return LeapfrogResult(theta, rho, g, True)
        if i < n_steps - 1:
            rho = rho + step_size * g
    rho = rho + 0.5 * step_size * g
    return LeapfrogResult(theta, rho, g, False)


class ThetaMove(NamedTuple):
    theta: np.ndarray
    est: LogLikEstimate
    accepted: bool
    diverged: bool
    accept_prob: float


def move_theta(theta, est: LogLikEstimate, target: ExtendedTarget, mass: MassMatrix,
               config: KernelConfig, step_size: float, rng) -> ThetaMove:
    """One Metropolis-Hastings update of ``theta`` at fixed ``u``."""
    # runaway trajectories overflow on the way to being flagged as divergent
    with np.errstate(over="ignore", invalid="ignore"):
        return _move_theta(theta, est, target, mass, config, step_size, rng)


def _move_theta(theta, est, target, mass, config, step_size, rng):
    theta = np.asarray(theta, dtype=float)
    logp0, est = target.log_density(theta, est)
    d = theta.shape[0]
    if config.kind == "rw":
        scale = math.sqrt(config.rw_scale * 2.38**2 / d)
        prop = theta + scale * (mass.chol_cov @ rng.standard_normal(d))
        logp1, est1 = target.proposal_density(prop)
        log_acc = logp1 - logp0
        diverged = math.isnan(log_acc)
    else:
        n_steps = 1
        if config.kind == "hmc":
            L = config.leapfrog_steps
            n_steps = int(rng.integers((L + 1) // 2, L + 1)) if config.jitter else L
        rho = mass.chol_H @ rng.standard_normal(d)
        kin0 = 0.5 * float(rho @ mass.H_inv @ rho)
        lf = leapfrog(theta, rho, target.grad, step_size, n_steps, mass.H_inv)
        prop = lf.theta
        if lf.diverged or not np.isfinite(prop).all():
            return ThetaMove(theta, est, False, True, 0.0)
        logp1, est1 = target.proposal_density(prop)
        kin1 = 0.5 * float(lf.rho @ mass.H_inv @ lf.rho)
        log_acc = (logp1 - kin1) - (logp0 - kin0)
        diverged = math.isnan(log_acc) or (math.isinf(logp1) and logp1 > 0)
    if diverged:
        return ThetaMove(theta, est, False, True, 0.0)
    accept_prob = 1.0 if log_acc >= 0.0 else math.exp(log_acc)
    if log_acc >= 0.0 or math.log(rng.random()) < log_acc:
        return ThetaMove(prop, est1, True, False, accept_prob)
    return ThetaMove(theta, est, False, False, accept_prob)


@dataclass(frozen=True, eq=False)
class MoveContext:
    """Per-batch state shipped to particle workers."""

    a: float
    mass: MassMatrix
    config: KernelConfig
    step_size: float
    seed: int
    stage: int
    batch: int = 0
    cv: ControlVariate | None = None
    layout: SubsampleLayout | None = None
    phase: int = Phase.MOVE
    update_u: bool = True


class GibbsResult(NamedTuple):
    theta: np.ndarray
    u: np.ndarray
    est: LogLikEstimate
    stats: MoveStats
    accept_prob: float


def gibbs_move(theta, u, est: LogLikEstimate, problem: Problem, ctx: MoveContext, rng) -> GibbsResult:
    """Refresh one block of ``u`` per stratum, then move ``theta`` given ``u``."""
    stats = MoveStats(proposals=1)
    subsampled = ctx.cv is not None and ctx.layout is not None
    if subsampled and ctx.update_u:
        layout = ctx.layout
        u_prop = layout.redraw_blocks(u, rng)
        try:
            est_prop = estimate_loglik(problem, ctx.cv, u_prop, theta, layout)
        except NumericOverflowError:
            est_prop = LogLikEstimate(math.nan, math.nan)
        if accept_u(est, est_prop, ctx.a, rng):
            u, est = u_prop, est_prop
            stats.accepted_u = 1
    elif not subsampled:
        stats.accepted_u = 1
    target = ExtendedTarget(problem, ctx.a, ctx.cv, ctx.layout, u, ctx.config.variance_gradient)
    mv = move_theta(theta, est, target, ctx.mass, ctx.config, ctx.step_size, rng)
    stats.accepted_theta = int(mv.accepted)
    stats.divergences = int(mv.diverged)
    return GibbsResult(mv.theta, u, mv.est, stats, mv.accept_prob)


# --------------------------------------------------------------------------
# particle tasks (module level so worker processes can unpickle them)


def gibbs_task(index, particle, ctx: MoveContext, problem):
    rng = derive_stream(ctx.seed, ctx.stage, index, ctx.phase, ctx.batch)
    est = LogLikEstimate(float(particle["ell"]), float(particle["var"]))
    res = gibbs_move(particle["theta"], particle["u"], est, problem, ctx, rng)
    return {
        "theta": res.theta, "u": np.asarray(res.u, dtype=np.int64),
        "ell": res.est.ell_hat, "var": res.est.var_hat,
        "acc_u": res.stats.accepted_u, "acc_theta": res.stats.accepted_theta,
        "diverged": res.stats.divergences, "accept_prob": res.accept_prob,
    }


def theta_task(index, particle, ctx: MoveContext, problem):
    """``theta`` update only; used by the step-size pilot."""
    rng = derive_stream(ctx.seed, ctx.stage, index, ctx.phase, ctx.batch)
    est = LogLikEstimate(float(particle["ell"]), float(particle["var"]))
    target = ExtendedTarget(problem, ctx.a, ctx.cv, ctx.layout, particle["u"], ctx.config.variance_gradient)
    mv = move_theta(particle["theta"], est, target, ctx.mass, ctx.config, ctx.step_size, rng)
    return {"theta": mv.theta, "ell": mv.est.ell_hat, "var": mv.est.var_hat,
            "accept_prob": mv.accept_prob, "diverged": int(mv.diverged)}


def refresh_task(index, particle, ctx, problem):
    """Recompute a particle's estimate under the current control variate."""
    if ctx.cv is None:
        est = exact_loglik(problem, particle["theta"])
    else:
        est = estimate_loglik(problem, ctx.cv, particle["u"], particle["theta"], ctx.layout)
    return {"ell": est.ell_hat, "var": est.var_hat}


# --------------------------------------------------------------------------
# tuning


@dataclass
class DualAveraging:
    """Nesterov dual averaging of ``log step_size`` towards a target acceptance."""

    step_size: float
    target: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    mu: float = field(init=False)
    t: int = field(init=False, default=0)
    h_bar: float = field(init=False, default=0.0)
    log_eps_bar: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.mu = math.log(10.0 * self.step_size)

    def update(self, accept_rate: float) -> float:
        self.t += 1
        t = self.t
        self.h_bar = (1.0 - 1.0 / (t + self.t0)) * self.h_bar + (self.target - accept_rate) / (t + self.t0)
        log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        log_eps = min(max(log_eps, -30.0), 5.0)
        eta = t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        self.step_size = math.exp(log_eps)
        return self.step_size

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def pilot_indices(M: int, fraction: float) -> np.ndarray:
    k = min(M, max(2, int(math.ceil(fraction * M))))
    return np.arange(k)


def tune_step_size(pool, cloud: dict, ctx: MoveContext, config: KernelConfig, initial: float) -> float:
    """Dual-averaging pilot on a particle subset; the pilot moves are discarded."""
    idx = pilot_indices(len(cloud["theta"]), config.pilot_fraction)
    sub = {k: np.array(cloud[k][idx], copy=True) for k in ("theta", "u", "ell", "var")}
    da = DualAveraging(initial, config.target_accept)
    eps = initial
    for it in range(config.pilot_iters):
        pctx = MoveContext(ctx.a, ctx.mass, config, eps, ctx.seed, ctx.stage, it,
                           ctx.cv, ctx.layout, Phase.PILOT)
        out = pool.map(theta_task, sub, pctx)
        sub["theta"], sub["ell"], sub["var"] = out["theta"], out["ell"], out["var"]
        eps = da.update(float(np.mean(out["accept_prob"])))
    return da.final


def componentwise_correlation(before, after) -> np.ndarray:
    """Per-coordinate correlation across particles; zero-variance coordinates give 0."""
    b = before - before.mean(axis=0)
    a = after - after.mean(axis=0)
    den = np.sqrt(np.sum(b * b, axis=0) * np.sum(a * a, axis=0))
    num = np.sum(b * a, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    return corr


def tune_num_moves(snapshot_before, snapshot_after, config: KernelConfig,
                   running_product=None, moves_done: int = 1):
    """Decide whether to keep moving after a batch.

    Returns ``(decision, running_product)`` with decision ``"continue"`` or
    ``"stop"``. Negative correlations count as fully mixed.
    """
    corr = np.clip(componentwise_correlation(np.asarray(snapshot_before), np.asarray(snapshot_after)), 0.0, 1.0)
    prod = corr if running_product is None else running_product * corr
    mixed = np.mean(prod < config.autocorr_threshold)
    stop = mixed >= config.autocorr_fraction or moves_done >= config.r_max
    return ("stop" if stop else "continue"), prod


def validate_kernel(config: KernelConfig):
    problems = config.validate()
    if problems:
        raise ConfigError(problems)
