"""Likelihood-tempered SMC with subsampled annealed-likelihood estimates.

Each stage picks the next temperature from an equispaced grid so that the
reweighted ESS is as close as possible to the target, reweights, adds the
stage's evidence increment, recentres the control variate at the weighted
particle mean, resamples and applies Gibbs moves until the particles
decorrelate. In full-data mode the exact log-likelihood replaces the
estimator and the whole scheme reduces to standard tempered SMC.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateCloudError, NumericOverflowError, ParticleMapError, SubsmcError
from .estimator import SubsampleLayout, build_control_variate
from .kernels import (
    KernelConfig,
    MoveContext,
    gibbs_task,
    refresh_task,
    tune_mass_matrix,
    tune_num_moves,
    tune_step_size,
)
from .model import Problem
from .runtime import ParticlePool, Phase, derive_stream

logger = logging.getLogger(__name__)

MODES = ("subsample", "full_data")


@dataclass
class SmcConfig:
    """Engine settings.

    ``ess_target`` is a fraction of the particle count. ``m`` and ``blocks``
    are integers for a single stratum, or per-group sequences when
    ``stratify == "group"``.
    """

    particles: int = 280
    ess_target: float = 0.8
    grid_size: int = 1000
    mode: str = "subsample"
    cv_order: int = 2
    m: int | list = 100
    blocks: int | list = 1
    stratify: str = "none"
    min_ess: float = 2.0
    grid_refine: bool = True
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def validate(self, n=None):
        problems = []
        if self.particles < 2:
            problems.append("particles (M) must be >= 2")
        if not 0.0 < self.ess_target <= 1.0:
            problems.append("ess_target must lie in (0, 1] (fraction of M)")
        if self.grid_size < 1:
            problems.append("grid_size must be >= 1")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.cv_order not in (1, 2):
            problems.append("cv_order must be 1 or 2")
        if self.stratify not in ("none", "group"):
            problems.append("stratify must be 'none' or 'group'")
        if self.mode == "subsample" and self.stratify == "none":
            if not isinstance(self.m, int) or not isinstance(self.blocks, int):
                problems.append("m and G must be integers without stratification")
            else:
                if self.m < 1:
                    problems.append("m must be >= 1")
                if n is not None and self.m > n:
                    problems.append(f"m must be <= n ({self.m} > {n})")
                if self.blocks < 1 or self.m % self.blocks:
                    problems.append(f"G must divide m (m={self.m}, G={self.blocks})")
        problems.extend(self.kernel.validate())
        return problems

    def to_dict(self):
        out = asdict(self)
        out["kernel"] = self.kernel.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kernel"] = KernelConfig(**d.get("kernel", {}))
        return cls(**d)


def make_layout(problem: Problem, config: SmcConfig) -> SubsampleLayout | None:
    if config.mode == "full_data":
        return None
    if config.stratify == "group":
        groups = problem.data.group_index
        if groups is None:
            raise ConfigError("stratify='group' needs a dataset with a group column")
        n_groups = int(groups.max()) + 1
        m = config.m if isinstance(config.m, (list, tuple)) else [config.m] * n_groups
        g = config.blocks if isinstance(config.blocks, (list, tuple)) else [config.blocks] * n_groups
        if len(m) != n_groups or len(g) != n_groups:
            raise ConfigError(f"per-group m and G need {n_groups} entries")
        return SubsampleLayout.by_group(groups, m, g)
    return SubsampleLayout.single(problem.n, config.m, config.blocks)


# --------------------------------------------------------------------------
# weights


def _normalise(logw):
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise DegenerateCloudError("all particle weights are zero")
    return logw - total


def ess(weights) -> float:
    """``1 / sum(W_i^2)`` for normalised weights."""
    w = np.asarray(weights, dtype=float)
    s = float(np.sum(w))
    if not s > 0.0 or not np.isfinite(s):
        raise DegenerateCloudError("all particle weights are zero")
    w = w / s
    return float(1.0 / np.sum(w * w))


def log_ess(logw) -> float:
    """ESS of (possibly unnormalised) log weights, computed in log space."""
    return float(np.exp(2.0 * logsumexp(logw) - logsumexp(2.0 * np.asarray(logw))))


def incremental_log_weight(ell_hat, var_hat, a_prev, a_new):
    """``(a_new - a_prev) ell_hat - (a_new^2 - a_prev^2) var_hat / 2``; vectorised."""
    if a_new == a_prev:
        return np.zeros_like(np.asarray(ell_hat, dtype=float))
    return (a_new - a_prev) * np.asarray(ell_hat) - 0.5 * (a_new**2 - a_prev**2) * np.asarray(var_hat)


def temperature_grid(a_prev, grid_size):
    grid = a_prev + (1.0 - a_prev) * np.arange(1, grid_size + 1) / grid_size
    grid[-1] = 1.0
    return grid


def grid_ess(logw, ell_hat, var_hat, a_prev, grid):
    """ESS after reweighting to each candidate temperature in ``grid``."""
    ell_hat = np.asarray(ell_hat)
    var_hat = np.asarray(var_hat)
    da = (grid - a_prev)[:, None]
    da2 = (grid**2 - a_prev**2)[:, None]
    lw = logw[None, :] + da * ell_hat[None, :] - 0.5 * da2 * var_hat[None, :]
    out = np.exp(2.0 * logsumexp(lw, axis=1) - logsumexp(2.0 * lw, axis=1))
    return np.where(np.isfinite(out), out, 0.0)


def stage_grid(logw, ell_hat, var_hat, a_prev, target_ess, grid_size=1000, refine=True):
    """Candidate temperatures and their ESS for one stage.

    The base grid is ``grid_size`` equispaced points on ``(a_prev, 1]``. When
    even its first step drops the ESS below target and ``refine`` is set,
    ``grid_size`` log-spaced points spanning eight decades below that first
    step are prepended.
    """
    logw = np.asarray(logw, dtype=float)
    grid = temperature_grid(a_prev, grid_size)
    ess_grid = grid_ess(logw, ell_hat, var_hat, a_prev, grid)
    if refine and ess_grid[0] < target_ess:
        step = grid[0] - a_prev
        fine = a_prev + step * np.logspace(-8.0, 0.0, grid_size, endpoint=False)
        fine = fine[fine > a_prev]
        grid = np.concatenate([fine, grid])
        ess_grid = np.concatenate([grid_ess(logw, ell_hat, var_hat, a_prev, fine), ess_grid])
    return grid, ess_grid


def next_temperature(logw, ell_hat, var_hat, a_prev, target_ess, grid_size=1000, refine=True):
    """Next temperature: the candidate whose ESS is closest to ``target_ess``.

    Returns ``(a_new, info)``. Ties go to the largest temperature, so a flat
    ESS profile (or one that stays above target) ends at 1.
    """
    grid, ess_grid = stage_grid(logw, ell_hat, var_hat, a_prev, target_ess, grid_size, refine)
    dist = np.abs(ess_grid - target_ess)
    best = int(np.flatnonzero(dist == dist.min())[-1])
    info = {
        "ess": float(ess_grid[best]),
        "degenerate": bool(ess_grid[0] < 2.0),
        "grid_index": best,
        "grid_points": int(grid.size),
    }
    if info["degenerate"]:
        logger.warning("ESS below 2 at the smallest grid step from a=%.6g", a_prev)
        best = 0
        info["ess"] = float(ess_grid[0])
        info["grid_index"] = 0
    return float(grid[best]), info


def reweight(logw, ell_hat, var_hat, a_prev, a_new):
    """Normalised log weights after moving the temperature from ``a_prev`` to ``a_new``."""
    return _normalise(np.asarray(logw) + incremental_log_weight(ell_hat, var_hat, a_prev, a_new))


def update_evidence(log_z, logw_prev, ell_hat, var_hat, a_prev, a_new):
    """Add ``log sum_i W_i exp(increment_i)`` (pre-resampling weights) to ``log_z``."""
    lw = _normalise(np.asarray(logw_prev, dtype=float))
    inc = float(logsumexp(lw + incremental_log_weight(ell_hat, var_hat, a_prev, a_new)))
    if not np.isfinite(inc):
        raise DegenerateCloudError("evidence increment is not finite")
    return log_z + inc, inc


def resample_multinomial(weights, rng) -> np.ndarray:
    """Ancestor indices: ``M`` iid draws from the weight distribution."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return rng.choice(w.shape[0], size=w.shape[0], replace=True, p=w)


# --------------------------------------------------------------------------
# containers


@dataclass
class ParticleCloud:
    theta: np.ndarray
    u: np.ndarray
    ell: np.ndarray
    var: np.ndarray
    logw: np.ndarray

    @property
    def size(self):
        return self.theta.shape[0]

    @property
    def weights(self):
        return np.exp(self.logw)

    def as_payload(self):
        return {"theta": self.theta, "u": self.u, "ell": self.ell, "var": self.var}

    def take(self, idx):
        return ParticleCloud(self.theta[idx], self.u[idx], self.ell[idx], self.var[idx],
                             np.full(len(idx), -math.log(len(idx))))


@dataclass
class EvidenceAccumulator:
    log_z: float = 0.0
    increments: list = field(default_factory=list)

    def add(self, logw_prev, ell_hat, var_hat, a_prev, a_new):
        self.log_z, inc = update_evidence(self.log_z, logw_prev, ell_hat, var_hat, a_prev, a_new)
        self.increments.append(inc)
        return inc


@dataclass
class StageInfo:
    """Snapshot handed to ``run``'s callback before each reweighting."""

    stage: int
    a_prev: float
    a_new: float
    logw: np.ndarray
    ell: np.ndarray
    var: np.ndarray
    target_ess: float
    grid_size: int
    grid_refine: bool


@dataclass
class SmcResult:
    theta: np.ndarray
    weights: np.ndarray
    log_z: float
    trace: list
    config: dict
    seconds: float
    meta: dict = field(default_factory=dict)

    @property
    def stages(self) -> int:
        return len(self.trace)

    def posterior_mean(self):
        w = self.weights / self.weights.sum()
        return w @ self.theta

    def posterior_var(self):
        w = self.weights / self.weights.sum()
        mu = w @ self.theta
        return w @ (self.theta - mu) ** 2

    def mean_moves(self):
        return float(np.mean([t["r_moves"] for t in self.trace])) if self.trace else 0.0


# --------------------------------------------------------------------------
# the loop


def _with_stage(exc, stage):
    if isinstance(exc, ParticleMapError):
        inner = exc.failures[0][1]
        if isinstance(inner, NumericOverflowError):
            return NumericOverflowError(inner.index, inner.value, stage)
        if isinstance(inner, SubsmcError):
            inner.stage = stage
            return inner
    if isinstance(exc, NumericOverflowError) and exc.stage is None:
        return NumericOverflowError(exc.index, exc.value, stage)
    if getattr(exc, "stage", None) is None:
        exc.stage = stage
    return exc


def run(problem: Problem, config: SmcConfig, seed: int, workers: int = 1, callback=None) -> SmcResult:
    """Run the sampler to temperature 1 and return the final cloud and evidence."""
    problems = config.validate(problem.n)
    if problems:
        raise ConfigError(problems)
    with ParticlePool(workers, problem) as pool:
        return _run(problem, config, int(seed), pool, callback)


def _run(problem, config, seed, pool, callback):
    t_start = time.perf_counter()
    M, d = config.particles, problem.dim
    kcfg = config.kernel
    layout = make_layout(problem, config)
    subsampled = layout is not None
    target_ess = config.ess_target * M

    rng = derive_stream(seed, 0, 0, Phase.INIT)
    theta = problem.prior.sample(rng, M)
    if subsampled:
        u = np.stack([layout.draw(rng) for _ in range(M)])
    else:
        u = np.zeros((M, 0), dtype=np.int64)
    cloud = ParticleCloud(theta, u, np.zeros(M), np.zeros(M), np.full(M, -math.log(M)))
    cv = build_control_variate(problem, theta.mean(axis=0), config.cv_order) if subsampled else None
    mass = tune_mass_matrix(theta)
    ctx = MoveContext(0.0, mass, kcfg, kcfg.step_size, seed, 0, 0, cv, layout)
    est = pool.map(refresh_task, cloud.as_payload(), ctx)
    cloud.ell, cloud.var = est["ell"], est["var"]

    evidence = EvidenceAccumulator()
    trace = []
    a = 0.0
    step_size = kcfg.step_size
    stage = 0
    while a < 1.0:
        stage += 1
        t0 = time.perf_counter()
        try:
            a_new, tinfo = next_temperature(
                cloud.logw, cloud.ell, cloud.var, a, target_ess, config.grid_size, config.grid_refine
            )
            if callback is not None:
                callback(StageInfo(stage, a, a_new, cloud.logw.copy(), cloud.ell.copy(),
                                   cloud.var.copy(), target_ess, config.grid_size, config.grid_refine))
            inc = evidence.add(cloud.logw, cloud.ell, cloud.var, a, a_new)
            cloud.logw = reweight(cloud.logw, cloud.ell, cloud.var, a, a_new)
            ess_p = ess(cloud.weights)
            if ess_p < config.min_ess:
                raise DegenerateCloudError(
                    f"ESS {ess_p:.3g} below {config.min_ess} at a={a_new:.6g}",
                    stage, {"a_prev": a, "a_new": a_new, "ess": ess_p},
                )
            W = cloud.weights
            centre = W @ cloud.theta
            mass = tune_mass_matrix(cloud.theta, W)
            if subsampled:
                cv = build_control_variate(problem, centre, config.cv_order)

            idx = resample_multinomial(W, derive_stream(seed, stage, 0, Phase.RESAMPLE))
            cloud = cloud.take(idx)
            a = a_new
            ctx = MoveContext(a, mass, kcfg, step_size, seed, stage, 0, cv, layout)
            if subsampled:
                est = pool.map(refresh_task, cloud.as_payload(), ctx)
                cloud.ell, cloud.var = est["ell"], est["var"]

            if kcfg.kind != "rw" and kcfg.adapt_step_size:
                step_size = tune_step_size(pool, cloud.as_payload(), ctx, kcfg, step_size)

            acc_u = acc_theta = divergences = proposals = 0
            prod = None
            r = 0
            while True:
                r += 1
                before = cloud.theta
                ctx = MoveContext(a, mass, kcfg, step_size, seed, stage, r, cv, layout)
                out = pool.map(gibbs_task, cloud.as_payload(), ctx)
                cloud.theta, cloud.u, cloud.ell, cloud.var = out["theta"], out["u"], out["ell"], out["var"]
                acc_u += int(out["acc_u"].sum())
                acc_theta += int(out["acc_theta"].sum())
                divergences += int(out["diverged"].sum())
                proposals += M
                decision, prod = tune_num_moves(before, cloud.theta, kcfg, prod, r)
                if decision == "stop":
                    break
            if divergences > kcfg.max_divergence_fraction * proposals:
                raise DegenerateCloudError(
                    f"{divergences} of {proposals} proposals diverged", stage,
                    {"a": a, "step_size": step_size},
                )
        except SubsmcError as exc:
            raise _with_stage(exc, stage) from exc

        record = {
            "stage": stage,
            "a_p": a,
            "ess": ess_p,
            "log_z_increment": inc,
            "acc_theta": acc_theta / proposals,
            "acc_u": acc_u / proposals,
            "r_moves": r,
            "seconds": time.perf_counter() - t0,
            "step_size": step_size if kcfg.kind != "rw" else None,
            "divergences": divergences,
            "mean_var_hat": float(np.mean(cloud.var)),
            "clamped": int(cv.clamped) if cv is not None else 0,
            "mass_fallback": bool(mass.diagonal_fallback),
            "grid_degenerate": tinfo["degenerate"],
        }
        trace.append(record)
        logger.info("stage %d a=%.5f ess=%.1f R=%d acc=%.2f", stage, a, ess_p, r, record["acc_theta"])

    meta = {
        "seed": seed,
        "layout": layout.to_dict() if layout is not None else None,
        "estimate_refresh": "estimates travel with particles through resampling and are "
                            "recomputed whenever the control variate is rebuilt",
    }
    return SmcResult(
        theta=cloud.theta, weights=cloud.weights, log_z=evidence.log_z, trace=trace,
        config=config.to_dict(), seconds=time.perf_counter() - t_start, meta=meta,
    )

