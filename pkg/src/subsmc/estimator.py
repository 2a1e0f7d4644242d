"""Difference estimator of the log-likelihood with Taylor control variates.

The estimator is

    ell_hat(theta) = q(theta) + sum_s (n_s / m_s) sum_{j in s} d_{u_j}(theta)

with ``d_k = l_k - q_k`` and ``q_k`` a first or second order Taylor expansion
of ``l_k`` around a centre ``theta_bar``. Observations may be split into
strata (one per group for panel data), each subsampled independently with
replacement; the ordinary case is a single stratum holding every row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._backend import kernels
from .errors import ConfigError, NumericOverflowError
from .model import Problem


class LogLikEstimate(NamedTuple):
    ell_hat: float
    var_hat: float


class SubsampleLayout:
    """Where each subsample position draws from, and how positions are blocked.

    Stratum ``s`` owns ``m[s]`` consecutive positions of ``u``, split into
    ``blocks[s]`` contiguous blocks of equal size, and draws uniformly with
    replacement from ``rows[s]``.
    """

    def __init__(self, rows, m, blocks):
        self.rows = tuple(np.asarray(r, dtype=np.int64) for r in rows)
        self.m = tuple(int(x) for x in m)
        self.blocks = tuple(int(x) for x in blocks)
        problems = []
        if not (len(self.rows) == len(self.m) == len(self.blocks)) or not self.rows:
            problems.append("rows, m and blocks need one entry per stratum")
        for s, (r, ms, g) in enumerate(zip(self.rows, self.m, self.blocks)):
            if r.size == 0:
                problems.append(f"stratum {s} has no observations")
            if ms < 1:
                problems.append(f"stratum {s}: m must be >= 1")
            elif ms > r.size:
                problems.append(f"stratum {s}: m={ms} exceeds its {r.size} observations")
            if g < 1 or (ms >= 1 and ms % g):
                problems.append(f"stratum {s}: G must divide m (m={ms}, G={g})")
        if problems:
            raise ConfigError(problems)
        self.n_strata = len(self.rows)
        self.starts = np.concatenate([[0], np.cumsum(self.m)]).astype(np.int64)
        self.size = int(self.starts[-1])
        self.pos_stratum = np.repeat(np.arange(self.n_strata, dtype=np.int64), self.m)
        self.scale = np.array([r.size / ms for r, ms in zip(self.rows, self.m)])
        for arr in (self.pos_stratum, self.scale):
            arr.setflags(write=False)
        # per-position lookups for redrawing one block in every stratum at once
        width = np.array([ms // g for ms, g in zip(self.m, self.blocks)], dtype=np.int64)
        strat = np.repeat(np.arange(self.n_strata), width)
        within = np.concatenate([np.arange(w) for w in width])
        self._n_blocks = np.array(self.blocks, dtype=np.int64)
        self._rep_strat = strat
        self._rep_width = width[strat]
        self._rep_base = self.starts[:-1][strat] + within
        self._rep_size = np.array([r.size for r in self.rows], dtype=np.int64)[strat]
        row_off = np.concatenate([[0], np.cumsum([r.size for r in self.rows])[:-1]]).astype(np.int64)
        self._rep_row_off = row_off[strat]
        self._flat_rows = np.concatenate(self.rows)

    @classmethod
    def single(cls, n, m, blocks=1):
        return cls([np.arange(n)], [m], [blocks])

    @classmethod
    def by_group(cls, group_index, m, blocks):
        """One stratum per group; ``m``/``blocks`` are per-group sequences."""
        group_index = np.asarray(group_index)
        n_groups = int(group_index.max()) + 1
        rows = [np.flatnonzero(group_index == g) for g in range(n_groups)]
        return cls(rows, m, blocks)

    @property
    def n_blocks(self):
        return sum(self.blocks)

    def block_bounds(self, stratum, block):
        """Positions ``[lo, hi)`` of ``block`` within ``stratum``."""
        width = self.m[stratum] // self.blocks[stratum]
        lo = int(self.starts[stratum]) + block * width
        return lo, lo + width

    def draw(self, rng) -> np.ndarray:
        """Fresh indices from ``p(u)``."""
        parts = [r[rng.integers(0, r.size, size=ms)] for r, ms in zip(self.rows, self.m)]
        return np.concatenate(parts)

    def draw_block(self, stratum, size, rng):
        r = self.rows[stratum]
        return r[rng.integers(0, r.size, size=size)]

    def redraw_blocks(self, u, rng) -> np.ndarray:
        """Copy of ``u`` with one uniformly chosen block per stratum redrawn."""
        out = np.array(u, dtype=np.int64, copy=True)
        if self.n_strata == 1:
            lo, hi = self.block_bounds(0, int(rng.integers(self.blocks[0])))
            out[lo:hi] = self.draw_block(0, hi - lo, rng)
            return out
        g = rng.integers(self._n_blocks)
        pos = self._rep_base + g[self._rep_strat] * self._rep_width
        out[pos] = self._flat_rows[self._rep_row_off + rng.integers(0, self._rep_size)]
        return out

    def to_dict(self):
        return {"m": list(self.m), "blocks": list(self.blocks), "strata_sizes": [int(r.size) for r in self.rows]}


@dataclass(frozen=True, eq=False)
class ControlVariate:
    """Taylor surrogate of the log-likelihood around ``centre``.

    ``A``, ``B``, ``C`` are the summed value, gradient and Hessian at the centre
    (``C`` is ``None`` for first order). The per-observation cache holds only
    the scalar derivatives along the linear predictor, which is all ``q_k``
    needs for generalised linear models.
    """

    centre: np.ndarray
    A: float
    B: np.ndarray
    C: np.ndarray | None
    order: int
    eta_bar: np.ndarray
    f_bar: np.ndarray
    f1_bar: np.ndarray
    f2_bar: np.ndarray | None
    clamped: int = 0


def build_control_variate(problem: Problem, centre, order: int = 2) -> ControlVariate:
    """One pass over the full data at ``centre``."""
    if order not in (1, 2):
        raise ConfigError(f"control variate order must be 1 or 2, got {order}")
    centre = np.ascontiguousarray(centre, dtype=float)
    if not np.all(np.isfinite(centre)):
        raise ConfigError("control variate centre must be finite")
    ell, f1, f2, eta = problem.terms(centre, want_hess=order == 2)
    problem.check_finite(ell)
    problem.check_finite(f1)
    A = float(np.sum(ell))
    B = problem.X.T @ f1
    C = None
    if order == 2:
        problem.check_finite(f2)
        C = problem.X.T @ (f2[:, None] * problem.X)
        C = 0.5 * (C + C.T)
        f2 = np.ascontiguousarray(f2)
    else:
        f2 = None
    arrays = [np.ascontiguousarray(a) for a in (eta, ell, f1)]
    for a in arrays + ([f2] if f2 is not None else []):
        a.setflags(write=False)
    return ControlVariate(
        centre=centre, A=A, B=B, C=C, order=order,
        eta_bar=arrays[0], f_bar=arrays[1], f1_bar=arrays[2], f2_bar=f2,
        clamped=problem.clamped_count(eta),
    )


def q_total(cv: ControlVariate, theta) -> float:
    """Summed surrogate; cost independent of ``n``."""
    delta = np.asarray(theta, dtype=float) - cv.centre
    out = cv.A + float(cv.B @ delta)
    if cv.C is not None:
        out += 0.5 * float(delta @ cv.C @ delta)
    return out


def q_total_grad(cv: ControlVariate, theta) -> np.ndarray:
    if cv.C is None:
        return cv.B.copy()
    return cv.B + cv.C @ (np.asarray(theta, dtype=float) - cv.centre)


def q_term(cv: ControlVariate, problem: Problem, theta, k: int) -> float:
    delta = float(problem.X[k] @ np.asarray(theta, dtype=float)) - cv.eta_bar[k]
    out = cv.f_bar[k] + cv.f1_bar[k] * delta
    if cv.f2_bar is not None:
        out += 0.5 * cv.f2_bar[k] * delta * delta
    return float(out)


def _layout_for(problem, u, layout):
    if layout is None:
        layout = SubsampleLayout.single(problem.n, len(u), 1)
    return layout


def _raise_overflow(problem, u, theta):
    ell, _, _, _ = problem.terms(theta, rows=u, want_hess=False)
    problem.check_finite(ell, rows=u)
    raise NumericOverflowError(int(u[0]))


def estimate_loglik(problem: Problem, cv: ControlVariate, u, theta, layout=None) -> LogLikEstimate:
    """Difference estimator and its variance estimate at ``theta``; O(m) work."""
    u = np.ascontiguousarray(u, dtype=np.int64)
    layout = _layout_for(problem, u, layout)
    theta = np.ascontiguousarray(theta, dtype=float)
    dhat, var = kernels.sub_eval(
        problem.code, problem.param, problem.X, problem.y, problem.offset, theta, u,
        layout.pos_stratum, layout.scale, layout.n_strata,
        cv.eta_bar, cv.f_bar, cv.f1_bar, cv.f2_bar, 1.0, True, None,
    )
    ell_hat = q_total(cv, theta) + dhat
    if not (np.isfinite(ell_hat) and np.isfinite(var)):
        _raise_overflow(problem, u, theta)
    return LogLikEstimate(float(ell_hat), float(var))


def estimate_with_grad(problem, cv, u, theta, a, layout, var_grad=True):
    """Estimate plus gradient of ``a * ell_hat - a^2/2 * var_hat`` at fixed ``u``."""
    grad = np.empty(problem.dim)
    dhat, var = kernels.sub_eval(
        problem.code, problem.param, problem.X, problem.y, problem.offset, theta, u,
        layout.pos_stratum, layout.scale, layout.n_strata,
        cv.eta_bar, cv.f_bar, cv.f1_bar, cv.f2_bar, a, var_grad, grad,
    )
    delta = theta - cv.centre
    q = cv.A + float(cv.B @ delta)
    if cv.C is None:
        grad += a * cv.B
    else:
        c_delta = cv.C @ delta
        q += 0.5 * float(delta @ c_delta)
        grad += a * (cv.B + c_delta)
    return LogLikEstimate(q + dhat, var), grad


def annealed_log_estimate(est: LogLikEstimate, a: float) -> float:
    """``a * ell_hat - a^2 var_hat / 2``: log of the annealed likelihood estimate."""
    if a == 0.0:
        return 0.0
    return a * est.ell_hat - 0.5 * a * a * est.var_hat


def exact_loglik(problem: Problem, theta) -> LogLikEstimate:
    return LogLikEstimate(problem.loglik(theta), 0.0)
