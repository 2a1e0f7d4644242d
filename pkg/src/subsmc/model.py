"""Observation models, priors and dataset handling.

Every supported family is a generalised linear model: the log-density of
observation ``k`` depends on the parameters only through the linear predictor
``eta_k = x_k @ theta``. Gradients and Hessians of the per-observation terms
therefore reduce to scalar derivatives times ``x_k`` and ``x_k x_k^T``.
Observation indices ``k`` are 0-based throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, log_ndtr

from ._backend import kernels
from ._pykernels import GAUSSIAN, LOGISTIC, POISSON, POISSON_CLAMP, STUDENT_T
from .errors import ConfigError, NumericOverflowError

FAMILIES = ("logistic", "poisson", "student_t", "gaussian_linear", "fixed_effects")
_FAMILY_CODE = {
    "logistic": LOGISTIC,
    "poisson": POISSON,
    "student_t": STUDENT_T,
    "gaussian_linear": GAUSSIAN,
    "fixed_effects": GAUSSIAN,
}
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable observation records.

    ``covariates`` already contains any intercept column. ``group_ids`` uses
    the external 1-based labels; ``group_index`` gives the 0-based version.
    """

    responses: np.ndarray
    covariates: np.ndarray
    group_ids: np.ndarray | None = None
    columns: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.ascontiguousarray(self.responses, dtype=float)
        X = np.ascontiguousarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        problems = []
        if y.ndim != 1 or y.shape[0] < 1:
            problems.append("responses must be a non-empty vector")
        elif X.shape[0] != y.shape[0]:
            problems.append(f"covariates have {X.shape[0]} rows, responses {y.shape[0]}")
        if not np.all(np.isfinite(X)):
            problems.append("covariate rows must be finite")
        g = None
        if self.group_ids is not None:
            g = np.asarray(self.group_ids).astype(np.int64)
            labels = np.unique(g)
            if g.shape != y.shape:
                problems.append("group_ids must have one entry per observation")
            elif labels[0] != 1 or labels[-1] != labels.size:
                problems.append("group_ids must be contiguous labels 1..n_groups")
        if problems:
            raise ConfigError(problems)
        for arr in (y, X) + ((g,) if g is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "group_ids", g)
        if not self.columns:
            object.__setattr__(
                self, "columns", tuple(f"x{j + 1}" for j in range(X.shape[1]))
            )

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_groups(self) -> int:
        return 0 if self.group_ids is None else int(self.group_ids.max())

    @property
    def group_index(self) -> np.ndarray | None:
        return None if self.group_ids is None else self.group_ids - 1

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_groups = (self.group_ids is None and other.group_ids is None) or (
            self.group_ids is not None
            and other.group_ids is not None
            and np.array_equal(self.group_ids, other.group_ids)
        )
        return (
            np.array_equal(self.responses, other.responses)
            and np.array_equal(self.covariates, other.covariates)
            and same_groups
        )

    __hash__ = None


# --------------------------------------------------------------------------
# priors


PRIOR_KINDS = ("normal", "truncated_normal", "normal_mixture")


@dataclass(frozen=True)
class PriorBlock:
    """Independent prior on ``size`` consecutive coordinates.

    ``normal`` and ``truncated_normal`` use ``mean``/``variance``; the
    truncated version has support ``[0, inf)``. ``normal_mixture`` is
    ``w N(0, var1) + (1 - w) N(0, var2)``.
    """

    kind: str
    size: int = 1
    mean: float = 0.0
    variance: float = 1.0
    w: float = 0.5
    var1: float = 1.0
    var2: float = 1.0

    def validate(self):
        problems = []
        if self.kind not in PRIOR_KINDS:
            problems.append(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if self.size < 1:
            problems.append("prior block size must be >= 1")
        if self.kind in ("normal", "truncated_normal") and not self.variance > 0:
            problems.append("prior variance must be > 0")
        if self.kind == "normal_mixture":
            if not 0.0 < self.w < 1.0:
                problems.append("mixture weight w must lie in (0, 1)")
            if not (self.var1 > 0 and self.var2 > 0):
                problems.append("mixture variances must be > 0")
        return problems


class PriorSpec:
    """Product prior assembled from :class:`PriorBlock` pieces."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        problems = [p for b in self.blocks for p in b.validate()]
        if not self.blocks:
            problems.append("prior needs at least one block")
        if problems:
            raise ConfigError(problems)
        kinds = np.concatenate([np.full(b.size, PRIOR_KINDS.index(b.kind)) for b in self.blocks])
        rep = lambda attr: np.concatenate([np.full(b.size, float(getattr(b, attr))) for b in self.blocks])  # noqa: E731
        self._normal = kinds == 0
        self._trunc = kinds == 1
        self._mix = kinds == 2
        self._mean = rep("mean")
        self._var = rep("variance")
        self._w = rep("w")
        self._var1 = rep("var1")
        self._var2 = rep("var2")
        self._any_trunc = bool(self._trunc.any())
        self._any_mix = bool(self._mix.any())
        # log normalising constant of the [0, inf) truncation
        sd = np.sqrt(self._var)
        self._trunc_lognorm = np.where(self._trunc, log_ndtr(self._mean / sd), 0.0)
        # per-call constants for the density and its gradient
        self._inv_var = 1.0 / self._var
        self._base_const = -0.5 * (np.log(self._var) + _LOG_2PI) - self._trunc_lognorm
        self._trunc_idx = np.flatnonzero(self._trunc)
        self._mix_idx = np.flatnonzero(self._mix)
        mi = self._mix_idx
        self._mix_inv1 = 1.0 / self._var1[mi]
        self._mix_inv2 = 1.0 / self._var2[mi]
        # log weight plus normal constant of each component, and their difference
        self._mix_c1 = np.log(self._w[mi]) - 0.5 * (np.log(self._var1[mi]) + _LOG_2PI)
        self._mix_c2 = np.log1p(-self._w[mi]) - 0.5 * (np.log(self._var2[mi]) + _LOG_2PI)

    @property
    def dim(self) -> int:
        return self._mean.shape[0]

    @property
    def truncated(self) -> np.ndarray:
        """Mask of coordinates restricted to ``[0, inf)``."""
        return self._trunc.copy()

    def __eq__(self, other):
        return isinstance(other, PriorSpec) and self.blocks == other.blocks

    def __repr__(self):
        return f"PriorSpec({list(self.blocks)!r})"

    def to_dict(self):
        out = []
        for b in self.blocks:
            item = {"kind": b.kind, "size": b.size}
            if b.kind == "normal_mixture":
                item.update(w=b.w, var1=b.var1, var2=b.var2)
            else:
                item.update(mean=b.mean, variance=b.variance)
            out.append(item)
        return out

    @classmethod
    def from_dict(cls, items):
        return cls([PriorBlock(**item) for item in items])

    def mean(self):
        """Prior mean vector."""
        out = self._mean.copy()
        out[self._mix] = 0.0
        if self._any_trunc:
            sd = np.sqrt(self._var[self._trunc])
            mu = self._mean[self._trunc]
            alpha = -mu / sd
            # E[X | X >= 0] for X ~ N(mu, sd^2)
            lam = np.exp(-0.5 * alpha**2 - 0.5 * _LOG_2PI - log_ndtr(-alpha))
            out[self._trunc] = mu + sd * lam
        return out

    def sample(self, rng, size):
        """Draw ``size`` independent parameter vectors, shape ``(size, dim)``."""
        z = rng.standard_normal((size, self.dim))
        out = self._mean + np.sqrt(self._var) * z
        if self._any_mix:
            pick = rng.random((size, self.dim)) < self._w
            sd = np.where(pick, np.sqrt(self._var1), np.sqrt(self._var2))
            out = np.where(self._mix, sd * z, out)
        if self._any_trunc:
            from scipy.stats import truncnorm

            idx = np.flatnonzero(self._trunc)
            sd = np.sqrt(self._var[idx])
            mu = self._mean[idx]
            draws = truncnorm.rvs((0.0 - mu) / sd, np.inf, loc=mu, scale=sd,
                                  size=(size, idx.size), random_state=rng)
            out[:, idx] = draws
        return out

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if self._any_trunc and np.any(theta[self._trunc_idx] < 0.0):
            return -math.inf
        r = theta - self._mean
        lp = self._base_const - 0.5 * r * r * self._inv_var
        if self._any_mix:
            t2 = theta[self._mix_idx] ** 2
            lp[self._mix_idx] = np.logaddexp(self._mix_c1 - 0.5 * t2 * self._mix_inv1,
                                             self._mix_c2 - 0.5 * t2 * self._mix_inv2)
        return float(lp.sum())

    def grad_log_density(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        g = (self._mean - theta) * self._inv_var
        if self._any_mix:
            t = theta[self._mix_idx]
            # responsibility of the first component
            z = (self._mix_c2 - self._mix_c1) - 0.5 * t * t * (self._mix_inv2 - self._mix_inv1)
            r1 = expit(-z)
            g[self._mix_idx] = -t * (r1 * self._mix_inv1 + (1.0 - r1) * self._mix_inv2)
        return g


def log_prior(prior: PriorSpec, theta) -> float:
    """Log prior density, normalising constants included; ``-inf`` off-support."""
    return prior.log_density(theta)


def grad_log_prior(prior: PriorSpec, theta) -> np.ndarray:
    return prior.grad_log_density(theta)


# --------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    family: str
    prior: PriorSpec
    nu: float = 5.0
    sigma2: float = 1.0

    def __post_init__(self):
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "student_t" and not self.nu > 2:
            problems.append("student_t requires nu > 2")
        if self.family in ("gaussian_linear", "fixed_effects") and not self.sigma2 > 0:
            problems.append("sigma2 must be > 0")
        if problems:
            raise ConfigError(problems)

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def code(self) -> int:
        return _FAMILY_CODE[self.family]

    @property
    def param(self) -> float:
        if self.family == "student_t":
            return float(self.nu)
        if self.family in ("gaussian_linear", "fixed_effects"):
            return float(self.sigma2)
        return 0.0

    def design_matrix(self, data: Dataset) -> np.ndarray:
        if self.family == "fixed_effects":
            if data.group_ids is None:
                raise ConfigError("fixed_effects requires a group column")
            onehot = np.zeros((data.n, data.n_groups))
            onehot[np.arange(data.n), data.group_index] = 1.0
            return np.ascontiguousarray(np.hstack([onehot, data.covariates]))
        return data.covariates

    def offsets(self, y) -> np.ndarray:
        """Per-observation log-density constants not depending on ``theta``."""
        y = np.asarray(y, dtype=float)
        if self.family == "poisson":
            return -gammaln(y + 1.0)
        if self.family == "student_t":
            nu = self.nu
            c = gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi)
            return np.full(y.shape, c)
        if self.family in ("gaussian_linear", "fixed_effects"):
            return np.full(y.shape, -0.5 * math.log(2.0 * math.pi * self.sigma2))
        return np.zeros(y.shape)

    def to_dict(self):
        out = {"family": self.family, "prior": self.prior.to_dict()}
        if self.family == "student_t":
            out["nu"] = self.nu
        if self.family in ("gaussian_linear", "fixed_effects"):
            out["sigma2"] = self.sigma2
        return out


class Problem:
    """A model bound to a dataset: design matrix, offsets and kernel plumbing.

    Instances are read-only and are what particle workers receive.
    """

    def __init__(self, spec: ModelSpec, data: Dataset):
        X = np.ascontiguousarray(spec.design_matrix(data), dtype=float)
        if X.shape[1] != spec.dim:
            raise ConfigError(
                f"prior has {spec.dim} coordinates but the design matrix has {X.shape[1]} columns"
            )
        if spec.family == "logistic" and not np.all((data.responses == 0) | (data.responses == 1)):
            raise ConfigError("logistic responses must be 0/1")
        if spec.family == "poisson" and (
            np.any(data.responses < 0) or np.any(data.responses != np.round(data.responses))
        ):
            raise ConfigError("poisson responses must be non-negative integers")
        self.spec = spec
        self.data = data
        self.X = X
        self.y = data.responses
        self.offset = np.ascontiguousarray(spec.offsets(data.responses))
        self.code = spec.code
        self.param = spec.param
        self.prior = spec.prior
        for arr in (self.X, self.offset):
            arr.setflags(write=False)
        # gaussian log-likelihood is quadratic in theta: keep sufficient statistics
        self._quad = None
        if self.code == GAUSSIAN:
            self._quad = (self.X.T @ self.X, self.X.T @ self.y, float(self.y @ self.y),
                          math.fsum(self.offset))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __getstate__(self):
        return {"spec": self.spec, "data": self.data}

    def __setstate__(self, state):
        self.__init__(state["spec"], state["data"])

    def terms(self, theta, rows=None, want_hess=True):
        """Per-observation ``(l_k, dl_k/deta, d2l_k/deta2, eta_k)`` for ``rows``."""
        X = self.X if rows is None else self.X[rows]
        y = self.y if rows is None else self.y[rows]
        off = self.offset if rows is None else self.offset[rows]
        eta = X @ np.asarray(theta, dtype=float)
        f, f1, f2 = kernels.family_terms(self.code, self.param, y, eta, True, want_hess)
        return off + f, f1, f2, eta

    def clamped_count(self, eta) -> int:
        if self.code != POISSON:
            return 0
        return int(np.count_nonzero(np.abs(eta) > POISSON_CLAMP))

    def check_finite(self, values, rows=None):
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            k = bad[0] if rows is None else np.asarray(rows)[bad[0]]
            raise NumericOverflowError(int(k), float(values[bad[0]]))

    def loglik(self, theta) -> float:
        """Exact full-data log-likelihood (raises on a non-finite term)."""
        theta = np.ascontiguousarray(theta, dtype=float)
        if self._quad is not None:
            G, h, yy, off = self._quad
            with np.errstate(over="ignore", invalid="ignore"):
                val = float(off - 0.5 * (yy - 2.0 * h @ theta + theta @ G @ theta) / self.param)
        else:
            val = kernels.full_eval(self.code, self.param, self.X, self.y, self.offset, theta, True, None)
        if not math.isfinite(val):
            ell, _, _, _ = self.terms(theta, want_hess=False)
            self.check_finite(ell)
        return val

    def loglik_grad(self, theta, want_value=False):
        theta = np.ascontiguousarray(theta, dtype=float)
        if self._quad is not None:
            G, h, _, _ = self._quad
            with np.errstate(over="ignore", invalid="ignore"):
                g = (h - G @ theta) / self.param
            return (self.loglik(theta) if want_value else float("nan")), g
        g = np.empty(self.dim)
        val = kernels.full_eval(self.code, self.param, self.X, self.y, self.offset, theta, want_value, g)
        return val, g


def _row(spec: ModelSpec, data: Dataset, k: int) -> np.ndarray:
    if not 0 <= k < data.n:
        raise IndexError(f"observation index {k} out of range for n={data.n}")
    x = data.covariates[k]
    if spec.family == "fixed_effects":
        onehot = np.zeros(data.n_groups)
        onehot[data.group_index[k]] = 1.0
        x = np.concatenate([onehot, x])
    return x


def _scalar_terms(spec, data, theta, k):
    theta = np.asarray(theta, dtype=float)
    x = _row(spec, data, k)
    eta = float(x @ theta)
    y = data.responses[k : k + 1]
    f, f1, f2 = kernels.family_terms(spec.code, spec.param, y, np.array([eta]))
    values = (spec.offsets(y)[0] + f[0], f1[0], f2[0])
    if not all(math.isfinite(v) for v in values):
        raise NumericOverflowError(k, values[0])
    return x, values


def log_density_term(spec: ModelSpec, data: Dataset, theta, k: int) -> float:
    """``log p(y_k | theta)`` for the 0-based observation ``k``."""
    _, (f, _, _) = _scalar_terms(spec, data, theta, k)
    return float(f)


def grad_term(spec: ModelSpec, data: Dataset, theta, k: int) -> np.ndarray:
    x, (_, f1, _) = _scalar_terms(spec, data, theta, k)
    return f1 * x


def hessian_term(spec: ModelSpec, data: Dataset, theta, k: int) -> np.ndarray:
    x, (_, _, f2) = _scalar_terms(spec, data, theta, k)
    return f2 * np.outer(x, x)


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimDesign:
    """Recipe for a simulated regression dataset.

    ``d`` counts every regression coefficient on the covariates, including the
    intercept when ``intercept`` is true. ``theta_law`` is ``("uniform", lo,
    hi)`` or ``("normal", mean, sd)``. For ``fixed_effects`` designs,
    ``group_sizes`` and ``alpha_laws`` (one ``(kind, mean, sd)`` per group,
    kind ``normal`` or ``truncated_normal``) generate the group effects.
    """

    family: str
    n: int
    d: int
    rho: float = 0.0
    intercept: bool = False
    theta_law: tuple = ("uniform", -5.0, 5.0)
    nu: float = 5.0
    sigma2: float = 1.0
    group_sizes: tuple = ()
    alpha_laws: tuple = ()

    def validate(self):
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"unknown family {self.family!r}")
        if not 0.0 <= self.rho < 1.0:
            problems.append(f"rho must lie in [0, 1), got {self.rho}")
        if self.family == "fixed_effects":
            if not self.group_sizes or len(self.alpha_laws) != len(self.group_sizes):
                problems.append("fixed_effects designs need group_sizes and one alpha law per group")
            elif sum(self.group_sizes) != self.n:
                problems.append("group_sizes must sum to n")
        if self.n < 1 or self.d < 1:
            problems.append("n and d must be positive")
        if self.theta_law[0] not in ("uniform", "normal"):
            problems.append("theta_law must be uniform or normal")
        if problems:
            raise ConfigError(problems)

    def to_dict(self):
        return {
            "family": self.family, "n": self.n, "d": self.d, "rho": self.rho,
            "intercept": self.intercept, "theta_law": list(self.theta_law),
            "nu": self.nu, "sigma2": self.sigma2,
            "group_sizes": list(self.group_sizes),
            "alpha_laws": [list(x) for x in self.alpha_laws],
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["theta_law"] = tuple(d.get("theta_law", ("uniform", -5.0, 5.0)))
        d["group_sizes"] = tuple(d.get("group_sizes", ()))
        d["alpha_laws"] = tuple(tuple(x) for x in d.get("alpha_laws", ()))
        return cls(**d)


def _draw_law(rng, law, size):
    kind, a, b = law
    if kind == "uniform":
        return rng.uniform(a, b, size)
    if kind == "normal":
        return a + b * rng.standard_normal(size)
    if kind == "truncated_normal":
        from scipy.stats import truncnorm

        return truncnorm.rvs(-a / b, np.inf, loc=a, scale=b, size=size, random_state=rng)
    raise ConfigError(f"unknown law {kind!r}")


def simulate_dataset(design: SimDesign, seed) -> Dataset:
    """Simulate a dataset; a pure function of ``(design, seed)``.

    Covariates are equicorrelated Gaussians (unit variance, pairwise
    correlation ``rho``) built as ``sqrt(rho) z0 + sqrt(1 - rho) z_j``.
    """
    design.validate()
    rng = np.random.default_rng(seed)
    n_cov = design.d - (1 if design.intercept else 0)
    z = rng.standard_normal((design.n, n_cov))
    if design.rho > 0.0 and n_cov > 1:
        z0 = rng.standard_normal((design.n, 1))
        z = math.sqrt(design.rho) * z0 + math.sqrt(1.0 - design.rho) * z
    columns = [f"x{j + 1}" for j in range(n_cov)]
    X = z
    if design.intercept:
        X = np.hstack([z, np.ones((design.n, 1))])
        columns.append("intercept")
    theta = _draw_law(rng, design.theta_law, design.d)
    eta = X @ theta
    groups = None
    alpha = None
    if design.family == "fixed_effects":
        sizes = np.asarray(design.group_sizes)
        groups = np.repeat(np.arange(1, sizes.size + 1), sizes)
        alpha = np.array([_draw_law(rng, law, 1)[0] for law in design.alpha_laws])
        eta = eta + alpha[groups - 1]
    fam = design.family
    if fam == "logistic":
        y = (rng.random(design.n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    elif fam == "poisson":
        y = rng.poisson(np.exp(np.clip(eta, -POISSON_CLAMP, POISSON_CLAMP))).astype(float)
    elif fam == "student_t":
        y = eta + rng.standard_t(design.nu, design.n)
    else:
        y = eta + math.sqrt(design.sigma2) * rng.standard_normal(design.n)
    true_theta = theta if alpha is None else np.concatenate([alpha, theta])
    meta = {
        "design": design.to_dict(),
        "seed": seed,
        "true_theta": true_theta.tolist(),
        "covariate_law": "equicorrelated gaussian copula",
    }
    return Dataset(y, X, groups, tuple(columns), meta)


# --------------------------------------------------------------------------
# CSV


def load_dataset(path, intercept: bool = False) -> Dataset:
    """Read a dataset CSV: column ``y``, numeric covariates, optional ``group``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if "y" not in header:
        raise ConfigError(f"{path}: missing 'y' column")
    try:
        table = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric value ({exc})") from None
    if table.ndim != 2 or table.shape[0] == 0:
        raise ConfigError(f"{path}: no data rows")
    iy = header.index("y")
    cov_cols = [j for j, h in enumerate(header) if h not in ("y", "group")]
    groups = table[:, header.index("group")].astype(np.int64) if "group" in header else None
    X = table[:, cov_cols]
    names = [header[j] for j in cov_cols]
    if intercept:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
        names.append("intercept")
    return Dataset(table[:, iy], X, groups, tuple(names), {"source": str(path)})


def save_dataset(data: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["y", *data.columns]
    if data.group_ids is not None:
        header.append("group")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(data.n):
            row = [repr(float(data.responses[k]))] + [repr(float(v)) for v in data.covariates[k]]
            if data.group_ids is not None:
                row.append(str(int(data.group_ids[k])))
            w.writerow(row)
