"""Pure numpy implementations of the per-observation hot loops.

This module is the reference backend and the fallback when the compiled
``_core`` extension is unavailable. Both backends expose the same three
functions with identical signatures; results agree to rounding.
"""

import numpy as np
from scipy.special import expit

LOGISTIC, POISSON, STUDENT_T, GAUSSIAN = 0, 1, 2, 3
POISSON_CLAMP = 30.0


def family_terms(code, param, y, eta, want_value=True, want_hess=True):
    """Linear-predictor part of the log-density and its first two derivatives.

    Returns ``(f, f1, f2)`` with ``f`` the eta-dependent part of
    ``log p(y | eta)`` (the per-observation constant lives in the model's
    offset vector), ``f1 = df/deta`` and ``f2 = d2f/deta2``. Entries not
    requested are ``None``.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    f = f2 = None
    if code == LOGISTIC:
        s = expit(eta)
        if want_value:
            f = y * eta - np.logaddexp(0.0, eta)
        f1 = y - s
        if want_hess:
            f2 = -s * (1.0 - s)
    elif code == POISSON:
        clamped = np.abs(eta) > POISSON_CLAMP
        lam = np.exp(np.clip(eta, -POISSON_CLAMP, POISSON_CLAMP))
        if want_value:
            f = y * eta - lam
        f1 = np.where(clamped, y, y - lam)
        if want_hess:
            f2 = np.where(clamped, 0.0, -lam)
    elif code == STUDENT_T:
        nu = param
        r = y - eta
        den = nu + r * r
        if want_value:
            f = -0.5 * (nu + 1.0) * np.log1p(r * r / nu)
        f1 = (nu + 1.0) * r / den
        if want_hess:
            f2 = (nu + 1.0) * (r * r - nu) / (den * den)
    elif code == GAUSSIAN:
        r = y - eta
        if want_value:
            f = -0.5 * r * r / param
        f1 = r / param
        if want_hess:
            f2 = np.full_like(r, -1.0 / param)
    else:
        raise ValueError(f"unknown family code {code}")
    return f, f1, f2


def full_eval(code, param, X, y, offset, theta, want_value=True, grad_out=None):
    """Full-data log-likelihood; gradient written into ``grad_out`` if given."""
    eta = X @ theta
    f, f1, _ = family_terms(code, param, y, eta, want_value=want_value, want_hess=False)
    if grad_out is not None:
        grad_out[:] = X.T @ f1
    if want_value:
        return float(np.sum(offset + f))
    return float("nan")


def sub_eval(code, param, X, y, offset, theta, u, pos_stratum, scale, n_strata,
             eta_bar, f_bar, f1_bar, f2_bar, a=1.0, var_grad=True, grad_out=None):
    """Subsampled part of the difference estimator.

    Returns ``(dhat, var)`` where ``dhat = sum_j scale[s_j] * d_{u_j}`` and
    ``var = sum_s scale_s**2 * sum_{j in s} (d_{u_j} - dbar_s)**2``. With
    ``grad_out`` the gradient of ``a * dhat - a**2 / 2 * var`` (or of
    ``a * dhat`` alone when ``var_grad`` is false) is written there.
    ``f2_bar=None`` selects the first-order control variate.
    """
    Xu = X[u]
    eta = Xu @ theta
    yu = y[u]
    delta = eta - eta_bar[u]
    f, f1, _ = family_terms(code, param, yu, eta, want_value=True, want_hess=False)
    q = f_bar[u] + f1_bar[u] * delta
    g = f1 - f1_bar[u]
    if f2_bar is not None:
        f2u = f2_bar[u]
        q = q + 0.5 * f2u * delta * delta
        g = g - f2u * delta
    d = offset[u] + f - q
    sc = scale[pos_stratum]
    counts = np.bincount(pos_stratum, minlength=n_strata)
    dbar = np.bincount(pos_stratum, weights=d, minlength=n_strata) / np.maximum(counts, 1)
    dev = d - dbar[pos_stratum]
    dhat = float(np.sum(sc * d))
    var = float(np.sum(sc * sc * dev * dev))
    if grad_out is not None:
        w = a * sc
        if var_grad:
            w = w - a * a * sc * sc * dev
        grad_out[:] = Xu.T @ (w * g)
    return dhat, var
