# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-observation loops.

Mirrors ``_pykernels.full_eval`` and ``_pykernels.sub_eval`` exactly; see
there for the argument conventions. ``family_terms`` is re-exported from
the numpy module since it only runs once per tempering stage.
"""

from libc.math cimport exp, log1p, fabs
from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemv

from subsmc._pykernels import family_terms  # noqa: F401

cdef int LOGISTIC = 0
cdef int POISSON = 1
cdef int STUDENT_T = 2
cdef int GAUSSIAN = 3
cdef double POISSON_CLAMP = 30.0


cdef inline void _term(int code, double param, double y, double eta,
                       double* f, double* f1, double* f2, bint want_f) noexcept nogil:
    cdef double e, s, r, den, lam
    if code == LOGISTIC:
        if eta >= 0.0:
            e = exp(-eta)
            s = 1.0 / (1.0 + e)
            if want_f:
                f[0] = y * eta - eta - log1p(e)
        else:
            e = exp(eta)
            s = e / (1.0 + e)
            if want_f:
                f[0] = y * eta - log1p(e)
        f1[0] = y - s
        f2[0] = -s * (1.0 - s)
    elif code == POISSON:
        if fabs(eta) > POISSON_CLAMP:
            lam = exp(POISSON_CLAMP if eta > 0.0 else -POISSON_CLAMP)
            f1[0] = y
            f2[0] = 0.0
        else:
            lam = exp(eta)
            f1[0] = y - lam
            f2[0] = -lam
        if want_f:
            f[0] = y * eta - lam
    elif code == STUDENT_T:
        r = y - eta
        den = param + r * r
        if want_f:
            f[0] = -0.5 * (param + 1.0) * log1p(r * r / param)
        f1[0] = (param + 1.0) * r / den
        f2[0] = (param + 1.0) * (r * r - param) / (den * den)
    else:
        r = y - eta
        if want_f:
            f[0] = -0.5 * r * r / param
        f1[0] = r / param
        f2[0] = -1.0 / param


def full_eval(int code, double param, const double[:, ::1] X, const double[::1] y,
              const double[::1] offset, const double[::1] theta,
              bint want_value=True, double[::1] grad_out=None):
    # the two dense passes go through BLAS; a row-major n x d array is a
    # column-major d x n one, so X @ theta is gemv('T') and X.T @ f1 is gemv('N')
    cdef int n = <int> X.shape[0], d = <int> X.shape[1], k, one = 1
    cdef bint want_grad = grad_out is not None
    cdef double total = 0.0, f = 0.0, f1 = 0.0, f2 = 0.0, alpha = 1.0, beta = 0.0
    cdef char trans = b'T', notrans = b'N'
    if n == 0:
        if want_grad:
            grad_out[:] = 0.0
        return 0.0 if want_value else float("nan")
    cdef double* eta = <double*> malloc(n * sizeof(double))
    cdef double* g = <double*> malloc(n * sizeof(double))
    if eta == NULL or g == NULL:
        free(eta)
        free(g)
        raise MemoryError()
    with nogil:
        if d > 0:
            dgemv(&trans, &d, &n, &alpha, <double*> &X[0, 0], &d, <double*> &theta[0], &one,
                  &beta, eta, &one)
        else:
            for k in range(n):
                eta[k] = 0.0
        for k in range(n):
            _term(code, param, y[k], eta[k], &f, &f1, &f2, want_value)
            if want_value:
                total = total + offset[k] + f
            g[k] = f1
        if want_grad and d > 0:
            dgemv(&notrans, &d, &n, &alpha, <double*> &X[0, 0], &d, g, &one,
                  &beta, &grad_out[0], &one)
    free(eta)
    free(g)
    if want_value:
        return total
    return float("nan")


def sub_eval(int code, double param, const double[:, ::1] X, const double[::1] y,
             const double[::1] offset, const double[::1] theta, const long long[::1] u,
             const long long[::1] pos_stratum, const double[::1] scale, int n_strata,
             const double[::1] eta_bar, const double[::1] f_bar, const double[::1] f1_bar,
             const double[::1] f2_bar, double a=1.0, bint var_grad=True,
             double[::1] grad_out=None):
    cdef Py_ssize_t m = u.shape[0], d = X.shape[1], j, jj, k
    cdef bint want_grad = grad_out is not None
    cdef bint second = f2_bar is not None
    cdef double eta, delta, f = 0.0, f1 = 0.0, f2 = 0.0, q, g, dj, sc, dev, w
    cdef double dhat = 0.0, var = 0.0
    cdef long long s
    cdef const double* row
    cdef const double* th = &theta[0]
    cdef double* dbuf = <double*> malloc((m if m > 0 else 1) * sizeof(double))
    cdef double* gbuf = <double*> malloc((m if m > 0 else 1) * sizeof(double))
    cdef double* ssum = <double*> calloc(n_strata if n_strata > 0 else 1, sizeof(double))
    cdef double* scnt = <double*> calloc(n_strata if n_strata > 0 else 1, sizeof(double))
    cdef double* acc = <double*> calloc(d if d > 0 else 1, sizeof(double))
    if dbuf == NULL or gbuf == NULL or ssum == NULL or scnt == NULL or acc == NULL:
        free(dbuf); free(gbuf); free(ssum); free(scnt); free(acc)
        raise MemoryError()
    with nogil:
        for j in range(m):
            k = u[j]
            row = &X[k, 0]
            eta = 0.0
            for jj in range(d):
                eta = eta + row[jj] * th[jj]
            _term(code, param, y[k], eta, &f, &f1, &f2, True)
            delta = eta - eta_bar[k]
            q = f_bar[k] + f1_bar[k] * delta
            g = f1 - f1_bar[k]
            if second:
                q = q + 0.5 * f2_bar[k] * delta * delta
                g = g - f2_bar[k] * delta
            dj = offset[k] + f - q
            dbuf[j] = dj
            gbuf[j] = g
            s = pos_stratum[j]
            ssum[s] = ssum[s] + dj
            scnt[s] = scnt[s] + 1.0
            dhat = dhat + scale[s] * dj
        for s in range(n_strata):
            if scnt[s] > 0.0:
                ssum[s] = ssum[s] / scnt[s]
        for j in range(m):
            s = pos_stratum[j]
            sc = scale[s]
            dev = dbuf[j] - ssum[s]
            var = var + sc * sc * dev * dev
            if want_grad:
                w = a * sc
                if var_grad:
                    w = w - a * a * sc * sc * dev
                w = w * gbuf[j]
                row = &X[u[j], 0]
                for jj in range(d):
                    acc[jj] = acc[jj] + w * row[jj]
    if want_grad:
        for jj in range(d):
            grad_out[jj] = acc[jj]
    free(dbuf); free(gbuf); free(ssum); free(scnt); free(acc)
    return dhat, var
