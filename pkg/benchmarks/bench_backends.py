"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_backends.py [--n 20000] [--d 10] [--repeat 200]

Reports microseconds per call for the full-data pass (value and gradient) and
for the subsampled difference-estimator pass at several subsample sizes.
"""

import argparse
import timeit

import numpy as np

from subsmc._backend import get_kernels
from subsmc.estimator import SubsampleLayout, build_control_variate
from subsmc.model import Dataset, ModelSpec, PriorBlock, PriorSpec, Problem

FAMILIES = {"logistic": {}, "poisson": {}, "student_t": {"nu": 5.0}, "gaussian_linear": {"sigma2": 1.0}}


def make_problem(family, n, d, rng):
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    theta = rng.normal(0, 0.5, d)
    eta = X @ theta
    if family == "logistic":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    elif family == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = eta + rng.standard_normal(n)
    prior = PriorSpec([PriorBlock("normal", d, 0.0, 10.0)])
    return Problem(ModelSpec(family, prior, **FAMILIES[family]), Dataset(y, X)), theta


def per_call(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--d", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--m", type=int, nargs="+", default=[100, 200, 1000])
    args = ap.parse_args()

    try:
        backends = {"cython": get_kernels("cython"), "python": get_kernels("python")}
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"n={args.n} d={args.d}; microseconds per call (cython / python, speedup)")
    for family in FAMILIES:
        prob, theta = make_problem(family, args.n, args.d, rng)
        cv = build_control_variate(prob, theta + 0.05)
        grad = np.empty(args.d)
        rows = []
        for label, want_value, g in (("full value", True, None), ("full grad", False, grad)):
            t = {name: per_call(lambda k=k: k.full_eval(prob.code, prob.param, prob.X, prob.y, prob.offset,
                                                        theta, want_value, g), args.repeat)
                 for name, k in backends.items()}
            rows.append((label, t))
        for m in args.m:
            layout = SubsampleLayout.single(prob.n, m, 1)
            u = layout.draw(rng)
            t = {name: per_call(lambda k=k: k.sub_eval(prob.code, prob.param, prob.X, prob.y, prob.offset, theta,
                                                       u, layout.pos_stratum, layout.scale, layout.n_strata,
                                                       cv.eta_bar, cv.f_bar, cv.f1_bar, cv.f2_bar, 1.0, True,
                                                       grad), args.repeat)
                 for name, k in backends.items()}
            rows.append((f"sub m={m}", t))
        print(f"\n{family}")
        for label, t in rows:
            print(f"  {label:<12} {t['cython']:9.1f} / {t['python']:9.1f}   x{t['python'] / t['cython']:.1f}")


if __name__ == "__main__":
    main()
