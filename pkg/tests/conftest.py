import numpy as np
import pytest
from hypothesis import settings

from subsmc.model import Dataset, ModelSpec, PriorBlock, PriorSpec, Problem

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def normal_prior(d, variance=10.0):
    return PriorSpec([PriorBlock("normal", d, 0.0, variance)])


def make_problem(family, n=50, d=3, seed=0, **kw):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    theta = rng.uniform(-0.5, 0.5, d)
    eta = X @ theta
    if family == "logistic":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    elif family == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    elif family == "student_t":
        y = eta + rng.standard_t(5, n)
    else:
        y = eta + rng.standard_normal(n)
    spec = ModelSpec(family, normal_prior(d), **kw)
    return Problem(spec, Dataset(y, X))


@pytest.fixture(params=["logistic", "poisson", "student_t", "gaussian_linear"])
def family(request):
    return request.param


@pytest.fixture
def logistic_toy():
    """n=5, d=2 logistic problem used by the enumeration oracles."""
    X = np.array([[1.0, 0.3], [1.0, -1.2], [1.0, 0.8], [1.0, 2.0], [1.0, -0.4]])
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    return Problem(ModelSpec("logistic", normal_prior(2)), Dataset(y, X))


# one summary line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        outcome, detail = _ACCEPTANCE[key]
        tag = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{tag}] criterion {key}: {detail}")
