import json

import numpy as np
import pytest
from scipy import stats

from subsmc.errors import ConfigError, ParticleMapError
from subsmc.runtime import ParticlePool, Phase, derive_stream, parallel_map, resolve_seed
from subsmc.smc import SmcConfig, run

from .data.make_golden import GOLDEN, run_golden
from .test_smc import conjugate_problem


def test_same_key_same_stream():
    a = derive_stream(42, 3, 7, Phase.MOVE).random(1000)
    b = derive_stream(42, 3, 7, Phase.MOVE).random(1000)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("other", [(42, 3, 8, 2), (42, 4, 7, 2), (42, 3, 7, 1), (43, 3, 7, 2), (42, 3, 7, 2, 1)])
def test_distinct_keys_differ(other):
    base = derive_stream(42, 3, 7, 2).random(1000)
    assert not np.array_equal(base, derive_stream(*other).random(1000))


def test_pooled_streams_uniform():
    draws = np.concatenate([derive_stream(5, 1, p, Phase.MOVE).random(1000) for p in range(100)])
    counts = np.histogram(draws, bins=100, range=(0, 1))[0]
    assert stats.chisquare(counts).pvalue > 0.001


def test_streams_uncorrelated_across_particles():
    a = derive_stream(5, 0, 0, 0).standard_normal(10_000)
    b = derive_stream(5, 0, 1, 0).standard_normal(10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(10_000)


def double(index, particle, shared, context):
    return {"x": particle["x"] * 2 + shared, "i": index}


def identity(index, particle, shared, context):
    return dict(particle)


def fail_on_odd(index, particle, shared, context):
    if index % 2:
        raise ValueError(f"bad {index}")
    return {"x": particle["x"]}


def test_identity_map():
    payload = {"x": np.arange(10.0), "u": np.arange(20).reshape(10, 2)}
    for workers in (1, 3):
        out = parallel_map(identity, payload, workers=workers)
        np.testing.assert_array_equal(out["x"], payload["x"])
        np.testing.assert_array_equal(out["u"], payload["u"])


def test_map_independent_of_workers():
    payload = {"x": np.linspace(0, 1, 17)}
    seq = parallel_map(double, payload, 1.0)
    for workers in (2, 3, 8):
        par = parallel_map(double, payload, 1.0, workers=workers)
        np.testing.assert_array_equal(par["x"], seq["x"])
        np.testing.assert_array_equal(par["i"], np.arange(17))


def test_errors_collected_with_indices():
    with pytest.raises(ParticleMapError) as err:
        parallel_map(fail_on_odd, {"x": np.arange(6.0)}, workers=2)
    assert [i for i, _ in err.value.failures] == [1, 3, 5]
    assert "1" in str(err.value)


def test_pool_rejects_zero_workers():
    with pytest.raises(ConfigError):
        ParticlePool(0)


def test_seed_override(monkeypatch):
    monkeypatch.delenv("SUBSMC_SEED", raising=False)
    assert resolve_seed(7) == 7
    monkeypatch.setenv("SUBSMC_SEED", "0x10")
    assert resolve_seed(7) == 16
    monkeypatch.setenv("SUBSMC_SEED", "abc")
    with pytest.raises(ConfigError):
        resolve_seed(7)


def test_gibbs_golden_output():
    golden = json.loads(GOLDEN.read_text())
    for workers in (1, 3):
        out = run_golden(workers)
        np.testing.assert_array_equal(out["u"], golden["u"])
        for key in ("theta", "ell", "var"):
            np.testing.assert_allclose(out[key], golden[key], rtol=1e-10, atol=1e-12)


def test_full_run_bit_identical_across_workers():
    prob = conjugate_problem(n=300)
    cfg = SmcConfig(particles=40, m=30, blocks=3)
    ref = run(prob, cfg, 11, workers=1)
    for workers in (2, 8):
        res = run(prob, cfg, 11, workers=workers)
        np.testing.assert_array_equal(res.theta, ref.theta)
        np.testing.assert_array_equal(res.weights, ref.weights)
        assert res.log_z == ref.log_z
        assert [t["a_p"] for t in res.trace] == [t["a_p"] for t in ref.trace]
