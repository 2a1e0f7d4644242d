"""Result persistence: particles CSV, trace JSONL and summary JSON.

Floats are written with ``repr`` (shortest round-tripping form), so a
result read back is bit-identical to the one written.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from ._backend import BACKEND
from .errors import ConfigError
from .smc import SmcResult

PARTICLES = "particles.csv"
TRACE = "trace.jsonl"
SUMMARY = "summary.json"


def build_id() -> str:
    """Content hash of the package sources, in the style of a git object id."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for p in sorted(root.glob("*.py")) + sorted(root.glob("*.pyx")):
        data = p.read_bytes()
        h.update(f"blob {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()[:12]


def _build_info():
    from . import __version__

    return {"version": __version__, "id": build_id(), "backend": BACKEND}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_particles(path, theta, weights):
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"theta_{j + 1}" for j in range(theta.shape[1])] + ["weight"])
        for row, wi in zip(theta, w):
            out.writerow([repr(float(v)) for v in row] + [repr(float(wi))])


def read_particles(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader if r]
    if not header or header[-1] != "weight":
        raise ConfigError(f"{path}: last column must be 'weight'")
    table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return table[:, :-1], table[:, -1]


def write_trace(path, trace):
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in trace:
            fh.write(json.dumps(_jsonable(record)) + "\n")


def read_trace(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def posterior_moments(theta, weights):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ theta
    var = w @ (theta - mean) ** 2
    return mean, var


def single_run_se(theta, weights):
    """Particle-based standard errors of the posterior mean and variance.

    Treats the weighted cloud as ``ESS`` independent draws; the variance SE
    uses the Gaussian approximation ``var * sqrt(2 / ESS)``.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    n_eff = 1.0 / np.sum(w * w)
    _, var = posterior_moments(theta, w)
    return np.sqrt(var / n_eff), var * math.sqrt(2.0 / n_eff)


def summary_dict(result: SmcResult, config_echo=None, timing=True):
    mean, var = posterior_moments(result.theta, result.weights)
    se_mean, se_var = single_run_se(result.theta, result.weights)
    return _jsonable({
        "log_Z": result.log_z,
        "P": result.stages,
        "M": int(result.theta.shape[0]),
        "dim": int(result.theta.shape[1]),
        "posterior_mean": mean,
        "posterior_var": var,
        "se": {"log_Z": None, "posterior_mean": se_mean, "posterior_var": se_var, "source": "particles"},
        "mean_moves": result.mean_moves(),
        "seconds": result.seconds if timing else 0.0,
        "config": config_echo if config_echo is not None else result.config,
        "engine_config": result.config,
        "meta": result.meta,
        "build": _build_info(),
    })


def save_result(result: SmcResult, out_dir, config_echo=None, timing=True) -> Path:
    """Write the three result files into ``out_dir``.

    With ``timing=False`` wall-clock fields are zeroed so that repeated runs
    under one seed produce byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_particles(out / PARTICLES, result.theta, result.weights)
    trace = result.trace if timing else [dict(t, seconds=0.0) for t in result.trace]
    write_trace(out / TRACE, trace)
    write_summary(summary_dict(result, config_echo, timing), out)
    return out


def aggregate_summary(summaries, config_echo=None) -> dict:
    """Combine per-seed summaries; standard errors come from the spread across runs."""
    k = len(summaries)
    log_z = np.array([s["log_Z"] for s in summaries], dtype=float)
    means = np.array([s["posterior_mean"] for s in summaries], dtype=float)
    varis = np.array([s["posterior_var"] for s in summaries], dtype=float)

    def spread(a):
        if k < 2:
            return np.full(a.shape[1:], np.nan)
        return a.std(axis=0, ddof=1) / math.sqrt(k)

    return _jsonable({
        "log_Z": float(log_z.mean()),
        "P": float(np.mean([s["P"] for s in summaries])),
        "M": summaries[0]["M"],
        "dim": summaries[0]["dim"],
        "posterior_mean": means.mean(axis=0),
        "posterior_var": varis.mean(axis=0),
        "se": {"log_Z": float(spread(log_z[:, None])[0]), "posterior_mean": spread(means),
               "posterior_var": spread(varis), "source": "runs"},
        "mean_moves": float(np.mean([s["mean_moves"] for s in summaries])),
        "seconds": float(sum(s["seconds"] for s in summaries)),
        "runs": [{"log_Z": s["log_Z"], "P": s["P"], "seed": s["meta"].get("seed"),
                  "posterior_mean": s["posterior_mean"], "posterior_var": s["posterior_var"]}
                 for s in summaries],
        "config": config_echo if config_echo is not None else summaries[0]["config"],
        "build": _build_info(),
    })


def write_summary(summary, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SUMMARY).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return out


def load_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / SUMMARY
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def load_result(out_dir) -> SmcResult:
    out = Path(out_dir)
    theta, weights = read_particles(out / PARTICLES)
    summary = load_summary(out)
    log_z = summary["log_Z"]
    return SmcResult(
        theta=theta, weights=weights,
        log_z=math.nan if log_z is None else float(log_z),
        trace=read_trace(out / TRACE), config=summary.get("engine_config", {}),
        seconds=float(summary.get("seconds", 0.0)), meta=summary.get("meta", {}),
    )
