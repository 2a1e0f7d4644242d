"""Command line: ``subsmc {simulate,run,compare,diagnose}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(overflow or a degenerate particle cloud), 4 a comparison beyond threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PRESETS, RunConfig, load_config, preset
from .errors import ComparisonError, ConfigError, DegenerateCloudError, NumericOverflowError, ParticleMapError
from .model import load_dataset, save_dataset, simulate_dataset
from .reference import reference_mcmc
from .runtime import resolve_seed
from .smc import run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_COMPARE = 0, 2, 3, 4

log = logging.getLogger("subsmc")


def _load_run_config(args) -> tuple[RunConfig, Path | None]:
    if bool(args.config) == bool(getattr(args, "preset", None)):
        raise ConfigError("give exactly one of --config or --preset")
    if args.config:
        path = Path(args.config)
        return load_config(path), path.parent
    return preset(args.preset), None


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "mode", None):
        cfg = cfg.with_mode("full_data" if args.mode == "full" else "subsample")
    if getattr(args, "workers", None) is not None:
        cfg = cfg.replace(workers=args.workers)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "out", None):
        cfg = cfg.replace(output=args.out)
    return cfg.replace(seed=resolve_seed(cfg.seed))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg, _ = _load_run_config(args)
    design = cfg.data.simulate
    if design is None:
        raise ConfigError("simulate needs a config whose data section has 'simulate'")
    seed = resolve_seed(args.seed if args.seed is not None else cfg.data.seed)
    data = simulate_dataset(design, seed)
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out = out / "data.csv"
    save_dataset(data, out)
    info = {
        "path": str(out), "family": design.family, "n": data.n, "columns": list(data.columns),
        "rho": design.rho, "theta_law": list(design.theta_law), "seed": seed,
        "true_theta": data.meta["true_theta"], "groups": data.n_groups,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def _single_run(cfg, problem, seed, out_dir, sampler, timing, iterations):
    if sampler == "reference":
        result = reference_mcmc(problem, cfg.smc, seed, iterations=iterations)
    else:
        result = run(problem, cfg.smc, seed, workers=cfg.workers)
    echo = dict(cfg.to_dict(), seed=seed)
    io.save_result(result, out_dir, echo, timing=timing)
    return result, io.summary_dict(result, echo, timing)


def cmd_run(args) -> int:
    cfg, base = _load_run_config(args)
    cfg = _apply_overrides(cfg, args)
    problem = cfg.problem(base=base) if not args.data else cfg.problem(_load_data(args, cfg))
    out = Path(cfg.output)
    timing = not args.reproducible
    if args.repeat <= 1:
        result, summary = _single_run(cfg, problem, cfg.seed, out, args.sampler, timing, args.iterations)
    else:
        summaries = []
        for r in range(args.repeat):
            seed = cfg.seed + r
            _, s = _single_run(cfg, problem, seed, out / f"run_{r:03d}", args.sampler, timing, args.iterations)
            summaries.append(s)
            log.info("repeat %d/%d: log_Z=%s P=%s", r + 1, args.repeat, s["log_Z"], s["P"])
        summary = io.aggregate_summary(summaries, cfg.to_dict())
        io.write_summary(summary, out)
    brief = {k: summary[k] for k in ("log_Z", "P", "M", "dim", "posterior_mean", "seconds")}
    brief["se_log_Z"] = summary["se"]["log_Z"]
    brief["out"] = str(out)
    print(json.dumps(brief, indent=2))
    return EXIT_OK


def _load_data(args, cfg):
    return load_dataset(args.data, intercept=cfg.data.intercept)


def _z(delta, se_a, se_b):
    delta = np.asarray(delta, dtype=float)
    se = np.sqrt(np.nan_to_num(np.asarray(se_a, dtype=float) ** 2) + np.nan_to_num(np.asarray(se_b, dtype=float) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, delta / np.where(se > 0, se, 1.0), np.where(delta == 0, 0.0, np.sign(delta) * np.inf))
    return z


def _se(summary, key, dim):
    se = (summary.get("se") or {}).get(key)
    if se is None:
        return np.full(dim, np.nan) if dim else math.nan
    return np.array([math.nan if v is None else v for v in se], dtype=float) if dim else float(se)


def compare_summaries(a: dict, b: dict, threshold: float = 3.0) -> dict:
    """Deltas ``a - b`` in combined standard-error units; antisymmetric in ``(a, b)``."""
    if a["dim"] != b["dim"]:
        raise ComparisonError(f"dimension mismatch: {a['dim']} vs {b['dim']}")
    d = a["dim"]
    mean_delta = np.subtract(a["posterior_mean"], b["posterior_mean"])
    var_delta = np.subtract(a["posterior_var"], b["posterior_var"])
    z_mean = _z(mean_delta, _se(a, "posterior_mean", d), _se(b, "posterior_mean", d))
    z_var = _z(var_delta, _se(a, "posterior_var", d), _se(b, "posterior_var", d))
    la, lb = a.get("log_Z"), b.get("log_Z")
    log_z_delta = None if la is None or lb is None else la - lb
    sa, sb = _se(a, "log_Z", 0), _se(b, "log_Z", 0)
    z_log_z = None
    if log_z_delta is not None and not (math.isnan(sa) and math.isnan(sb)):
        z_log_z = float(_z(log_z_delta, sa, sb))
    breach = bool(np.any(np.abs(z_mean) > threshold) or np.any(np.abs(z_var) > threshold))
    pa, pb = a.get("P"), b.get("P")
    return io._jsonable({
        "threshold": threshold,
        "posterior_mean_delta": mean_delta,
        "posterior_mean_z": z_mean,
        "posterior_var_delta": var_delta,
        "posterior_var_z": z_var,
        "log_Z_delta": log_z_delta,
        "log_Z_z": z_log_z,
        "P": [pa, pb],
        "P_relative_diff": None if not pa or not pb else (pa - pb) / max(pa, pb),
        "breach": breach,
    })


def cmd_compare(args) -> int:
    report = compare_summaries(io.load_summary(args.a), io.load_summary(args.b), args.threshold)
    print(json.dumps(report, indent=2))
    return EXIT_COMPARE if report["breach"] else EXIT_OK


def diagnose_trace(trace) -> dict:
    if not trace:
        return {"stages": 0, "warnings": ["empty trace"]}
    warnings = []
    acc = np.array([t.get("acc_theta", np.nan) for t in trace], dtype=float)
    r = np.array([t.get("r_moves", 0) for t in trace])
    div = int(sum(t.get("divergences", 0) for t in trace))
    clamped = int(max(t.get("clamped", 0) for t in trace))
    if clamped:
        warnings.append(f"poisson linear predictor clamped for up to {clamped} observations")
    if np.any(acc < 0.1):
        warnings.append("theta acceptance below 0.1 at some stage")
    if div:
        warnings.append(f"{div} divergent trajectories")
    if any(t.get("mass_fallback") for t in trace):
        warnings.append("mass matrix fell back to its diagonal at some stage")
    r_max = int(r.max())
    return {
        "stages": len(trace),
        "final_a": trace[-1].get("a_p"),
        "ess": {"min": min(t["ess"] for t in trace), "max": max(t["ess"] for t in trace)},
        "acc_theta": {"min": float(np.nanmin(acc)), "mean": float(np.nanmean(acc))},
        "acc_u_mean": float(np.mean([t.get("acc_u", np.nan) for t in trace])),
        "r_moves": {"mean": float(r.mean()), "max": r_max},
        "divergences": div,
        "mean_var_hat_max": float(max(t.get("mean_var_hat", 0.0) for t in trace)),
        "seconds": float(sum(t.get("seconds", 0.0) or 0.0 for t in trace)),
        "warnings": warnings,
    }


def cmd_diagnose(args) -> int:
    out = Path(args.result)
    trace_path = out / io.TRACE if out.is_dir() else out
    try:
        trace = io.read_trace(trace_path)
    except OSError as exc:
        raise ConfigError(f"{trace_path}: {exc.strerror}") from None
    report = diagnose_trace(trace)
    print(json.dumps(report, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subsmc", description="Subsampling SMC for Bayesian regression.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", choices=PRESETS, help="named desk-scale experiment")

    sp = sub.add_parser("simulate", help="write a simulated dataset CSV")
    source(sp)
    sp.add_argument("--seed", type=int, help="data seed (default: the config's)")
    sp.add_argument("--out", required=True, help="CSV path or directory")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run the sampler and write particles, trace and summary")
    source(sp)
    sp.add_argument("--data", help="dataset CSV overriding the config's data section")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--mode", choices=("subsample", "full"))
    sp.add_argument("--repeat", type=int, default=1, help="independent runs with seeds seed..seed+K-1")
    sp.add_argument("--sampler", choices=("smc", "reference"), default="smc")
    sp.add_argument("--iterations", type=int, default=10000, help="reference sampler draws")
    sp.add_argument("--reproducible", action="store_true",
                    help="zero wall-clock fields so outputs are byte-identical across invocations")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="compare two result directories")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--threshold", type=float, default=3.0)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("diagnose", help="summarise a run's stage trace")
    sp.add_argument("result", help="result directory or trace.jsonl")
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ComparisonError as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericOverflowError, DegenerateCloudError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParticleMapError as exc:
        print(f"particle task failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
