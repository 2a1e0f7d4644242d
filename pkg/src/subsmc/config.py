"""Run configuration: YAML loading with strict validation, and named presets."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .kernels import KernelConfig
from .model import Dataset, ModelSpec, PriorSpec, Problem, SimDesign, load_dataset, simulate_dataset
from .smc import SmcConfig

TOP_KEYS = ("name", "model", "data", "smc", "kernel", "seed", "workers", "output")
MODEL_KEYS = ("family", "prior", "nu", "sigma2")
PRIOR_KEYS = ("kind", "size", "mean", "variance", "w", "var1", "var2")
DATA_KEYS = ("path", "intercept", "simulate", "seed")
SMC_KEYS = tuple(f.name for f in dataclasses.fields(SmcConfig) if f.name != "kernel")
KERNEL_KEYS = tuple(f.name for f in dataclasses.fields(KernelConfig))
DESIGN_KEYS = tuple(f.name for f in dataclasses.fields(SimDesign))


@dataclass
class DataSource:
    """Either a CSV path or a simulation design with its seed."""

    path: str | None = None
    intercept: bool = False
    simulate: SimDesign | None = None
    seed: int = 0

    def load(self, base: Path | None = None) -> Dataset:
        if self.simulate is not None:
            return simulate_dataset(self.simulate, self.seed)
        if self.path is None:
            raise ConfigError("data: give either 'path' or 'simulate'")
        p = Path(self.path)
        if base is not None and not p.is_absolute():
            p = base / p
        return load_dataset(p, intercept=self.intercept)

    def to_dict(self):
        if self.simulate is not None:
            return {"simulate": self.simulate.to_dict(), "seed": self.seed}
        return {"path": self.path, "intercept": self.intercept}


@dataclass
class RunConfig:
    model: ModelSpec
    data: DataSource
    smc: SmcConfig = field(default_factory=SmcConfig)
    seed: int = 0
    workers: int = 1
    output: str = "results"
    name: str = ""

    def problem(self, data: Dataset | None = None, base: Path | None = None) -> Problem:
        data = self.data.load(base) if data is None else data
        problems = self.smc.validate(data.n)
        if problems:
            raise ConfigError(problems)
        return Problem(self.model, data)

    def to_dict(self):
        out = {
            "name": self.name,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "smc": {k: v for k, v in self.smc.to_dict().items() if k != "kernel"},
            "kernel": self.smc.kernel.to_dict(),
            "seed": self.seed,
            "workers": self.workers,
            "output": self.output,
        }
        return copy.deepcopy(out)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_mode(self, mode):
        return self.replace(smc=dataclasses.replace(self.smc, mode=mode))


# --------------------------------------------------------------------------
# parsing


def _check_keys(section, allowed, where, problems):
    if not isinstance(section, dict):
        problems.append(f"{where}: expected a mapping")
        return False
    unknown = [k for k in section if k not in allowed]
    for key in unknown:
        problems.append(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")
    return not unknown


def _listify(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def _static_smc_checks(smc: SmcConfig, problems):
    if smc.mode == "subsample" and smc.stratify == "group":
        m, g = smc.m, smc.blocks
        if isinstance(m, list) and isinstance(g, list):
            if len(m) != len(g):
                problems.append("smc.m and smc.blocks need the same number of groups")
            for i, (mi, gi) in enumerate(zip(m, g)):
                if gi < 1 or mi % gi:
                    problems.append(f"smc.blocks[{i}]: G must divide m (m={mi}, G={gi})")
    else:
        problems.extend(smc.validate())


def config_from_dict(d: dict) -> RunConfig:
    """Validate a parsed mapping; every problem is reported at once."""
    problems = []
    if not _check_keys(d, TOP_KEYS, "", problems):
        raise ConfigError(problems)

    model_d = d.get("model")
    model = None
    if model_d is None:
        problems.append("model: required")
    elif _check_keys(model_d, MODEL_KEYS, "model", problems):
        prior_items = model_d.get("prior")
        if not prior_items:
            problems.append("model.prior: required (list of blocks)")
        else:
            for i, item in enumerate(prior_items):
                _check_keys(item, PRIOR_KEYS, f"model.prior[{i}]", problems)
        if not problems:
            try:
                prior = PriorSpec.from_dict(prior_items)
                kwargs = {k: float(model_d[k]) for k in ("nu", "sigma2") if k in model_d}
                model = ModelSpec(model_d.get("family"), prior, **kwargs)
            except ConfigError as exc:
                problems.extend(f"model: {p}" for p in exc.problems)
            except TypeError as exc:
                problems.append(f"model: {exc}")

    data_d = d.get("data", {})
    data = None
    if _check_keys(data_d, DATA_KEYS, "data", problems):
        sim = data_d.get("simulate")
        if sim is not None and data_d.get("path") is not None:
            problems.append("data: 'path' and 'simulate' are mutually exclusive")
        elif sim is None and data_d.get("path") is None:
            problems.append("data: give either 'path' or 'simulate'")
        design = None
        if sim is not None and _check_keys(sim, DESIGN_KEYS, "data.simulate", problems):
            try:
                design = SimDesign.from_dict(sim)
                design.validate()
            except ConfigError as exc:
                problems.extend(f"data.simulate: {p}" for p in exc.problems)
            except TypeError as exc:
                problems.append(f"data.simulate: {exc}")
        data = DataSource(
            path=data_d.get("path"), intercept=bool(data_d.get("intercept", False)),
            simulate=design, seed=int(data_d.get("seed", 0)),
        )

    smc_d = d.get("smc", {}) or {}
    kernel_d = d.get("kernel", {}) or {}
    smc = None
    ok = _check_keys(smc_d, SMC_KEYS, "smc", problems)
    ok = _check_keys(kernel_d, KERNEL_KEYS, "kernel", problems) and ok
    if ok:
        try:
            kernel = KernelConfig(**kernel_d)
            smc = SmcConfig(**{k: _listify(v) for k, v in smc_d.items()}, kernel=kernel)
            _static_smc_checks(smc, problems)
        except TypeError as exc:
            problems.append(f"smc: {exc}")

    workers = d.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        problems.append("workers: must be an integer >= 1")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append("seed: must be a non-negative integer")
    if problems:
        raise ConfigError(problems)
    return RunConfig(
        model=model, data=data, smc=smc, seed=seed, workers=workers,
        output=str(d.get("output", "results")), name=str(d.get("name", "")),
    )


def load_config(path) -> RunConfig:
    """Read a YAML run configuration, filling defaults and rejecting bad fields."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        parsed = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_dict(parsed)


def dump_config(config: RunConfig, path=None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# presets


def _normal(size, variance, mean=0.0):
    return {"kind": "normal", "size": size, "mean": mean, "variance": variance}


def _preset_dicts():
    fe_groups = [20] * 5 + [2000] * 5
    return {
        "student-t-desk": {
            "model": {"family": "student_t", "nu": 5.0, "prior": [_normal(10, 10.0)]},
            "data": {"simulate": {"family": "student_t", "n": 20000, "d": 10, "rho": 0.9,
                                  "theta_law": ["uniform", -5.0, 5.0], "nu": 5.0}, "seed": 11},
            "smc": {"m": 200, "blocks": 50},
        },
        "poisson-desk": {
            "model": {"family": "poisson", "prior": [_normal(8, 0.1)]},
            "data": {"simulate": {"family": "poisson", "n": 10000, "d": 8, "intercept": True,
                                  "theta_law": ["uniform", -0.2, 0.2]}, "seed": 12},
            "smc": {"m": 100, "blocks": 50},
        },
        "logistic-desk": {
            "model": {"family": "logistic", "prior": [_normal(10, 1.0)]},
            "data": {"simulate": {"family": "logistic", "n": 20000, "d": 10, "intercept": True,
                                  "theta_law": ["normal", 0.0, 0.5]}, "seed": 13},
            "smc": {"m": 200, "blocks": 50},
        },
        "fixed-effects-mixture": {
            "model": {"family": "fixed_effects", "sigma2": 1.0, "prior": [
                {"kind": "normal_mixture", "size": 10, "w": 0.8, "var1": 0.01, "var2": 12.25},
                _normal(10, 9.0),
            ]},
            "data": {"simulate": {
                "family": "fixed_effects", "n": sum(fe_groups), "d": 10,
                "theta_law": ["normal", 0.0, 2.0], "group_sizes": fe_groups,
                "alpha_laws": [["normal", 0.5, 0.05]] * 5 + [["normal", 0.5, 0.2]] * 5,
            }, "seed": 1},
            "smc": {"particles": 420, "stratify": "group", "m": [5] * 5 + [100] * 5,
                    "blocks": [1] * 5 + [100] * 5},
        },
        "fixed-effects-truncated": {
            "model": {"family": "fixed_effects", "sigma2": 1.0, "prior": [
                {"kind": "truncated_normal", "size": 10, "mean": 0.0, "variance": 9.0},
                _normal(10, 9.0),
            ]},
            "data": {"simulate": {
                "family": "fixed_effects", "n": sum(fe_groups), "d": 10,
                "theta_law": ["normal", 0.0, 2.0], "group_sizes": fe_groups,
                "alpha_laws": [["truncated_normal", 0.1, 0.1]] * 10,
            }, "seed": 15},
            "smc": {"stratify": "group", "m": [20] * 5 + [200] + [100] * 4,
                    "blocks": [1] * 5 + [100] * 5},
        },
        "gaussian-conjugate": {
            "model": {"family": "gaussian_linear", "sigma2": 1.0, "prior": [_normal(4, 1.0)]},
            "data": {"simulate": {"family": "gaussian_linear", "n": 2000, "d": 4,
                                  "theta_law": ["normal", 0.0, 1.0]}, "seed": 16},
            "smc": {"mode": "full_data", "m": 100, "blocks": 10},
        },
    }


PRESETS = tuple(_preset_dicts())


def preset(name: str, **overrides) -> RunConfig:
    """A named desk-scale experiment; ``overrides`` update the ``smc`` section."""
    presets = _preset_dicts()
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(presets)}")
    d = copy.deepcopy(presets[name])
    d["name"] = name
    kernel = overrides.pop("kernel", None)
    d["smc"].update(overrides)
    if kernel:
        d["kernel"] = dict(kernel)
    return config_from_dict(d)
