"""Experiment configuration: JSON documents with a schema version, checked
against fixed key sets so that typos fail loudly instead of being ignored."""

import copy
import json
import math

from lppvid.errors import ConfigError

SCHEMA_VERSION = 1

# Leaf values are defaults; ``REQUIRED`` marks keys without one. Dict values
# are nested sections. Sections listed in ``_NAMED`` map user-chosen names to
# entries of the given schema.
REQUIRED = object()

_IDENT = {
    "dataset": REQUIRED,
    "multivariate": False,
    "budget": 150,
    "n_starts": 8,
    "seed": 0,
    "init_length_scale": 1.0,
    "init_length_scale_p": None,
    "init_lambda": 1e-3,
    "hyper_max_samples": None,
}

_VDP_DATASET = {
    "x_perp0": REQUIRED,
    "n_trajectories": 1,
    "tau0_spread": True,
    "duration_periods": 3.0,
    "samples_per_period": 200,
    "forcing_amplitude": 1.0,
    "forcing_frequency_factor": 10.0,
    "snr_db": 40.0,
    "seed": REQUIRED,
}

_KITE_DATASET = {
    "vr": REQUIRED,
    "n_trajectories": 8,
    "x_perp_norm": 0.02,
    "duration_periods": 1.0,
    "samples_per_period": 100,
    "snr_db": 60.0,
    "steering_input": False,
    "seed": REQUIRED,
}

_BLACKBOX = {
    "dataset": REQUIRED,
    "budget": 150,
    "n_starts": 4,
    "seed": 0,
    "max_samples": 600,
}

SCHEMAS = {
    "vanderpol": {
        "schema_version": REQUIRED,
        "system": REQUIRED,
        "params": {"mu": 1.0},
        "cycle": {"x0_guess": [2.0, 0.0], "grid_size": 512, "tol": 1e-8, "settle_periods": 10},
        "surface": {"kind": "center", "center_point": [0.0, 0.0]},
        "analytic": {"grid_size": 128},
        "datasets": _VDP_DATASET,
        "models": _IDENT,
        "test": {
            "x_perp0": [-0.5],
            "tau0": 1.5,
            "forcing_amplitude": 0.5,
            "forcing_frequency_factor": 20.0,
            "duration_periods": 1.0,
            "samples_per_period": 400,
            "models": ["analytic"],
        },
        "compare": {"models": [], "grid_size": 200},
    },
    "kite": {
        "schema_version": REQUIRED,
        "system": REQUIRED,
        "params": {
            "omega_star": 0.8,
            "theta0": math.pi / 4,
            "phi0": math.pi / 4,
            "a_init": 2.4,
            "b_init": 0.0,
            "vr_train": [0.3, 0.2154, 0.1625, 0.1263, 0.1],
            "Q": [[1.0, 0.0], [0.0, 1.0]],
            "R": 1.0,
            "lqr_grid_size": 128,
        },
        "cycle": {"grid_size": 256},
        "surface": {"kind": "center", "center_point": None},
        "analytic": {"grid_size": 128},
        "datasets": _KITE_DATASET,
        "models": _IDENT,
        "blackbox": _BLACKBOX,
        "test": {
            "vr": 0.27,
            "x_perp_norm": 0.1,
            "seed": REQUIRED,
            "duration_periods": 1.0,
            "samples_per_period": 200,
            "models": [],
        },
        "compare": {"models": [], "vr": [0.11, 0.27], "grid_size": 200},
    },
}

_NAMED = {"datasets", "models", "blackbox"}


def _merge(schema, given, where):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    out = {}
    for key, default in schema.items():
        path = f"{where}.{key}" if where else key
        if isinstance(default, dict) and where == "" and key in _NAMED:
            entries = given.get(key, {})
            if not isinstance(entries, dict):
                raise ConfigError(f"{path} must map names to entries")
            out[key] = {name: _merge(default, e, f"{path}.{name}")
                        for name, e in sorted(entries.items())}
        elif isinstance(default, dict):
            out[key] = _merge(default, given.get(key, {}), path)
        elif key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {path}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def validate(raw):
    """Fill defaults and check keys, cross references and seeds."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got "
                          f"{raw.get('schema_version')!r}")
    system = raw.get("system")
    if system not in SCHEMAS:
        raise ConfigError(f"system must be one of {sorted(SCHEMAS)}, got {system!r}")
    cfg = _merge(SCHEMAS[system], raw, "")
    if cfg["surface"]["kind"] not in ("center", "orthogonal"):
        raise ConfigError("surface.kind must be 'center' or 'orthogonal'")
    for name, m in cfg["models"].items():
        if m["dataset"] not in cfg["datasets"]:
            raise ConfigError(f"models.{name} refers to unknown dataset {m['dataset']!r}")
    for name, b in cfg.get("blackbox", {}).items():
        if b["dataset"] not in cfg["datasets"]:
            raise ConfigError(f"blackbox.{name} refers to unknown dataset {b['dataset']!r}")
    names = list(cfg["models"]) + list(cfg.get("blackbox", {}))
    if len(set(names)) != len(names) or "analytic" in names:
        raise ConfigError("model and blackbox names must be unique and not 'analytic'")
    for name in cfg["test"]["models"]:
        if name not in set(names) | {"analytic"}:
            raise ConfigError(f"test.models refers to unknown model {name!r}")
    for name in cfg["compare"]["models"]:
        if name not in cfg["models"]:
            raise ConfigError(f"compare.models refers to unknown LPPV model {name!r}")
    for name, d in cfg["datasets"].items():
        if not isinstance(d["seed"], int):
            raise ConfigError(f"datasets.{name}.seed must be an integer")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate(raw)
