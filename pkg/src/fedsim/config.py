"""Experiment configuration: schema, validation, canonical serialization.

Configs are JSON objects deep-merged over the defaults below; unknown
keys are rejected with a field-path message. ``canonical_json`` prints a
fully materialized, key-sorted form whose parse -> print -> parse is a
fixpoint, which is what makes run artifacts self-describing and sweeps
replayable.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

DEFAULTS: dict = {
    "dataset": {
        "kind": "synthetic",  # "synthetic" | "csv"
        "n": 20000,
        "d": 20,
        "anomaly_frac": 0.3,
        "separation": 4.0,
        "samples_per_client": None,  # overrides n: train rows scale with client count
        "path": None,
        "label_column": "label",
        "categorical_columns": [],
        "label_mapping": None,
        "test_frac": 0.2,
    },
    "partition": {"alpha": 0.5, "fraction": 1.0},
    "num_clients": 10,
    "rounds": 6,
    "epochs": 5,
    "model": {"hidden_dims": [256, 128, 64], "dropout_rate": 0.3},
    "batch": {"policy": "fixed", "size": 64, "b_ref": 64, "b_min": 64, "b_max": 1024},
    "mode": "sync_filtered",  # "sync_baseline" | "sync_filtered" | "async_filtered"
    "theta": 0.65,
    "selection_mode": "weight_sign",  # "weight_sign" | "delta_sign"
    "profiles": {
        "speed": {"distribution": "constant", "value": 50.0},
        "capacity": {"distribution": "constant", "value": 1.0},
        "up_latency": {"distribution": "constant", "value": 1.0},
        "down_latency": {"distribution": "constant", "value": 1.0},
    },
    "dropout_rate": 0.0,
    "weibull": {"lambda_s": 300.0, "k": 1.5},
    "checkpoint": {
        "enabled": False,
        "total_time_s": 600.0,
        "recovery_s": 5.0,
        "grid_s": None,  # None -> total_time_s / 1000
    },
    "aggregation": {"k_min": 2, "timeout_s": 5.0, "cost_per_update_s": 0.05},
    "step_overhead_s": 0.0,
    "async_run": {"horizon_s": None, "cycle_cap": 50},
    "lr": 0.05,
    "lr_decay": 0.9,
    "seed": 1,
}

MODES = ("sync_baseline", "sync_filtered", "async_filtered")
SWEEP_AXES = ("clients", "batch", "theta", "dropout")


class ConfigError(ValueError):
    """Invalid configuration, with a field-path message."""


# nested objects replaced wholesale instead of key-merged with the default
ATOMIC_PATHS = {
    "profiles.speed",
    "profiles.capacity",
    "profiles.up_latency",
    "profiles.down_latency",
    "dataset.label_mapping",
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(override).__name__}")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{here}: unknown key")
        if isinstance(defaults[key], dict) and defaults[key] and here not in ATOMIC_PATHS:
            merged[key] = _merge(defaults[key], value, here)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _is_pow2(x) -> bool:
    return isinstance(x, int) and x >= 1 and (x & (x - 1)) == 0


def _check_dist(d: dict, path: str) -> None:
    _require(isinstance(d, dict) and "distribution" in d, path, "needs a 'distribution' key")
    kind = d["distribution"]
    if kind == "constant":
        _require("value" in d and float(d["value"]) >= 0, path, "constant needs value >= 0")
    elif kind == "lognormal":
        _require("mu" in d and "sigma" in d, path, "lognormal needs mu and sigma")
        _require(float(d["sigma"]) >= 0, path, "sigma must be >= 0")
    elif kind == "loguniform":
        _require(
            "low" in d and "high" in d and 0 < float(d["low"]) <= float(d["high"]),
            path,
            "loguniform needs 0 < low <= high",
        )
    elif kind == "empirical":
        vals = d.get("values")
        _require(
            isinstance(vals, list) and vals and all(float(v) >= 0 for v in vals),
            path,
            "empirical needs a non-empty list of non-negative values",
        )
    else:
        raise ConfigError(f"{path}.distribution: unknown kind {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # fully materialized and validated

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        cfg = _merge(DEFAULTS, d)
        validate(cfg)
        return ExperimentConfig(cfg)

    @staticmethod
    def from_file(path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    def with_overrides(self, **top_level) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in top_level.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key].update(value)
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)

    # convenience accessors used by the wiring code
    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def num_clients(self) -> int:
        return self.raw["num_clients"]


def validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    _require(ds["kind"] in ("synthetic", "csv"), "dataset.kind", "must be 'synthetic' or 'csv'")
    _require(0 < ds["test_frac"] < 1, "dataset.test_frac", "must be in (0,1)")
    if ds["kind"] == "synthetic":
        _require(int(ds["d"]) >= 1, "dataset.d", "must be >= 1")
        _require(0 < ds["anomaly_frac"] < 1, "dataset.anomaly_frac", "must be in (0,1)")
        if ds["samples_per_client"] is not None:
            _require(int(ds["samples_per_client"]) >= 2, "dataset.samples_per_client", "must be >= 2")
        else:
            _require(int(ds["n"]) >= 10, "dataset.n", "must be >= 10")
    else:
        _require(bool(ds["path"]), "dataset.path", "required for csv datasets")
        _require(bool(ds["label_column"]), "dataset.label_column", "required for csv datasets")

    _require(cfg["partition"]["alpha"] > 0, "partition.alpha", "must be > 0")
    _require(0 < cfg["partition"]["fraction"] <= 1, "partition.fraction", "must be in (0,1]")
    _require(int(cfg["num_clients"]) >= 1, "num_clients", "must be >= 1")
    _require(int(cfg["rounds"]) >= 0, "rounds", "must be >= 0")
    _require(int(cfg["epochs"]) >= 0, "epochs", "must be >= 0")

    model = cfg["model"]
    hd = model["hidden_dims"]
    _require(
        isinstance(hd, list) and hd and all(isinstance(h, int) and h >= 1 for h in hd),
        "model.hidden_dims",
        "must be a non-empty list of positive integers",
    )
    _require(0 <= model["dropout_rate"] < 1, "model.dropout_rate", "must be in [0,1)")

    batch = cfg["batch"]
    _require(batch["policy"] in ("fixed", "dynamic"), "batch.policy", "must be 'fixed' or 'dynamic'")
    for key in ("size", "b_ref", "b_min", "b_max"):
        _require(_is_pow2(batch[key]), f"batch.{key}", "must be a positive power of two")
    _require(
        batch["b_min"] <= batch["b_ref"] <= batch["b_max"],
        "batch.b_ref",
        "needs b_min <= b_ref <= b_max",
    )

    _require(cfg["mode"] in MODES, "mode", f"must be one of {MODES}")
    _require(0 <= cfg["theta"] <= 1, "theta", "must be in [0,1]")
    _require(
        cfg["selection_mode"] in ("weight_sign", "delta_sign"),
        "selection_mode",
        "must be 'weight_sign' or 'delta_sign'",
    )

    for name in ("speed", "capacity", "up_latency", "down_latency"):
        _check_dist(cfg["profiles"][name], f"profiles.{name}")

    _require(0 <= cfg["dropout_rate"] <= 1, "dropout_rate", "must be in [0,1]")
    _require(cfg["weibull"]["lambda_s"] > 0, "weibull.lambda_s", "must be > 0")
    _require(cfg["weibull"]["k"] > 0, "weibull.k", "must be > 0")

    ck = cfg["checkpoint"]
    _require(ck["total_time_s"] > 0, "checkpoint.total_time_s", "must be > 0")
    _require(ck["recovery_s"] >= 0, "checkpoint.recovery_s", "must be >= 0")
    if ck["grid_s"] is not None:
        _require(
            0 < ck["grid_s"] <= ck["total_time_s"],
            "checkpoint.grid_s",
            "must be in (0, total_time_s]",
        )

    agg = cfg["aggregation"]
    _require(int(agg["k_min"]) >= 1, "aggregation.k_min", "must be >= 1")
    _require(agg["timeout_s"] > 0, "aggregation.timeout_s", "must be > 0")
    _require(agg["cost_per_update_s"] >= 0, "aggregation.cost_per_update_s", "must be >= 0")

    _require(cfg["step_overhead_s"] >= 0, "step_overhead_s", "must be >= 0")
    arun = cfg["async_run"]
    if arun["horizon_s"] is not None:
        _require(arun["horizon_s"] > 0, "async_run.horizon_s", "must be > 0")
    _require(int(arun["cycle_cap"]) >= 1, "async_run.cycle_cap", "must be >= 1")

    _require(cfg["lr"] > 0, "lr", "must be > 0")
    _require(0 < cfg["lr_decay"] <= 1, "lr_decay", "must be in (0,1]")
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative int")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int = 1

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis: must be one of {SWEEP_AXES}, got {self.axis!r}")
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ConfigError("sweep.values: must be non-empty")
        if self.repeats < 1:
            raise ConfigError("sweep.repeats: must be >= 1")
        for v in self.values:
            if self.axis == "clients" and (int(v) < 1):
                raise ConfigError(f"sweep.values: client count {v} must be >= 1")
            if self.axis == "batch" and not _is_pow2(int(v)):
                raise ConfigError(f"sweep.values: batch size {v} must be a power of two")
            if self.axis == "theta" and not 0 <= float(v) <= 1:
                raise ConfigError(f"sweep.values: theta {v} outside [0,1]")
            if self.axis == "dropout" and not 0 <= float(v) <= 1:
                raise ConfigError(f"sweep.values: dropout {v} outside [0,1]")

    def apply(self, config: ExperimentConfig, value) -> ExperimentConfig:
        if self.axis == "clients":
            return config.with_overrides(num_clients=int(value))
        if self.axis == "batch":
            return config.with_overrides(batch={"size": int(value)})
        if self.axis == "theta":
            return config.with_overrides(theta=float(value))
        return config.with_overrides(dropout_rate=float(value))
