"""Experiment wiring: config -> world -> engine -> artifacts.

A run directory contains:

* ``config.json``    canonical materialized config
* ``events.jsonl``   the processed-event log (replay ground truth)
* ``rounds.jsonl``   per-round metric records
* ``summary.csv``    one-row final metrics
* ``run_meta.json``  replay digest, final-parameter digest, backend,
                     wall-clock (informational only, never part of the digest)
* ``checkpoints/``   final global model checkpoint + MANIFEST.json

Sweeps run one cell per (value, arm, repeat) with the cell seed derived
from (base seed, arm, repeat) — deliberately not from the axis value, so
different values of the sweep axis share seeds and compare paired.
"""

from __future__ import annotations

import glob
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .backends import backend_name
from .client import ClientProfile, assign_batch_size
from .config import ExperimentConfig, SweepSpec
from .data import Dataset, load_csv, partition_dirichlet, stratified_split, synth_anomaly
from .fault import (
    CheckpointPolicy,
    WeibullModel,
    failure_offsets,
    inject_dropout,
    optimal_interval,
    write_checkpoint_file,
)
from .metrics import RoundReport, UTestResult, mann_whitney_u, write_reports
from .model import ModelSpec, ParamVector, init_params
from .rng import derive_rng, derive_seed
from .selection import SelectionPolicy
from .server import FederationEngine, World, WorldClient, finalize_client_geometry
from .simnet import DistSpec, write_event_log


@dataclass
class RunResult:
    config: ExperimentConfig
    world: World
    engine: FederationEngine
    reports: list[RoundReport]
    final_params: ParamVector
    digest: str
    summary: dict
    wall_clock_s: float

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].accuracy if self.reports else float("nan")

    @property
    def final_auc(self) -> float:
        return self.reports[-1].auc if self.reports else float("nan")


def params_digest(params: ParamVector) -> str:
    return hashlib.blake2b(params.values.tobytes(), digest_size=8).hexdigest()


def load_dataset(config: ExperimentConfig) -> Dataset:
    ds_cfg = config["dataset"]
    if ds_cfg["kind"] == "csv":
        return load_csv(
            ds_cfg["path"],
            ds_cfg["label_column"],
            categorical_columns=ds_cfg["categorical_columns"],
            label_mapping=ds_cfg["label_mapping"],
        )
    n = ds_cfg["n"]
    if ds_cfg["samples_per_client"] is not None:
        # keep per-client shard size constant when sweeping client counts
        train_rows = ds_cfg["samples_per_client"] * config.num_clients
        n = int(round(train_rows / (1.0 - ds_cfg["test_frac"])))
    return synth_anomaly(
        n=n,
        d=ds_cfg["d"],
        anomaly_frac=ds_cfg["anomaly_frac"],
        separation=ds_cfg["separation"],
        seed=derive_seed(config.seed, "data"),
    )


def build_world(config: ExperimentConfig, workers: int = 1) -> tuple[World, ParamVector]:
    cfg = config.raw
    seed = config.seed

    ds = load_dataset(config)
    train_idx, test_idx = stratified_split(ds, cfg["dataset"]["test_frac"], seed)
    partition = partition_dirichlet(
        ds,
        config.num_clients,
        cfg["partition"]["alpha"],
        seed,
        indices=train_idx,
        fraction=cfg["partition"]["fraction"],
    )

    dists = {
        name: DistSpec.from_config(cfg["profiles"][name])
        for name in ("speed", "capacity", "up_latency", "down_latency")
    }
    weibull = WeibullModel(cfg["weibull"]["lambda_s"], cfg["weibull"]["k"])

    profiles = []
    for i in range(config.num_clients):
        rng = derive_rng(seed, "profile", i)
        profiles.append(
            ClientProfile(
                id=i,
                speed=dists["speed"].sample(rng),
                capacity=dists["capacity"].sample(rng),
                up_latency_s=dists["up_latency"].sample(rng),
                down_latency_s=dists["down_latency"].sample(rng),
                dropout_rate=cfg["dropout_rate"],
                weibull=weibull,
            )
        )

    batch_cfg = cfg["batch"]
    if batch_cfg["policy"] == "dynamic":
        cap_ref = float(np.mean([p.capacity for p in profiles]))
        batch_sizes = [
            assign_batch_size(p, batch_cfg["b_ref"], cap_ref, batch_cfg["b_min"], batch_cfg["b_max"])
            for p in profiles
        ]
    else:
        batch_sizes = [batch_cfg["size"]] * config.num_clients

    ck = cfg["checkpoint"]
    ckpt_interval = None
    if ck["enabled"]:
        grid = ck["grid_s"] if ck["grid_s"] is not None else ck["total_time_s"] / 1000.0
        policy = CheckpointPolicy(
            t_c_s=grid, total_time_s=ck["total_time_s"], recovery_s=ck["recovery_s"]
        )
        ckpt_interval = optimal_interval(policy, weibull, grid)

    clients = []
    for profile, b in zip(profiles, batch_sizes):
        idx = partition.assignments[profile.id]
        wc = WorldClient(
            profile=profile,
            features=ds.features[idx],
            labels=ds.labels[idx],
            batch_size=b,
        )
        finalize_client_geometry(wc, cfg["epochs"], cfg["step_overhead_s"], ckpt_interval)
        clients.append(wc)

    mode = config.mode
    theta = 0.0 if mode == "sync_baseline" else cfg["theta"]
    policy = SelectionPolicy(theta=theta, mode=cfg["selection_mode"])

    max_cycles = cfg["rounds"] * cfg["async_run"]["cycle_cap"]
    fail_matrix = inject_dropout(config.num_clients, max_cycles, cfg["dropout_rate"], seed)
    fail_offs = failure_offsets(config.num_clients, max_cycles, seed)

    world = World(
        spec=ModelSpec(
            input_dim=ds.dim,
            hidden_dims=tuple(cfg["model"]["hidden_dims"]),
            dropout_rate=cfg["model"]["dropout_rate"],
        ),
        clients=clients,
        test_features=ds.features[test_idx],
        test_labels=ds.labels[test_idx],
        policy=policy,
        mode=mode,
        epochs=cfg["epochs"],
        rounds=cfg["rounds"],
        base_lr=cfg["lr"],
        lr_decay=cfg["lr_decay"],
        agg_cost_per_update_s=cfg["aggregation"]["cost_per_update_s"],
        k_min=cfg["aggregation"]["k_min"],
        buffer_timeout_s=cfg["aggregation"]["timeout_s"],
        master_seed=seed,
        dropout_rate=cfg["dropout_rate"],
        fail_matrix=fail_matrix,
        fail_offsets=fail_offs,
        checkpointing=ck["enabled"],
        recovery_s=ck["recovery_s"],
        step_overhead_s=cfg["step_overhead_s"],
        workers=workers,
        horizon_s=cfg["async_run"]["horizon_s"],
        cycle_cap=cfg["async_run"]["cycle_cap"],
    )
    initial = init_params(world.spec, derive_seed(seed, "model-init"))
    return world, initial


def run_experiment(
    config: ExperimentConfig, out_dir: str | None = None, workers: int = 1
) -> RunResult:
    t0 = time.perf_counter()
    world, initial = build_world(config, workers=workers)
    engine = FederationEngine(world)
    state = engine.run(initial)
    wall = time.perf_counter() - t0

    digest = engine.timeline.digest()
    summary_extra = {
        "seed": config.seed,
        "mode": config.mode,
        "theta": world.policy.theta,
    }
    result = RunResult(
        config=config,
        world=world,
        engine=engine,
        reports=engine.reports,
        final_params=state.w_g,
        digest=digest,
        summary={},
        wall_clock_s=wall,
    )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
            f.write(config.canonical_json())
        write_event_log(engine.timeline.log, os.path.join(out_dir, "events.jsonl"))
        result.summary = write_reports(engine.reports, out_dir, summary_extra)
        meta = {
            "digest": digest,
            "params_digest": params_digest(state.w_g),
            "backend": backend_name(),
            "version": __version__,
            "events": len(engine.timeline.log),
            "wall_clock_s": wall,
            "workers": workers,
        }
        with open(os.path.join(out_dir, "run_meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        if engine.global_checkpoints:
            write_checkpoint_file(
                engine.global_checkpoints[-1], os.path.join(out_dir, "checkpoints")
            )
    else:
        # still assemble the summary row for programmatic callers
        from .metrics import REPORT_SCHEMA_VERSION

        if engine.reports:
            last = engine.reports[-1]
            result.summary = {
                "schema": REPORT_SCHEMA_VERSION,
                "rounds": len(engine.reports),
                "accuracy": last.accuracy,
                "auc": last.auc,
                "comm_time_s": last.comm_time_s,
                "transfer_s": last.transfer_s,
                "updates": sum(r.updates for r in engine.reports),
                "aggregations": sum(r.aggregations for r in engine.reports),
                "accepted_frac": (
                    sum(r.accepted for r in engine.reports)
                    / max(1, sum(r.accepted + r.rejected for r in engine.reports))
                ),
                "sgd_steps": sum(r.sgd_steps for r in engine.reports),
                **summary_extra,
            }
    return result


def replay_run(run_dir: str, workers: int = 1) -> tuple[bool, dict]:
    """Re-run a directory's config and compare digests."""
    config = ExperimentConfig.from_file(os.path.join(run_dir, "config.json"))
    with open(os.path.join(run_dir, "run_meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    result = run_experiment(config, out_dir=None, workers=workers)
    report = {
        "recorded_digest": meta["digest"],
        "replayed_digest": result.digest,
        "recorded_params_digest": meta.get("params_digest"),
        "replayed_params_digest": params_digest(result.final_params),
        "recorded_backend": meta.get("backend"),
        "active_backend": backend_name(),
    }
    ok = (
        report["recorded_digest"] == report["replayed_digest"]
        and report["recorded_params_digest"] == report["replayed_params_digest"]
    )
    return ok, report


SWEEP_CSV_FIELDS = [
    "axis",
    "value",
    "mode",
    "repeat",
    "seed",
    "accuracy",
    "auc",
    "comm_time_s",
    "transfer_s",
    "updates",
    "aggregations",
    "accepted_frac",
    "sgd_steps",
]


def run_sweep(
    base: ExperimentConfig,
    spec: SweepSpec,
    out_dir: str,
    arms: list[str] | None = None,
    workers: int = 1,
) -> list[dict]:
    """One run per (value, arm, repeat); cells share seeds across values."""
    import csv as _csv

    arms = arms or [base.mode]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in spec.values:
        for arm in arms:
            for repeat in range(spec.repeats):
                cell_seed = derive_seed(base.seed, "sweep", arm, repeat)
                cfg = spec.apply(base, value).with_overrides(mode=arm, seed=cell_seed)
                cell_dir = os.path.join(
                    out_dir, "cells", f"{spec.axis}-{value}", arm, f"rep{repeat}"
                )
                try:
                    result = run_experiment(cfg, out_dir=cell_dir, workers=workers)
                    row = {
                        "axis": spec.axis,
                        "value": value,
                        "mode": arm,
                        "repeat": repeat,
                        "seed": cell_seed,
                        "accuracy": result.summary.get("accuracy"),
                        "auc": result.summary.get("auc"),
                        "comm_time_s": result.summary.get("comm_time_s"),
                        "transfer_s": result.summary.get("transfer_s"),
                        "updates": result.summary.get("updates"),
                        "aggregations": result.summary.get("aggregations"),
                        "accepted_frac": result.summary.get("accepted_frac"),
                        "sgd_steps": result.summary.get("sgd_steps"),
                    }
                except Exception as exc:  # record the failure, keep sweeping
                    row = {
                        "axis": spec.axis,
                        "value": value,
                        "mode": arm,
                        "repeat": repeat,
                        "seed": cell_seed,
                        "accuracy": None,
                        "auc": None,
                        "comm_time_s": None,
                        "transfer_s": None,
                        "updates": None,
                        "aggregations": None,
                        "accepted_frac": None,
                        "sgd_steps": None,
                        "error": f"{type(exc).__name__}: {exc}",
                    }
                rows.append(row)

    with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8", newline="") as f:
        writer = _csv.DictWriter(f, fieldnames=SWEEP_CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)

    if spec.axis == "theta":
        _write_theta_summary(rows, out_dir)
    errors = [r for r in rows if r.get("error")]
    if errors:
        with open(os.path.join(out_dir, "errors.jsonl"), "w", encoding="utf-8") as f:
            for r in errors:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    return rows


def _write_theta_summary(rows: list[dict], out_dir: str) -> None:
    """Aggregated view per theta in the documented column layout."""
    from .selection import sweep_threshold

    by_theta: dict[float, list[dict]] = {}
    for r in rows:
        if r.get("error"):
            continue
        by_theta.setdefault(float(r["value"]), []).append(r)

    def run_fn(theta):
        cells = by_theta[theta]
        return {
            "accuracy": float(np.mean([c["accuracy"] for c in cells])),
            "auc": float(np.mean([c["auc"] for c in cells])),
            "comm_time_s": float(np.mean([c["comm_time_s"] for c in cells])),
            "accepted_frac": float(np.mean([c["accepted_frac"] for c in cells])),
        }

    thetas = sorted(by_theta)
    if thetas:
        sweep_threshold(run_fn, thetas, os.path.join(out_dir, "theta_sweep.csv"))


def collect_aucs(run_dir: str) -> list[float]:
    """Per-seed final AUC values from a sweep dir or a directory of runs."""
    sweep_csv = os.path.join(run_dir, "sweep.csv")
    aucs: list[float] = []
    if os.path.exists(sweep_csv):
        import csv as _csv

        with open(sweep_csv, newline="") as f:
            for row in _csv.DictReader(f):
                if row.get("auc"):
                    aucs.append(float(row["auc"]))
        return aucs
    for path in sorted(glob.glob(os.path.join(run_dir, "**", "summary.csv"), recursive=True)):
        import csv as _csv

        with open(path, newline="") as f:
            for row in _csv.DictReader(f):
                if row.get("auc"):
                    aucs.append(float(row["auc"]))
    return aucs


def compare_runs(dir_a: str, dir_b: str, alternative: str = "two_sided",
                 min_runs: int = 20) -> tuple[UTestResult, str]:
    """Mann-Whitney U over the two directories' AUC collections."""
    a = collect_aucs(dir_a)
    b = collect_aucs(dir_b)
    if len(a) < min_runs or len(b) < min_runs:
        raise ValueError(
            f"need >= {min_runs} per-seed AUC values in each directory, "
            f"got {len(a)} and {len(b)}"
        )
    res = mann_whitney_u(a, b, alternative)
    verdict = "significant" if res.p_value < 0.05 else "not significant"
    return res, verdict
