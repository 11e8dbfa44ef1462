"""Sign-alignment relevance scoring and threshold filtering of client updates.

The relevance of a client's parameters against the global model is the
fraction of positions whose signs match, with exact zero treated as its
own sign class (zero matches only zero — float64 training makes exact
zeros rare, so the choice is inert but keeps the count deterministic).

Two comparison modes exist because the mechanism can be read two ways:

* ``weight_sign``  compares sign(w_client) against sign(w_global);
* ``delta_sign``   compares the client's movement sign(w_client - w_global)
  against the global model's last movement sign(w_global - w_global_prev).

Filtering happens client-side before transmission: an update whose ratio
falls below theta is never uploaded, so the simulator charges no upload
time for it. The threshold boundary is inclusive (ratio == theta accepts).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .backends import get_backend
from .model import ParamVector

MODES = ("weight_sign", "delta_sign")


@dataclass(frozen=True)
class RelevanceScore:
    aligned: int
    total: int

    @property
    def ratio(self) -> float:
        return self.aligned / self.total


@dataclass(frozen=True)
class SelectionPolicy:
    theta: float = 0.65
    mode: str = "weight_sign"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0,1], got {self.theta}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def calculate_relevance(
    w_c: ParamVector,
    w_g: ParamVector,
    w_g_prev: ParamVector | None = None,
    mode: str = "weight_sign",
) -> RelevanceScore:
    """Alignment ratio between a client vector and the global model."""
    if len(w_c) != len(w_g):
        raise ValueError(f"length mismatch: {len(w_c)} vs {len(w_g)}")
    if mode == "weight_sign":
        aligned = get_backend().sign_align_count(w_c.values, w_g.values)
    elif mode == "delta_sign":
        if w_g_prev is None:
            raise ValueError("delta_sign mode requires w_g_prev")
        if len(w_g_prev) != len(w_g):
            raise ValueError("w_g_prev length mismatch")
        aligned = get_backend().sign_align_count(
            w_c.values - w_g.values, w_g.values - w_g_prev.values
        )
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return RelevanceScore(aligned=int(aligned), total=len(w_c))


def filter_update(
    update,
    w_g: ParamVector,
    w_g_prev: ParamVector | None,
    policy: SelectionPolicy,
) -> tuple[bool, RelevanceScore]:
    """Accept iff relevance ratio >= theta (boundary inclusive)."""
    score = calculate_relevance(update.params, w_g, w_g_prev, policy.mode)
    return score.ratio >= policy.theta, score


SWEEP_CSV_FIELDS = ["theta", "accuracy", "auc", "comm_time_s", "accepted_frac"]


def sweep_threshold(run_fn, thetas, csv_path: str | None = None) -> list[dict]:
    """One full experiment per theta (same seeds across thetas).

    ``run_fn(theta)`` must return a mapping with at least the keys in
    SWEEP_CSV_FIELDS (minus theta). Results are returned in theta order
    and optionally written as CSV.
    """
    rows = []
    for theta in thetas:
        if not 0.0 <= theta <= 1.0:
            raise ValueError(f"theta {theta} outside [0,1]")
        result = run_fn(theta)
        row = {"theta": theta}
        row.update({k: result[k] for k in SWEEP_CSV_FIELDS[1:]})
        rows.append(row)
    if csv_path is not None:
        os.makedirs(os.path.dirname(csv_path) or ".", exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_CSV_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
