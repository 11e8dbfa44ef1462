"""Evaluation metrics and run reporting.

AUC is computed rank-based — (concordant pairs + half the ties) over all
positive/negative pairs — which equals the trapezoidal area under the
empirical ROC curve and ties directly into the Mann-Whitney statistic:
auc == U_pos / (n_pos * n_neg).

The Mann-Whitney U test uses midrank tie handling. P-values come from
exact enumeration of the null distribution when n1*n2 <= 400 and the
samples are tie-free, otherwise from the normal approximation with
tie-corrected variance and a continuity correction.

Report files written per run:

* ``rounds.jsonl``  one JSON record per round (schema below)
* ``summary.csv``   a single row of final metrics

Both are byte-stable across reruns of the same config. Field names are
versioned via REPORT_SCHEMA_VERSION; downstream sweep tooling parses them
by name.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

REPORT_SCHEMA_VERSION = 1

# rounds.jsonl / summary.csv field order (stable; sweep tooling keys on these)
ROUND_FIELDS = [
    "schema",
    "round",
    "t_s",
    "accuracy",
    "auc",
    "updates",
    "aggregations",
    "accepted",
    "rejected",
    "failures",
    "accepted_frac",
    "staleness_mean",
    "staleness_max",
    "comm_time_s",
    "transfer_s",
    "sgd_steps",
]

SUMMARY_FIELDS = [
    "schema",
    "rounds",
    "accuracy",
    "auc",
    "comm_time_s",
    "transfer_s",
    "updates",
    "aggregations",
    "accepted_frac",
    "staleness_mean",
    "staleness_max",
    "sgd_steps",
    "seed",
    "mode",
    "theta",
]


@dataclass
class EvalResult:
    accuracy: float
    auc: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5


@dataclass
class UTestResult:
    u_statistic: float  # U for the first sample
    p_value: float
    n1: int
    n2: int
    method: str  # "exact" | "normal_approx"


@dataclass
class RoundReport:
    """Per-round record emitted by the engines."""

    round: int
    t_s: float
    accuracy: float
    auc: float
    updates: int
    aggregations: int
    accepted: int
    rejected: int
    failures: int
    accepted_frac: float
    staleness_mean: float
    staleness_max: int
    comm_time_s: float
    transfer_s: float
    sgd_steps: int

    def to_record(self) -> dict:
        rec = {"schema": REPORT_SCHEMA_VERSION}
        rec.update(asdict(self))
        return {k: rec[k] for k in ROUND_FIELDS}


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of rows where (score >= threshold) matches the label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be equal-length and non-empty")
    pred = scores >= threshold
    return float(np.mean(pred == (labels == 1)))


def _midranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks (1-based); tied values share the mean of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels) -> float:
    """Rank-based AUC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one example of each class")
    ranks = _midranks(scores)
    u_pos = float(np.sum(ranks[pos])) - n_pos * (n_pos + 1) / 2.0
    return u_pos / (n_pos * n_neg)


def evaluate(scores, labels, threshold: float = 0.5) -> EvalResult:
    labels = np.asarray(labels)
    return EvalResult(
        accuracy=accuracy(scores, labels, threshold),
        auc=auc_roc(scores, labels),
        n_pos=int(np.count_nonzero(labels == 1)),
        n_neg=int(np.count_nonzero(labels != 1)),
        threshold=threshold,
    )


def _exact_u_counts(n1: int, n2: int) -> np.ndarray:
    """counts[u] = number of rank arrangements with U statistic u (tie-free null).

    Recurrence N(i, j, u) = N(i-1, j, u-j) + N(i, j-1, u): the largest value
    belongs either to sample one (beating all j sample-two values) or to
    sample two.
    """
    max_u = n1 * n2
    prev = np.zeros((n2 + 1, max_u + 1), dtype=np.float64)
    prev[:, 0] = 1.0  # zero items from sample one: U is 0
    for _ in range(1, n1 + 1):
        cur = np.zeros_like(prev)
        cur[0, 0] = 1.0
        for j in range(1, n2 + 1):
            shifted = np.zeros(max_u + 1)
            shifted[j:] = prev[j, : max_u + 1 - j]
            cur[j] = shifted + cur[j - 1]
        prev = cur
    return prev[n2]


def mann_whitney_u(sample_a, sample_b, alternative: str = "two_sided") -> UTestResult:
    """Mann-Whitney U with midrank ties.

    ``alternative='greater'`` tests whether sample_a tends to exceed sample_b.
    """
    if alternative not in ("two_sided", "greater"):
        raise ValueError(f"alternative must be 'two_sided' or 'greater', got {alternative!r}")
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples must be non-empty")

    combined = np.concatenate([a, b])
    ranks = _midranks(combined)
    u_a = float(np.sum(ranks[:n1])) - n1 * (n1 + 1) / 2.0

    _, tie_counts = np.unique(combined, return_counts=True)
    has_ties = bool(np.any(tie_counts > 1))

    if np.all(combined == combined[0]):
        # fully degenerate: no information either way
        return UTestResult(u_a, 1.0, n1, n2, "normal_approx")

    if n1 * n2 <= 400 and not has_ties:
        counts = _exact_u_counts(n1, n2)
        total = counts.sum()
        k = int(round(u_a))
        cdf = counts[: k + 1].sum() / total
        sf = counts[k:].sum() / total
        if alternative == "greater":
            p = sf
        else:
            p = min(1.0, 2.0 * min(cdf, sf))
        return UTestResult(u_a, float(p), n1, n2, "exact")

    n = n1 + n2
    mean_u = n1 * n2 / 2.0
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1)) if n > 1 else 0.0
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return UTestResult(u_a, 1.0, n1, n2, "normal_approx")
    sd = math.sqrt(var_u)
    if alternative == "greater":
        z = (u_a - mean_u - 0.5) / sd
        p = _norm_sf(z)
    else:
        z = (abs(u_a - mean_u) - 0.5) / sd
        z = max(z, 0.0)
        p = min(1.0, 2.0 * _norm_sf(z))
    return UTestResult(u_a, float(p), n1, n2, "normal_approx")


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def write_reports(reports: list[RoundReport], out_dir: str, summary_extra: dict | None = None) -> dict:
    """Write rounds.jsonl and summary.csv; returns the summary row."""
    os.makedirs(out_dir, exist_ok=True)
    rounds_path = os.path.join(out_dir, "rounds.jsonl")
    with open(rounds_path, "w", encoding="utf-8") as f:
        for rep in reports:
            f.write(json.dumps(rep.to_record()) + "\n")

    if reports:
        last = reports[-1]
        summary = {
            "schema": REPORT_SCHEMA_VERSION,
            "rounds": len(reports),
            "accuracy": last.accuracy,
            "auc": last.auc,
            "comm_time_s": last.comm_time_s,
            "transfer_s": last.transfer_s,
            "updates": sum(r.updates for r in reports),
            "aggregations": sum(r.aggregations for r in reports),
            "accepted_frac": (
                sum(r.accepted for r in reports)
                / max(1, sum(r.accepted + r.rejected for r in reports))
            ),
            "staleness_mean": last.staleness_mean,
            "staleness_max": max((r.staleness_max for r in reports), default=0),
            "sgd_steps": sum(r.sgd_steps for r in reports),
        }
    else:
        summary = {"schema": REPORT_SCHEMA_VERSION, "rounds": 0}
    for key in ("seed", "mode", "theta"):
        summary.setdefault(key, "")
    if summary_extra:
        summary.update(summary_extra)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, extrasaction="ignore")
        writer.writeheader()
        if reports:  # a zero-round run leaves a header-only summary
            writer.writerow({k: summary.get(k, "") for k in SUMMARY_FIELDS})
    return summary
