"""Dataset ingestion, synthetic anomaly generation, and client partitioning.

Datasets are stored model-ready: numeric columns z-scored with the
population standard deviation (constant columns get std clamped to 1 and
become all zeros), categorical columns one-hot expanded (categories in
sorted order, columns named ``col=value``). ``scaling_stats`` maps back to
raw space, so exporting and re-loading a dataset reproduces the in-memory
features.

Partitioning uses Dirichlet label skew: for every label, per-client
proportions are drawn from Dirichlet(alpha, ..., alpha) and rows are
assigned accordingly, redrawing (bounded) until every client holds at
least one row. Smaller alpha means more skew.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng

log = logging.getLogger(__name__)

DEFAULT_LABEL_MAPPING = {"0": 0, "1": 1, "normal": 0, "anomaly": 1, "attack": 1}


class DataError(ValueError):
    """Ingestion problems: missing columns, empty/unusable files."""


@dataclass
class Dataset:
    features: np.ndarray  # [n x d], float64, scaled
    labels: np.ndarray  # [n], int8 of {0,1}
    feature_names: list[str]
    scaling_stats: tuple[np.ndarray, np.ndarray]  # per-column (mean, std)
    n_dropped: int = 0

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        n, d = self.features.shape
        if n < 2:
            raise DataError("dataset needs at least 2 rows")
        if len(self.labels) != n or len(self.feature_names) != d:
            raise DataError("features/labels/names shapes disagree")
        mean, std = self.scaling_stats
        if np.any(np.asarray(std) <= 0):
            raise DataError("scaling stds must be > 0")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Partition:
    assignments: list[np.ndarray]  # per-client row indices

    def __post_init__(self):
        seen = set()
        for idx in self.assignments:
            if len(idx) < 1:
                raise ValueError("every client needs at least one row")
            s = set(int(i) for i in idx)
            if seen & s:
                raise ValueError("client index sets overlap")
            seen |= s


def scale_columns(raw: np.ndarray, skip: np.ndarray | None = None):
    """Population z-scoring; constant columns clamp std to 1.

    ``skip`` marks columns (e.g. one-hot) left unscaled, recorded with
    identity stats so re-scaling stays a no-op.
    """
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)  # population std
    std = np.where(std == 0.0, 1.0, std)
    if skip is not None:
        mean = np.where(skip, 0.0, mean)
        std = np.where(skip, 1.0, std)
    return (raw - mean) / std, (mean, std)


def load_csv(
    path: str,
    label_column: str,
    categorical_columns: list[str] | None = None,
    label_mapping: dict[str, int] | None = None,
) -> Dataset:
    """Load a header-carrying CSV; see module docstring for preprocessing.

    Rows with unparseable numeric cells or unmapped labels are dropped and
    counted (``Dataset.n_dropped``).
    """
    categorical_columns = list(categorical_columns or [])
    mapping = {str(k): int(v) for k, v in (label_mapping or DEFAULT_LABEL_MAPPING).items()}

    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    if label_column not in header:
        raise DataError(f"{path}: label column {label_column!r} not in header {header}")
    for col in categorical_columns:
        if col not in header:
            raise DataError(f"{path}: categorical column {col!r} not in header")
    label_idx = header.index(label_column)
    cat_idx = {header.index(c) for c in categorical_columns}
    numeric_idx = [i for i in range(len(header)) if i != label_idx and i not in cat_idx]

    kept_numeric: list[list[float]] = []
    kept_cats: list[list[str]] = []
    kept_labels: list[int] = []
    dropped = 0
    for row in rows:
        if len(row) != len(header):
            dropped += 1
            continue
        label_raw = row[label_idx].strip()
        if label_raw not in mapping:
            dropped += 1
            continue
        try:
            nums = [float(row[i]) for i in numeric_idx]
        except ValueError:
            dropped += 1
            continue
        if not all(np.isfinite(v) for v in nums):
            dropped += 1
            continue
        kept_numeric.append(nums)
        kept_cats.append([row[i].strip() for i in sorted(cat_idx)])
        kept_labels.append(mapping[label_raw])

    if dropped:
        log.info("%s: dropped %d unparseable rows (%d kept)", path, dropped, len(kept_labels))
    if len(kept_labels) < 2:
        raise DataError(f"{path}: fewer than 2 usable rows ({dropped} dropped)")

    # assemble columns in header order, one-hot expanding categoricals in place
    blocks: list[np.ndarray] = []
    names: list[str] = []
    onehot_flags: list[bool] = []
    numeric_arr = np.asarray(kept_numeric, dtype=np.float64) if numeric_idx else None
    cats_by_col = list(zip(*kept_cats)) if cat_idx else []
    sorted_cat_idx = sorted(cat_idx)
    num_pos = 0
    for i, col in enumerate(header):
        if i == label_idx:
            continue
        if i in cat_idx:
            values = cats_by_col[sorted_cat_idx.index(i)]
            categories = sorted(set(values))
            for cat in categories:
                blocks.append(np.asarray([1.0 if v == cat else 0.0 for v in values]))
                names.append(f"{col}={cat}")
                onehot_flags.append(True)
        else:
            blocks.append(numeric_arr[:, num_pos])
            num_pos += 1
            names.append(col)
            onehot_flags.append(False)

    raw = np.column_stack(blocks)
    scaled, stats = scale_columns(raw, skip=np.asarray(onehot_flags))
    return Dataset(
        features=scaled,
        labels=np.asarray(kept_labels, dtype=np.int8),
        feature_names=names,
        scaling_stats=stats,
        n_dropped=dropped,
    )


def write_csv(ds: Dataset, path: str, label_column: str = "label") -> None:
    """Export in raw (unscaled) space with full float precision."""
    mean, std = ds.scaling_stats
    raw = ds.features * std + mean
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(ds.feature_names) + [label_column])
        for row, label in zip(raw, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def synth_anomaly(
    n: int, d: int, anomaly_frac: float, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs: normals at the origin, anomalies shifted by
    ``separation`` along a fixed unit direction; both with identity
    covariance. Exactly max(1, floor(n * anomaly_frac)) anomalies.
    """
    if not 0.0 < anomaly_frac < 1.0:
        raise ValueError(f"anomaly_frac must be in (0,1), got {anomaly_frac}")
    n_anom = max(1, int(np.floor(n * anomaly_frac)))
    if n_anom >= n:
        raise ValueError("anomaly_frac leaves no normal rows")
    n_norm = n - n_anom

    direction = np.ones(d) / np.sqrt(d)
    normals = derive_rng(seed, "normals").normal(size=(n_norm, d))
    anomalies = derive_rng(seed, "anomalies").normal(size=(n_anom, d)) + separation * direction

    raw = np.vstack([normals, anomalies])
    labels = np.concatenate([np.zeros(n_norm, dtype=np.int8), np.ones(n_anom, dtype=np.int8)])
    order = derive_rng(seed, "shuffle").permutation(n)
    raw, labels = raw[order], labels[order]

    scaled, stats = scale_columns(raw)
    names = [f"f{i}" for i in range(d)]
    return Dataset(features=scaled, labels=labels, feature_names=names, scaling_stats=stats)


def partition_dirichlet(
    ds: Dataset,
    num_clients: int,
    alpha: float,
    seed: int,
    indices: np.ndarray | None = None,
    fraction: float = 1.0,
    max_retries: int = 100,
) -> Partition:
    """Dirichlet label-skew split of ``indices`` (default: all rows)."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0,1]")

    pool = np.arange(ds.n) if indices is None else np.asarray(indices)
    rng = derive_rng(seed, "partition")
    if fraction < 1.0:
        take = max(num_clients, int(round(len(pool) * fraction)))
        pool = rng.permutation(pool)[:take]

    if num_clients == 1:
        return Partition([np.sort(pool)])

    labels = ds.labels[pool]
    for _ in range(max_retries):
        buckets: list[list[int]] = [[] for _ in range(num_clients)]
        for lab in np.unique(labels):
            rows = pool[labels == lab]
            rows = rng.permutation(rows)
            props = rng.dirichlet([alpha] * num_clients)
            bounds = (np.cumsum(props) * len(rows)).astype(int)[:-1]
            for client, chunk in enumerate(np.split(rows, bounds)):
                buckets[client].extend(int(r) for r in chunk)
        if all(len(b) >= 1 for b in buckets):
            return Partition([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets])
    raise RuntimeError(
        f"could not give every one of {num_clients} clients a row after {max_retries} draws"
    )


def stratified_split(ds: Dataset, test_frac: float, seed: int):
    """Per-label proportional holdout; returns (train_idx, test_idx)."""
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must be in (0,1)")
    rng = derive_rng(seed, "split")
    train, test = [], []
    for lab in np.unique(ds.labels):
        rows = rng.permutation(np.flatnonzero(ds.labels == lab))
        n_test = max(1, int(round(len(rows) * test_frac)))
        test.extend(rows[:n_test])
        train.extend(rows[n_test:])
    return np.sort(np.asarray(train)), np.sort(np.asarray(test))
