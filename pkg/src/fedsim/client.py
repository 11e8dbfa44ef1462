"""Simulated client runtime: batch sizing, local training, update packaging.

Training is a pure function of (start parameters, shard, hyperparameters,
seed). Data order reshuffles every epoch from a per-epoch derived stream
and each batch's dropout mask comes from a (seed, epoch, step) derived
stream, so a run interrupted at any batch boundary and resumed from a
checkpoint replays the exact same arithmetic.

Reported training time follows the simulated-time law
``epochs * num_samples / speed`` — samples processed per simulated
second, independent of the wall clock. Any per-step dispatch overhead a
scenario wants to model is charged by the engines on top of this, never
inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fault import WeibullModel
from .model import Batch, ModelSpec, ParamVector, loss_and_grad, sgd_step
from .rng import derive_rng, derive_seed
from .selection import RelevanceScore


@dataclass
class ClientProfile:
    id: int
    speed: float  # samples per simulated second
    up_latency_s: float
    down_latency_s: float
    capacity: float  # abstract resource score used for batch assignment
    dropout_rate: float = 0.0
    weibull: WeibullModel | None = None

    def __post_init__(self):
        if self.speed <= 0 or not math.isfinite(self.speed):
            raise ValueError(f"speed must be positive finite, got {self.speed}")
        if self.up_latency_s < 0 or self.down_latency_s < 0:
            raise ValueError("latencies must be >= 0")
        if self.capacity <= 0:
            raise ValueError("capacity must be > 0")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0,1]")


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    params: ParamVector
    num_samples: int
    train_time_s: float
    relevance: RelevanceScore | None = None
    steps: int = 0


@dataclass
class TrainingProgress:
    """Mid-round state captured at a batch boundary (checkpoint payload)."""

    params: ParamVector
    epoch: int
    batch_index: int  # next batch to run within the epoch
    steps_done: int
    samples_done: int


def assign_batch_size(
    profile: ClientProfile, b_ref: int, cap_ref: float, b_min: int, b_max: int
) -> int:
    """Nearest power of two to b_ref * (capacity / cap_ref), clamped."""
    for name, b in (("b_ref", b_ref), ("b_min", b_min), ("b_max", b_max)):
        if b < 1 or (b & (b - 1)) != 0:
            raise ValueError(f"{name} must be a positive power of two, got {b}")
    if not b_min <= b_ref <= b_max:
        raise ValueError("need b_min <= b_ref <= b_max")
    if cap_ref <= 0:
        raise ValueError("cap_ref must be > 0")
    target = b_ref * (profile.capacity / cap_ref)
    if target <= 0:
        return b_min
    snapped = 2 ** int(round(math.log2(target)))
    return int(min(max(snapped, b_min), b_max))


def batch_count(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def train_time_law(epochs: int, num_samples: int, speed: float) -> float:
    return epochs * num_samples / speed


def train_local(
    spec: ModelSpec,
    profile: ClientProfile,
    w_start: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr_fn,
    seed: int,
    round_index: int = 0,
    stop_after_steps: int | None = None,
    resume: TrainingProgress | None = None,
) -> ClientUpdate | TrainingProgress:
    """Run local SGD for ``epochs`` passes over the shard.

    ``lr_fn(epoch_index)`` supplies the step size (the engines pass a
    round-constant schedule). ``stop_after_steps`` halts at that batch
    boundary and returns a TrainingProgress instead of a ClientUpdate;
    ``resume`` continues from one. Results are bitwise identical whether
    or not the run was interrupted at a boundary.
    """
    n = features.shape[0]
    if n < 1:
        raise ValueError("shard is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")

    params = resume.params if resume is not None else w_start
    steps_done = resume.steps_done if resume is not None else 0
    samples_done = resume.samples_done if resume is not None else 0
    start_epoch = resume.epoch if resume is not None else 0
    start_batch = resume.batch_index if resume is not None else 0

    steps_per_epoch = batch_count(n, batch_size)
    for epoch in range(start_epoch, epochs):
        perm = derive_rng(seed, "shuffle", epoch).permutation(n)
        lr = lr_fn(epoch)
        first = start_batch if epoch == start_epoch else 0
        for b in range(first, steps_per_epoch):
            if stop_after_steps is not None and steps_done >= stop_after_steps:
                return TrainingProgress(
                    params=params,
                    epoch=epoch,
                    batch_index=b,
                    steps_done=steps_done,
                    samples_done=samples_done,
                )
            idx = perm[b * batch_size : (b + 1) * batch_size]
            batch = Batch(features[idx], labels[idx].astype(np.float64))
            mask_seed = derive_seed(seed, "mask", epoch, b)
            _, grad = loss_and_grad(spec, params, batch, dropout_seed=mask_seed)
            params = sgd_step(params, grad, lr)
            steps_done += 1
            samples_done += len(idx)

    if stop_after_steps is not None and steps_done >= stop_after_steps:
        return TrainingProgress(
            params=params,
            epoch=epochs,
            batch_index=0,
            steps_done=steps_done,
            samples_done=samples_done,
        )

    return ClientUpdate(
        client_id=profile.id,
        round=round_index,
        params=params,
        num_samples=n,
        train_time_s=train_time_law(epochs, n, profile.speed),
        steps=steps_done,
    )
