"""Local anomaly-detector model: a small fully connected network.

Implemented from scratch on flat float64 parameter vectors so that the
whole federation protocol (averaging, sign comparison, checkpointing) can
treat model state as plain arrays. Hidden layers use relu with inverted
dropout (train mode scales surviving activations by 1/(1-p); eval mode
applies no dropout and no scaling). The head is a single sigmoid unit
trained with mean binary cross-entropy.

All operations are pure functions of their inputs: given the same spec,
parameters, batch and seed they return bitwise-identical results, which
is what makes simulated runs replayable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .backends import get_backend
from .rng import derive_rng


class TrainingDivergedError(RuntimeError):
    """Raised when a loss evaluates to NaN/Inf."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; immutable and hashable into a digest."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128, 64)
    output_dim: int = 1
    dropout_rate: float = 0.3
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be non-empty positive, got {self.hidden_dims}")
        if self.output_dim != 1:
            raise ValueError("only a single sigmoid output unit is supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def param_count(self) -> int:
        """Total parameters: sum over layers of (fan_in + 1) * fan_out."""
        dims = self.dims
        return sum((fi + 1) * fo for fi, fo in zip(dims[:-1], dims[1:]))

    def digest(self) -> str:
        payload = json.dumps(
            {
                "input_dim": self.input_dim,
                "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim,
                "dropout_rate": self.dropout_rate,
                "activation": self.activation,
            },
            sort_keys=True,
        )
        return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


@dataclass
class ParamVector:
    """Flat model parameters; the unit of all federation traffic."""

    values: np.ndarray
    spec_digest: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter vector must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec_digest)


@dataclass
class Batch:
    """A training batch: features [b x d] and binary labels [b]."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on batch size")
        if self.features.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("batch features contain non-finite values")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("labels must be 0 or 1")

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _check_compat(spec: ModelSpec, params: ParamVector, batch: Batch | None = None) -> None:
    if params.spec_digest != spec.digest():
        raise ValueError("parameter vector was built for a different model spec")
    if len(params) != spec.param_count:
        raise ValueError(
            f"parameter vector length {len(params)} != spec param count {spec.param_count}"
        )
    if batch is not None and batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, spec expects {spec.input_dim}"
        )


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    values = np.empty(spec.param_count, dtype=np.float64)
    dims = spec.dims
    off = 0
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        rng = derive_rng(seed, "init", layer)
        values[off : off + fan_in * fan_out] = rng.uniform(-limit, limit, fan_in * fan_out)
        off += fan_in * fan_out
        values[off : off + fan_out] = 0.0
        off += fan_out
    return ParamVector(values, spec.digest())


def dropout_masks(spec: ModelSpec, batch_size: int, seed: int) -> list[np.ndarray] | None:
    """Pre-scaled masks (0 or 1/(1-p)) per hidden layer; None when p == 0.

    Generated outside the kernels so every backend consumes identical masks.
    """
    if spec.dropout_rate == 0.0:
        return None
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    keep = 1.0 - spec.dropout_rate
    scale = 1.0 / keep
    return [
        (rng.random((batch_size, h)) < keep).astype(np.float64) * scale
        for h in spec.hidden_dims
    ]


def forward(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    mode: str = "eval",
    dropout_seed: int | None = None,
) -> np.ndarray:
    """Class-1 probabilities in (0,1) for each row of the batch."""
    _check_compat(spec, params, batch)
    if mode == "eval":
        masks = None
    elif mode == "train":
        if dropout_seed is None and spec.dropout_rate > 0.0:
            raise ValueError("train mode requires a dropout_seed")
        masks = dropout_masks(spec, batch.size, dropout_seed) if dropout_seed is not None else None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return get_backend().forward(params.values, spec.dims, batch.features, masks)


def loss_and_grad(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    dropout_seed: int | None = None,
) -> tuple[float, ParamVector]:
    """Mean BCE loss and its exact backprop gradient under one dropout mask.

    ``dropout_seed=None`` disables dropout (also the natural path when the
    spec's dropout rate is zero).
    """
    _check_compat(spec, params, batch)
    masks = None
    if dropout_seed is not None and spec.dropout_rate > 0.0:
        masks = dropout_masks(spec, batch.size, dropout_seed)
    loss, grad = get_backend().loss_and_grad(
        params.values, spec.dims, batch.features, batch.labels, masks
    )
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"loss is {loss}; batch size {batch.size}, |params|max "
            f"{np.max(np.abs(params.values)):.3g}"
        )
    return loss, ParamVector(grad, spec.digest())


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """params - lr * grad, elementwise."""
    if len(params) != len(grad):
        raise ValueError("params and grad lengths differ")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    return ParamVector(params.values - lr * grad.values, params.spec_digest)


def lr_schedule(round_index: int, base_lr: float, decay: float) -> float:
    """Exponential decay over communication rounds: base_lr * decay**round."""
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0,1], got {decay}")
    return base_lr * decay**round_index
