"""Failure modeling and checkpointing.

Client dropouts are injected per (client, round) as independent Bernoulli
draws. Failure *probability over time*, used to place checkpoints, follows
a Weibull law F(t) = 1 - exp(-(t/lambda)^k); the checkpoint interval is
chosen by minimizing the cost

    C(t_c) = t_c / T + F(t_c) * t_r / T

over a grid (the failure probability at interval t_c is identified with
the Weibull CDF, which is the only reading that makes the cost
computable). Both terms are non-decreasing in t_c, so the minimizer sits
at the left end of whatever grid is allowed; the grid resolution is
therefore the real knob and is part of the policy.

Checkpoint persistence uses a versioned binary container:

    magic "FSCK" | u16 version | u16 n_sections
    per section: u16 name_len | name utf-8 | u64 payload_len | payload
    trailer: blake2b-8 digest of everything before it

Sections: "meta" (JSON: scope, round, seq, progress, optimizer state,
spec digest) and "params" (raw little-endian float64). Restore verifies
the digest and refuses corrupt blobs. File writes are atomic
(write-temp-then-rename) and every file's digest is recorded in a
MANIFEST.json next to it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ParamVector
from .rng import derive_rng

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


class CorruptCheckpointError(RuntimeError):
    """Blob digest mismatch or malformed container."""


@dataclass(frozen=True)
class WeibullModel:
    lambda_s: float  # scale, simulated seconds
    k: float  # shape

    def __post_init__(self):
        if self.lambda_s <= 0 or self.k <= 0:
            raise ValueError(f"Weibull parameters must be positive, got {self}")


@dataclass(frozen=True)
class CheckpointPolicy:
    t_c_s: float  # checkpoint interval
    total_time_s: float  # T, total computation time
    recovery_s: float  # t_r

    def __post_init__(self):
        if self.total_time_s <= 0:
            raise ValueError("total_time_s must be > 0")
        if not 0 < self.t_c_s <= self.total_time_s:
            raise ValueError("t_c_s must be in (0, total_time_s]")
        if self.recovery_s < 0:
            raise ValueError("recovery_s must be >= 0")


def weibull_cdf(t_s: float, model: WeibullModel) -> float:
    """F(t) = 1 - exp(-(t/lambda)^k)."""
    if t_s < 0:
        raise ValueError("t_s must be >= 0")
    if t_s == 0.0:
        return 0.0
    return 1.0 - math.exp(-((t_s / model.lambda_s) ** model.k))


def checkpoint_cost(t_c_s: float, policy: CheckpointPolicy, model: WeibullModel) -> float:
    """C(t_c) = t_c/T + F(t_c) * t_r/T."""
    if not 0 < t_c_s <= policy.total_time_s:
        raise ValueError("t_c_s must be in (0, total_time_s]")
    t = policy.total_time_s
    return t_c_s / t + weibull_cdf(t_c_s, model) * policy.recovery_s / t


def optimal_interval(policy: CheckpointPolicy, model: WeibullModel, grid_s: float) -> float:
    """Argmin of checkpoint_cost over {grid, 2*grid, ..., <= T}; ties go small."""
    if grid_s <= 0:
        raise ValueError("grid_s must be > 0")
    best_t = None
    best_c = math.inf
    steps = int(policy.total_time_s / grid_s)
    if steps < 1:
        raise ValueError("grid_s larger than total_time_s leaves no candidates")
    for i in range(1, steps + 1):
        t_c = min(i * grid_s, policy.total_time_s)  # guard float overshoot at T
        c = checkpoint_cost(t_c, policy, model)
        if c < best_c:  # strict: first (smallest) minimizer wins ties
            best_c = c
            best_t = t_c
    return best_t


def inject_dropout(num_clients: int, rounds: int, rate: float, seed: int) -> np.ndarray:
    """Boolean [clients x rounds] failure schedule; one stream per client.

    Each (client, round) fails independently with probability ``rate``;
    per-client streams keep the schedule stable when clients are added.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0,1], got {rate}")
    schedule = np.zeros((num_clients, rounds), dtype=bool)
    for i in range(num_clients):
        draws = derive_rng(seed, "fail", i).random(rounds)
        schedule[i] = draws < rate
    return schedule


def failure_offsets(num_clients: int, rounds: int, seed: int) -> np.ndarray:
    """Fraction [0,1) of the training span at which a failure lands."""
    offsets = np.zeros((num_clients, rounds), dtype=np.float64)
    for i in range(num_clients):
        offsets[i] = derive_rng(seed, "fail-offset", i).random(rounds)
    return offsets


@dataclass
class Checkpoint:
    """Recoverable state of a client mid-round or of the global model."""

    scope: str  # "global" or "client-<id>"
    round: int
    seq: int
    params: ParamVector
    optimizer_state: dict = field(default_factory=dict)  # lr, train seed, ...
    epoch: int = 0
    batch_index: int = 0


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    """Encode to the versioned container; restore(save(x)) == x bitwise."""
    meta = {
        "scope": ckpt.scope,
        "round": ckpt.round,
        "seq": ckpt.seq,
        "spec_digest": ckpt.params.spec_digest,
        "optimizer_state": ckpt.optimizer_state,
        "epoch": ckpt.epoch,
        "batch_index": ckpt.batch_index,
    }
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
        ("params", ckpt.params.values.astype("<f8").tobytes()),
    ]
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HH", CHECKPOINT_VERSION, len(sections))
    for name, payload in sections:
        raw = name.encode("ascii")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<Q", len(payload))
        out += payload
    out += hashlib.blake2b(bytes(out), digest_size=8).digest()
    return bytes(out)


def restore_checkpoint(blob: bytes) -> Checkpoint:
    """Decode and verify; raises CorruptCheckpointError on any damage."""
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 8:
        raise CorruptCheckpointError("blob too short")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptCheckpointError("digest mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad magic")
    version, n_sections = struct.unpack_from("<HH", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported container version {version}")
    off = 8
    sections = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("ascii")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        sections[name] = body[off : off + payload_len]
        off += payload_len
    if off != len(body):
        raise CorruptCheckpointError("trailing bytes in container")
    try:
        meta = json.loads(sections["meta"])
        values = np.frombuffer(sections["params"], dtype="<f8").astype(np.float64)
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"malformed sections: {exc}") from exc
    return Checkpoint(
        scope=meta["scope"],
        round=meta["round"],
        seq=meta["seq"],
        params=ParamVector(values.copy(), meta["spec_digest"]),
        optimizer_state=meta["optimizer_state"],
        epoch=meta["epoch"],
        batch_index=meta["batch_index"],
    )


def checkpoint_filename(scope: str, round_index: int, seq: int) -> str:
    return f"{scope}-{round_index}-{seq}.ckpt"


def write_checkpoint_file(ckpt: Checkpoint, directory: str) -> str:
    """Atomic write (temp + rename) plus a MANIFEST.json digest entry."""
    os.makedirs(directory, exist_ok=True)
    blob = save_checkpoint(ckpt)
    name = checkpoint_filename(ckpt.scope, ckpt.round, ckpt.seq)
    path = os.path.join(directory, name)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)

    manifest_path = os.path.join(directory, "MANIFEST.json")
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    manifest[name] = hashlib.blake2b(blob, digest_size=8).hexdigest()
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, manifest_path)
    return path


def read_checkpoint_file(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return restore_checkpoint(f.read())
