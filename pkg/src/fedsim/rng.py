"""Counter-based random stream derivation.

Every source of randomness in a run (init, shuffling, dropout masks,
latency draws, failure injection, ...) gets its own stream derived from
the master seed plus a label path, e.g. ``derive_rng(seed, "fail", 3)``.
Streams are independent of each other and of how many other streams
exist, so adding clients to a config never perturbs the randomness seen
by existing clients.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_word(label) -> int:
    """Map a path component to a stable uint32."""
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return int(label) & 0xFFFFFFFF
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


def derive_seedseq(master_seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for the stream named by ``path`` under ``master_seed``."""
    return np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(_label_word(p) for p in path)
    )


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """Independent Generator for the stream named by ``path``."""
    return np.random.default_rng(derive_seedseq(master_seed, *path))


def derive_seed(master_seed: int, *path) -> int:
    """A plain integer sub-seed (for APIs that take a seed, not a Generator)."""
    return int(derive_seedseq(master_seed, *path).generate_state(1, np.uint64)[0])
