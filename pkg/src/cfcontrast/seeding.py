"""Deterministic random-stream derivation used by every pipeline stage.

A single master seed fans out into independent substreams keyed by stage
names and record indices. String keys are hashed with crc32 so the
derivation is stable across processes and worker counts: any consumer can
reconstruct exactly the stream it needs from ``(master_seed, *keys)``
without coordinating with other workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        value = int(key)
        if value < 0:
            raise ValueError(f"seed keys must be non-negative, got {value}")
        return value
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"seed keys must be int or str, got {type(key).__name__}")


def seed_sequence(master_seed: int, *keys: int | str) -> np.random.SeedSequence:
    """SeedSequence for ``(master_seed, *keys)``; string keys are crc32-hashed."""
    entropy = [_key_to_int(master_seed)] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def substream(master_seed: int, *keys: int | str) -> np.random.Generator:
    """Independent PCG64 generator for ``(master_seed, *keys)``."""
    return np.random.default_rng(seed_sequence(master_seed, *keys))


def derive_int_seed(master_seed: int, *keys: int | str) -> int:
    """Stable 63-bit integer seed, e.g. for ``torch.manual_seed``."""
    state = seed_sequence(master_seed, *keys).generate_state(1, np.uint64)[0]
    return int(state) & ((1 << 63) - 1)
