"""
Seed derivation and random streams

Seeds are split with numpy's SeedSequence, so every (seed, key...) path gives an
independent Philox stream. Keys are ints (replication, grid point) or purpose names.
"""

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be nonnegative, got {key}")
        return int(key)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """SeedSequence for the substream (seed, *keys)"""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_seed(seed: int, *keys: Key) -> int:
    """
    Derive a 64-bit unsigned seed for a sub-purpose

    Args:
        seed: Parent seed
        keys: Path of replication indices / purpose names

    Returns:
        A new seed, distinct for distinct key paths
    """
    state = seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)
    return int(state[0])


def make_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Philox generator for the substream (seed, *keys)"""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))
