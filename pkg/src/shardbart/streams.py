"""Keyed random streams so that results do not depend on scheduling."""

import numpy as np

from .errors import InputError

SHARD = 0
SIGMA = 1
SHARDING = 2
AUX = 3
PREDICT = 4
SUBSAMPLE = 5
DATA = 6

ROOT_PATH = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``."""
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise InputError(f"seed must be a nonnegative integer, got {seed!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def shard_stream(seed: int, path_code: int, birth_iteration: int) -> np.random.Generator:
    """Stream owned by the shard at ``path_code`` created at ``birth_iteration``."""
    return stream(seed, SHARD, path_code, birth_iteration)
