"""Seed derivation.

Every random draw in the pipeline comes from a generator derived from the run
seed plus a tuple of keys (stream name, item index, ...), so results do not
depend on iteration order.
"""
import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(seed: int, *keys: Key) -> int:
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
