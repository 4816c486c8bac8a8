"""Deterministic seed splitting: every subsystem draws from its own stream."""
import zlib

import numpy as np


def derive_seed(root, *keys):
    """Return a 63-bit seed derived from ``root`` and a path of int/str keys."""
    entropy = [int(root) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        entropy.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def make_rng(root, *keys):
    return np.random.default_rng(derive_seed(root, *keys))
