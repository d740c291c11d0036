"""Deterministic RNG derivation.

Every random draw in the project comes from a generator derived here from
(root seed, purpose tags). Streams are independent of call order and of each
other, which is what makes checkpoint resume replay the original trajectory:
nothing consumes a shared global RNG.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Numpy generator for the stream named by ``tags`` under ``seed``."""
    entropy = (int(seed),) + tuple(_tag_to_int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_torch_seed(seed: int, *tags) -> int:
    """64-bit seed for a ``torch.Generator``, same stream naming scheme."""
    entropy = (int(seed),) + tuple(_tag_to_int(t) for t in tags)
    words = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
    return int(words[0] ^ (words[1] >> 1))


def derive_torch_generator(seed: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_torch_seed(seed, *tags))
    return gen
