"""Seed splitting.

Every consumer of randomness derives its own generator from the run seed
and a tuple of string/int labels, e.g. ``derive_rng(seed, "pretrain",
"temporal")``. Labels are hashed with CRC32 and fed, together with the
seed, to :class:`numpy.random.SeedSequence`, so streams are independent
and stable across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(seed: int, *labels) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_key(lb) for lb in labels)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
