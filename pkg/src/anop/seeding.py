"""Named random sub-streams derived from one base seed.

Every phase (world, pretrain, stage1, stage2, eval, ...) draws from its own
stream, so changing one phase's consumption never perturbs another's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str, *extra: int) -> list[int]:
    return [zlib.crc32(name.encode("utf-8")), *[int(e) & 0xFFFFFFFF for e in extra]]


def derive_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the sub-stream ``name`` of ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(name, *extra))
    return np.random.default_rng(ss)
