"""Stage-keyed seed splitting.

Every random draw derives from ``(master_seed, stage, index)`` through a keyed
hash, so a stage can be re-run alone without replaying earlier stages.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    h = hashlib.blake2b(f"{stage}:{int(index)}".encode(), digest_size=8,
                        key=int(master).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, index))
