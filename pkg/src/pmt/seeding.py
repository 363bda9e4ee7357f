"""Named sub-seeds derived from one global seed.

Every random stream in the pipeline is keyed by (global seed, stage, entity),
so a stage or a single agent can be regenerated without replaying the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Stable 63-bit seed from a global seed and any number of name parts."""
    h = hashlib.sha256(str(int(seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)


def rng_for(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
