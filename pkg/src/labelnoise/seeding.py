"""Named deterministic RNG streams.

Every random draw in the package flows from a stream derived from
(base seed, stage name), so individual pipeline stages can be rerun
independently and reproduce byte-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base_seed: int, name: str) -> int:
    """Map (base seed, stream name) to a stable 64-bit child seed."""
    if not name:
        raise ValueError("stream name must be non-empty")
    digest = hashlib.sha256(f"{base_seed}:{name}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def named_rng(base_seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for one named stage of a run."""
    return np.random.default_rng(derive_seed(base_seed, name))
