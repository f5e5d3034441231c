"""Deterministic stream derivation from one root seed.

Every random consumer derives its own Philox (counter-based) generator from
the root seed plus a string path, so adding or reordering pipeline stages
never perturbs the streams of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(root_seed: int, *path) -> int:
    text = f"{int(root_seed)}::" + "/".join(str(p) for p in path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(root_seed, *path)))
