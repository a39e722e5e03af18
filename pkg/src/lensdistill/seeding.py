"""Counter-based seed fan-out.

Every component draws from ``component_rng(seed, name)``, whose stream is
keyed by sha256 of ``"<seed>/<name>"``. Adding a component never shifts the
stream of another, so re-runs with the same top-level seed are exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
