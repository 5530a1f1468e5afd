"""Deterministic per-component random streams derived from a single root seed.

Streams are derived by hashing (root, component-name), so adding a new
component never perturbs the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    """Stable 63-bit seed for a named component under a root seed."""
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(root: int, name: str) -> np.random.Generator:
    """Independent generator for a named component."""
    return np.random.default_rng(derive_seed(root, name))
