"""Deterministic seed fan-out.

A single root seed is expanded into independent named sub-streams so that
components (data shuffling, weight init, batch order, sampling noise) can be
re-seeded without coupling to each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_to_int(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return an independent generator for (root_seed, name, indices)."""
    ss = np.random.SeedSequence([int(root_seed), _name_to_int(name), *[int(i) for i in indices]])
    return np.random.default_rng(ss)


def subseed(root_seed: int, name: str, *indices: int) -> int:
    """A 32-bit integer seed derived from (root_seed, name, indices)."""
    ss = np.random.SeedSequence([int(root_seed), _name_to_int(name), *[int(i) for i in indices]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
