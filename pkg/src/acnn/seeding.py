"""Seed derivation: every random stream comes from (master seed, purpose string).

Purpose strings are hashed with SHA-256 so the mapping is stable across
platforms and Python versions. Parallel and serial generation of the same
purposes therefore produce identical streams.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, purpose: str) -> int:
    """Stable 64-bit sub-seed for a named purpose."""
    digest = hashlib.sha256(f"{master_seed}/{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master_seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for a named purpose under a master seed."""
    return np.random.default_rng(derive_seed(master_seed, purpose))
