"""Deterministic seed derivation for nested randomized stages."""

from __future__ import annotations

import hashlib

__all__ = ["mix_seed"]


def mix_seed(*parts) -> int:
    """Collapse (seed, trial, stage, ...) coordinates into one 64-bit seed.

    Stable across platforms and Python versions: the mix is the first 8
    bytes of SHA-256 over the '|'-joined decimal/string parts.
    """
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")
