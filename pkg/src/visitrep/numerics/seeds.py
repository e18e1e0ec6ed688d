"""Deterministic seed derivation for independent RNG streams."""

import hashlib


def derive_seed(seed: int, tag: str) -> int:
    """Stable 64-bit child seed for (seed, tag); independent streams per tag."""
    payload = f"{seed}:{tag}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
