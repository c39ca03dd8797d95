"""Order-independent seed derivation."""
from __future__ import annotations

import hashlib


def derive_seed(base_seed: int, key: str) -> int:
    """Stable 63-bit seed from a base seed and a string key (process independent)."""
    digest = hashlib.blake2b(f"{int(base_seed)}|{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
