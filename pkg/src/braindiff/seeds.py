"""Stable seed derivation for independent RNG streams."""

from __future__ import annotations

import hashlib


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed from any printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)
