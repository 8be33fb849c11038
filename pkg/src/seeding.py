"""
Seed derivation shared by partitioning, protocols and experiments.
"""

import hashlib


def derive_seed(*parts) -> int:
    """
    Derive a 63-bit seed from an ordered tuple of parts.

    The parts are joined with ':' and hashed with SHA-256, so distinct
    tuples give unrelated seeds and the result never depends on process
    state such as Python's string hash randomisation.
    """
    key = ":".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
