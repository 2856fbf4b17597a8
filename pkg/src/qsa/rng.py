"""Seeded, label-separated random streams.

Every stochastic component draws from a stream keyed by SHA-256 over
(seed, label). The stream itself is numpy's Philox generator, which is
counter based, so two streams with different labels never share state and
results do not depend on call order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np

Seed = bytes | int | str


def _seed_bytes(seed: Seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        if seed < 0:
            raise ValueError("integer seeds must be non-negative")
        return seed.to_bytes(max(1, (seed.bit_length() + 7) // 8), "big")
    return seed.encode()


def stream(seed: Seed, label: str = "") -> np.random.Generator:
    """Return an independent generator for ``(seed, label)``."""
    h = hashlib.sha256()
    raw = _seed_bytes(seed)
    h.update(len(raw).to_bytes(4, "big"))
    h.update(raw)
    h.update(label.encode())
    key = int.from_bytes(h.digest()[:16], "big")
    return np.random.Generator(np.random.Philox(key=key))


def child(rng: np.random.Generator, label: str) -> np.random.Generator:
    """Derive a labelled sub-stream from an existing generator.

    Consumes 16 bytes of ``rng`` so sibling children differ.
    """
    return stream(rng.bytes(16), label)
