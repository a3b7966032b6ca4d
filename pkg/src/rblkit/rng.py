"""Deterministic random-stream derivation.

Every random draw in the toolkit comes from a counter-based Philox
generator keyed by a stable 64-bit hash, so results are bit-reproducible
across runs, platforms, and worker counts:

- the harness derives one seed per (master seed, estimator, sigma index,
  trial index) cell;
- measurement generators derive one independent stream per
  (seed, anchor, node) entry, so generation order never matters.

External tools can replay any single trial by recomputing the same
blake2b-based hash; see :func:`stable_hash64`.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

__all__ = ["stable_hash64", "derive_rng", "entry_rng"]


def stable_hash64(*parts: int | float | str) -> int:
    """Hash a tuple of ints/floats/strings to a stable unsigned 64-bit key.

    Uses blake2b over a type-tagged, length-prefixed encoding, so the
    result is independent of Python's per-process ``hash()`` randomization
    and identical across platforms.

    Args:
        *parts: Key components. Ints and floats are encoded by value,
            strings by UTF-8 bytes.

    Returns:
        Unsigned 64-bit integer key.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError("bool is ambiguous in seed keys; pass an int")
        if isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, (float, np.floating)):
            h.update(b"f")
            h.update(struct.pack("<d", float(part)))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        else:
            raise TypeError(f"unsupported seed key component: {type(part)!r}")
    return int.from_bytes(h.digest(), "little")


def derive_rng(*parts: int | float | str) -> np.random.Generator:
    """Return a Philox generator keyed by ``stable_hash64(*parts)``."""
    return np.random.Generator(np.random.Philox(key=stable_hash64(*parts)))


def entry_rng(seed: int, anchor_index: int, node_index: int) -> np.random.Generator:
    """Independent stream for one (seed, anchor, node) measurement entry."""
    return derive_rng(int(seed), int(anchor_index), int(node_index))
