"""Deterministic counter-based random streams.

Every source of randomness in the package is a Philox stream whose key is
derived by hashing a tuple of labels (seed, purpose, indices...).  Streams
derived from distinct label tuples are independent, and a stream's output
never depends on how work was scheduled across workers, only on its labels.

Philox advances its counter in blocks of four 64-bit outputs, so
``stream_at(parts, block)`` positions a stream exactly ``4 * block`` doubles
into the stream that ``stream(*parts)`` would produce.
"""

from __future__ import annotations

import hashlib

import numpy as np

# uniforms produced per Philox counter increment
BLOCK = 4


def derive_key(*parts: int | str) -> tuple[int, int]:
    """Hash a label tuple into a 128-bit Philox key.

    Accepts ints and strings; the encoding is unambiguous (type-tagged and
    length-prefixed) so e.g. (1, "23") and (12, "3") hash differently.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"stream labels must be int or str, got {type(part).__name__}")
        if isinstance(part, int):
            raw = part.to_bytes(16, "little", signed=True)
            h.update(b"i")
        else:
            raw = part.encode("utf-8")
            h.update(b"s")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    digest = h.digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    )


def stream(*parts: int | str) -> np.random.Generator:
    """Fresh generator for the stream labelled by `parts`."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def stream_at(parts: tuple[int | str, ...], block: int) -> np.random.Generator:
    """Generator for the `parts` stream, skipped ahead `block` counter blocks."""
    bitgen = np.random.Philox(key=derive_key(*parts))
    if block:
        bitgen.advance(block)
    return np.random.Generator(bitgen)


def blocks_for(n_draws: int) -> int:
    """Counter blocks needed to hold `n_draws` doubles."""
    return -(-n_draws // BLOCK)
