"""Tokenization and fixed-width hashing shared by the filters and the hash embedder.

Every trainable component in the pipeline sees text through the same lens:
case-folded tokens split on non-alphanumeric characters. Keeping the hash
primitives here (64-bit FNV-1a, splitmix64) pins them to fixed-width integer
arithmetic so results are identical across runs, platforms, and thread counts.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric; tokens are runs of Unicode letters/digits."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given (already advanced) state."""
    z = state & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, count: int) -> list[int]:
    """First `count` splitmix64 outputs seeded at `seed`."""
    out = []
    state = seed & _U64
    for _ in range(count):
        state = (state + _SPLITMIX_GAMMA) & _U64
        out.append(splitmix64(state))
    return out


def u64_to_unit_interval(z: int) -> float:
    """Map a u64 to [0, 1) using the top 53 bits (exact in double precision)."""
    return (z >> 11) * (1.0 / (1 << 53))
