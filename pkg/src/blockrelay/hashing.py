"""Keyed 64-bit hashing used everywhere a deterministic digest is needed.

The finalizer is the splitmix64 mixer, folded over the input eight bytes at
a time.  It is seeded, so independent structures (Bloom filters, IBLTs,
checksums) can draw independent hash streams from the same key material,
and it is trivially portable: no dependency on platform hashing, and the
scalar and vectorized paths are bit-for-bit identical by construction.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

#: Golden-ratio increment, the classic splitmix64 stream constant.
GOLDEN = 0x9E3779B97F4A7C15

#: Constants used to derive independent streams from one digest.  Callers
#: index into this list (Bloom double hashing uses 0 and 1, IBLT cell
#: placement uses the whole list round-robin, checksums use 2, and so on).
STREAM = (
    0x9E3779B97F4A7C15,
    0xDA942042E4DD58B5,
    0xCA5A826395121157,
    0x5851F42D4C957F2D,
    0x14057B7EF767814F,
    0x27BB2EE687B0B0FD,
)


def mix64(x: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64`.  Returns a new uint64 array."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> 30
    x *= 0xBF58476D1CE4E5B9
    x ^= x >> 27
    x *= 0x94D049BB133111EB
    x ^= x >> 31
    return x


def hash_bytes(data: bytes, seed: int = 0) -> int:
    """Keyed 64-bit hash of a byte string.

    The input is zero-padded to a multiple of eight bytes and folded word
    by word (little-endian) through the mixer.  The length is absorbed up
    front so strings differing only in trailing zero bytes do not collide.
    """
    h = mix64((seed & _MASK64) ^ ((len(data) * GOLDEN) & _MASK64))
    for off in range(0, len(data), 8):
        word = int.from_bytes(data[off : off + 8].ljust(8, b"\x00"), "little")
        h = mix64(h ^ word)
    return h


def hash_rows(rows: np.ndarray, seed: int = 0) -> np.ndarray:
    """Hash every row of an ``(n, width)`` uint8 matrix at once.

    Bit-identical to calling :func:`hash_bytes` on each row's bytes: same
    zero padding, same little-endian word fold.
    """
    rows = np.ascontiguousarray(rows, dtype=np.uint8)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-d matrix of rows, got shape {rows.shape}")
    n, width = rows.shape
    padded_width = ((width + 7) // 8) * 8
    if padded_width != width:
        padded = np.zeros((n, padded_width), dtype=np.uint8)
        padded[:, :width] = rows
        rows = padded
    words = rows.view("<u8")
    h = np.full(n, (seed & _MASK64) ^ ((width * GOLDEN) & _MASK64), dtype=np.uint64)
    h = mix64_array(h)
    for col in range(padded_width // 8):
        h = mix64_array(h ^ words[:, col])
    return h


def derive(h: int, stream: int) -> int:
    """Derive an independent 64-bit stream from a digest."""
    return mix64(h ^ STREAM[stream])


def derive_array(h: np.ndarray, stream: int) -> np.ndarray:
    """Vectorized :func:`derive`."""
    return mix64_array(h ^ np.uint64(STREAM[stream]))
