"""Invertible Bloom lookup tables.

An IBLT is the difference engine of the relay protocol: each side folds
its key set into a small cell array, the arrays are subtracted, and
peeling the difference recovers exactly the keys held by one side and
not the other.  Cells carry a signed count, XOR of keys, XOR of a key
checksum, and XOR of fixed-width values; all four are linear, so
subtract really is cell-wise subtraction.

Every key maps to k distinct cells.  Indices are drawn from independent
hash streams and redrawn (with a round counter folded in) until the k
cells are distinct, which avoids the degenerate placements that make
peeling needlessly fragile.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .hashing import STREAM, derive_array, hash_bytes, hash_rows, mix64, mix64_array

_MASK64 = 0xFFFFFFFFFFFFFFFF
_CHECKSUM_STREAM = 2
_REDRAW_SALT = 0x9E3779B97F4A7C15


def iblt_sizing(expected_diff: int, multiplier: float = 1.5, k: int = 3) -> int:
    """Cell count for an expected symmetric difference size.

    ceil(multiplier * d), floored at k so the table can always host one
    key.  The default multiplier is the textbook 1.5; decoding at that
    ratio is probabilistic, so callers with a hard reliability target
    should size up (see the calibration notes in the tests).
    """
    if expected_diff < 0:
        raise ValueError("expected_diff must be non-negative")
    if k < 1:
        raise ValueError("k must be positive")
    return max(k, math.ceil(multiplier * expected_diff))


@dataclass
class DecodeResult:
    """Peeling outcome.  Entries are (key, value) byte tuples."""

    only_in_a: set[tuple[bytes, bytes]] = field(default_factory=set)
    only_in_b: set[tuple[bytes, bytes]] = field(default_factory=set)
    complete: bool = False

    def keys_only_in_a(self) -> set[bytes]:
        return {key for key, _ in self.only_in_a}

    def keys_only_in_b(self) -> set[bytes]:
        return {key for key, _ in self.only_in_b}


class Iblt:
    """Invertible Bloom lookup table over fixed-width byte keys."""

    def __init__(
        self,
        cell_count: int,
        k: int = 3,
        key_width: int = 8,
        value_width: int = 0,
        seed: int = 0,
    ) -> None:
        if cell_count < k:
            raise ValueError("cell_count must be at least k")
        if k < 1:
            raise ValueError("k must be positive")
        if key_width < 1:
            raise ValueError("key_width must be positive")
        if value_width < 0:
            raise ValueError("value_width must be non-negative")
        self.cell_count = cell_count
        self.k = k
        self.key_width = key_width
        self.value_width = value_width
        self.seed = seed & _MASK64
        self._count = np.zeros(cell_count, dtype=np.int64)
        self._keysum = np.zeros((cell_count, key_width), dtype=np.uint8)
        self._hashsum = np.zeros(cell_count, dtype=np.uint32)
        self._valsum = np.zeros((cell_count, value_width), dtype=np.uint8)

    # -- key placement -------------------------------------------------

    def _slot_constant(self, slot: int) -> int:
        if slot < len(STREAM):
            return STREAM[slot]
        return mix64(STREAM[slot % len(STREAM)] ^ (slot * _REDRAW_SALT & _MASK64))

    def _index_matrix(self, h: np.ndarray) -> np.ndarray:
        """Map digests to (n, k) distinct cell indices."""
        n = len(h)
        cells = np.uint64(self.cell_count)
        idx = np.empty((n, self.k), dtype=np.uint64)
        for slot in range(self.k):
            idx[:, slot] = mix64_array(h ^ np.uint64(self._slot_constant(slot))) % cells
        if self.k == 1:
            return idx
        live = np.arange(n)
        for round_no in range(1, 1001):
            sub = np.sort(idx[live], axis=1)
            bad = (sub[:, 1:] == sub[:, :-1]).any(axis=1)
            live = live[bad]
            if not len(live):
                return idx
            hr = mix64_array(h[live] ^ np.uint64(round_no * _REDRAW_SALT & _MASK64))
            for slot in range(self.k):
                idx[live, slot] = (
                    mix64_array(hr ^ np.uint64(self._slot_constant(slot))) % cells
                )
        raise RuntimeError("cell index redraw failed to converge")

    def cell_indices(self, key: bytes) -> tuple[int, ...]:
        """The k distinct cells a key maps to."""
        self._check_key(key)
        h = hash_rows(np.frombuffer(key, dtype=np.uint8).reshape(1, -1), self.seed)
        return tuple(int(v) for v in self._index_matrix(h)[0])

    def cell_indices_many(self, keys: np.ndarray) -> np.ndarray:
        """Cell indices for every row of an (n, key_width) matrix."""
        keys = np.ascontiguousarray(keys, dtype=np.uint8)
        if keys.ndim != 2 or keys.shape[1] != self.key_width:
            raise ValueError(f"expected (n, {self.key_width}) key matrix")
        return self._index_matrix(hash_rows(keys, self.seed)).astype(np.int64)

    # -- mutation --------------------------------------------------------

    def _check_key(self, key: bytes) -> None:
        if len(key) != self.key_width:
            raise ValueError(f"key must be {self.key_width} bytes, got {len(key)}")

    def _check_value(self, value: bytes) -> None:
        if len(value) != self.value_width:
            raise ValueError(
                f"value must be {self.value_width} bytes, got {len(value)}"
            )

    def _apply(self, key: bytes, value: bytes, sign: int) -> None:
        chk = np.uint32(self._checksum_of(key))
        key_arr = np.frombuffer(key, dtype=np.uint8)
        val_arr = np.frombuffer(value, dtype=np.uint8)
        hm = hash_rows(key_arr.reshape(1, -1), self.seed)
        for cell in self._index_matrix(hm)[0]:
            c = int(cell)
            self._count[c] += sign
            self._keysum[c] ^= key_arr
            self._hashsum[c] ^= chk
            if self.value_width:
                self._valsum[c] ^= val_arr

    def insert(self, key: bytes, value: bytes = b"") -> None:
        self._check_key(key)
        self._check_value(value)
        self._apply(key, value, 1)

    def delete(self, key: bytes, value: bytes = b"") -> None:
        self._check_key(key)
        self._check_value(value)
        self._apply(key, value, -1)

    def _bulk(self, keys: np.ndarray, values: np.ndarray | None, sign: int) -> None:
        keys = np.ascontiguousarray(keys, dtype=np.uint8)
        if keys.ndim != 2 or keys.shape[1] != self.key_width:
            raise ValueError(f"expected (n, {self.key_width}) key matrix")
        n = len(keys)
        if self.value_width:
            if values is None:
                raise ValueError("values required when value_width > 0")
            values = np.ascontiguousarray(values, dtype=np.uint8)
            if values.shape != (n, self.value_width):
                raise ValueError(f"expected (n, {self.value_width}) value matrix")
        h = hash_rows(keys, self.seed)
        chk = (derive_array(h, _CHECKSUM_STREAM) & np.uint64(0xFFFFFFFF)).astype(
            np.uint32
        )
        idx = self._index_matrix(h)
        for slot in range(self.k):
            j = idx[:, slot].astype(np.int64)
            self._count += sign * np.bincount(j, minlength=self.cell_count)
            order = np.argsort(j, kind="stable")
            sj = j[order]
            starts = np.flatnonzero(np.r_[True, sj[1:] != sj[:-1]])
            targets = sj[starts]
            self._keysum[targets] ^= np.bitwise_xor.reduceat(keys[order], starts, axis=0)
            self._hashsum[targets] ^= np.bitwise_xor.reduceat(chk[order], starts)
            if self.value_width:
                self._valsum[targets] ^= np.bitwise_xor.reduceat(
                    values[order], starts, axis=0
                )

    def insert_many(self, keys: np.ndarray, values: np.ndarray | None = None) -> None:
        """Insert every row of an (n, key_width) matrix in one pass."""
        self._bulk(keys, values, 1)

    def delete_many(self, keys: np.ndarray, values: np.ndarray | None = None) -> None:
        self._bulk(keys, values, -1)

    # -- reconciliation --------------------------------------------------

    def _require_same_shape(self, other: "Iblt") -> None:
        for attr in ("cell_count", "k", "key_width", "value_width", "seed"):
            if getattr(self, attr) != getattr(other, attr):
                raise ValueError(
                    f"cannot combine tables with different {attr}: "
                    f"{getattr(self, attr)} vs {getattr(other, attr)}"
                )

    def subtract(self, other: "Iblt") -> "Iblt":
        """Cell-wise difference self - other (same parameters required)."""
        self._require_same_shape(other)
        out = Iblt(self.cell_count, self.k, self.key_width, self.value_width, self.seed)
        out._count = self._count - other._count
        out._keysum = self._keysum ^ other._keysum
        out._hashsum = self._hashsum ^ other._hashsum
        out._valsum = self._valsum ^ other._valsum
        return out

    def _checksum_of(self, key: bytes) -> int:
        return mix64(hash_bytes(key, self.seed) ^ STREAM[_CHECKSUM_STREAM]) & 0xFFFFFFFF

    def decode(self) -> DecodeResult:
        """Peel the table.  Destructive only on a working copy."""
        count = self._count.copy()
        keysum = self._keysum.copy()
        hashsum = self._hashsum.copy()
        valsum = self._valsum.copy()
        result = DecodeResult()
        heap = [int(i) for i in np.flatnonzero(np.abs(count) == 1)]
        heapq.heapify(heap)
        while heap:
            i = heapq.heappop(heap)
            c = int(count[i])
            if c not in (1, -1):
                continue
            key = keysum[i].tobytes()
            key_chk = self._checksum_of(key)
            if key_chk != int(hashsum[i]):
                continue
            value = valsum[i].tobytes()
            chk = np.uint32(key_chk)
            key_arr = np.frombuffer(key, dtype=np.uint8)
            val_arr = np.frombuffer(value, dtype=np.uint8)
            (result.only_in_a if c == 1 else result.only_in_b).add((key, value))
            for j in self.cell_indices(key):
                count[j] -= c
                keysum[j] ^= key_arr
                hashsum[j] ^= chk
                if self.value_width:
                    valsum[j] ^= val_arr
                if abs(count[j]) == 1:
                    heapq.heappush(heap, j)
        result.complete = bool(
            not count.any()
            and not keysum.any()
            and not hashsum.any()
            and not valsum.any()
        )
        return result

    def is_empty(self) -> bool:
        """True when every cell is all-zero."""
        return bool(
            not self._count.any()
            and not self._keysum.any()
            and not self._hashsum.any()
            and not self._valsum.any()
        )

    def zero_values(self) -> None:
        """Clear the value accumulators (order payloads ride there; a
        receiver that only inserted bare keys zeroes them before peeling
        a difference)."""
        self._valsum[:] = 0

    # The value region doubles as a bank of little-endian accumulators for
    # order encoding; these two methods give windowed arithmetic access
    # without exposing the raw arrays.

    def add_to_value(self, cell: int, offset: int, width: int, amount: int) -> None:
        """Wrapping add of ``amount`` into a width-byte little-endian
        window of the cell's value field."""
        if offset < 0 or offset + width > self.value_width:
            raise ValueError("window outside value field")
        window = self._valsum[cell, offset : offset + width]
        cur = int.from_bytes(window.tobytes(), "little")
        new = (cur + amount) % (1 << (8 * width))
        window[:] = np.frombuffer(new.to_bytes(width, "little"), dtype=np.uint8)

    def read_value(self, cell: int, offset: int, width: int) -> int:
        """Read a width-byte little-endian window of the value field."""
        if offset < 0 or offset + width > self.value_width:
            raise ValueError("window outside value field")
        return int.from_bytes(
            self._valsum[cell, offset : offset + width].tobytes(), "little"
        )

    def copy(self) -> "Iblt":
        out = Iblt(self.cell_count, self.k, self.key_width, self.value_width, self.seed)
        out._count = self._count.copy()
        out._keysum = self._keysum.copy()
        out._hashsum = self._hashsum.copy()
        out._valsum = self._valsum.copy()
        return out

    # -- serialization ---------------------------------------------------

    CELL_FIXED_BYTES = 8  # count (4) + key checksum (4)
    HEADER = struct.Struct("<IBBBQ")

    @property
    def cell_bytes(self) -> int:
        return self.CELL_FIXED_BYTES + self.key_width + self.value_width

    def serialize(self) -> bytes:
        if np.abs(self._count).max(initial=0) >= 2**31:
            raise OverflowError("cell count out of int32 range")
        header = self.HEADER.pack(
            self.cell_count, self.k, self.key_width, self.value_width, self.seed
        )
        kw, vw = self.key_width, self.value_width
        buf = np.zeros((self.cell_count, self.cell_bytes), dtype=np.uint8)
        buf[:, 0:4] = self._count.astype("<i4").view(np.uint8).reshape(-1, 4)
        buf[:, 4 : 4 + kw] = self._keysum
        buf[:, 4 + kw : 8 + kw] = (
            self._hashsum.astype("<u4").view(np.uint8).reshape(-1, 4)
        )
        if vw:
            buf[:, 8 + kw :] = self._valsum
        return header + buf.tobytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "Iblt":
        if len(data) < cls.HEADER.size:
            raise ValueError("truncated table header")
        cell_count, k, key_width, value_width, seed = cls.HEADER.unpack_from(data, 0)
        out = cls(cell_count, k, key_width, value_width, seed)
        body = np.frombuffer(data[cls.HEADER.size :], dtype=np.uint8)
        expected = cell_count * out.cell_bytes
        if len(body) != expected:
            raise ValueError(f"table body is {len(body)} bytes, expected {expected}")
        buf = body.reshape(cell_count, out.cell_bytes)
        out._count = buf[:, 0:4].copy().view("<i4").reshape(-1).astype(np.int64)
        out._keysum = buf[:, 4 : 4 + key_width].copy()
        out._hashsum = (
            buf[:, 4 + key_width : 8 + key_width].copy().view("<u4").reshape(-1)
        )
        out._valsum = buf[:, 8 + key_width :].copy()
        return out

    def serialized_size(self) -> int:
        return self.HEADER.size + self.cell_count * self.cell_bytes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Iblt):
            return NotImplemented
        return (
            self.cell_count == other.cell_count
            and self.k == other.k
            and self.key_width == other.key_width
            and self.value_width == other.value_width
            and self.seed == other.seed
            and bool(np.array_equal(self._count, other._count))
            and bool(np.array_equal(self._keysum, other._keysum))
            and bool(np.array_equal(self._hashsum, other._hashsum))
            and bool(np.array_equal(self._valsum, other._valsum))
        )

    def __repr__(self) -> str:
        return (
            f"Iblt(cells={self.cell_count}, k={self.k}, key_width={self.key_width}, "
            f"value_width={self.value_width})"
        )
