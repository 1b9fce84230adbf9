"""Recovery of transaction order within a relayed block.

Set reconciliation tells the receiver *which* transactions form the
block; this module restores their order.  Two codecs are provided:

* Lexicographic indices: sort the ShortIds, then ship each sorted
  position's canonical index as a fixed-width bit field.  Always exact,
  costs n*ceil(log2 n) bits.

* Bucket constraints: ride the order inside the IBLT's value fields.
  Each cell's value region is divided into b accumulator buckets; every
  transaction adds its 1-based index into one bucket per cell (selected
  by a ShortId byte).  The receiver, knowing the transaction set, turns
  the accumulators into linear equations and solves them by repeated
  unary-constraint propagation, never guessing.  When the system is
  underdetermined, the sender discloses just enough raw indices to make
  it square (the fallback path below).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .iblt import Iblt

#: Accumulator headroom: bucket widths are provisioned so that this many
#: addends can never wrap, and encoders enforce the limit.
MAX_BUCKET_ADDENDS = 64


class MalformedPayloadError(ValueError):
    """An order payload that cannot be decoded against the given set."""


class InconsistentSystemError(ValueError):
    """A constraint system that contradicts itself (corrupt input)."""


class BucketOverflowError(ValueError):
    """More addends landed in one bucket than its width can carry."""


def index_bits(n: int) -> int:
    """Bits needed for an index in 1..n, i.e. ceil(log2 n)."""
    if n < 1:
        raise ValueError("n must be positive")
    return (n - 1).bit_length()


def bucket_width_for(n: int, max_addends: int = MAX_BUCKET_ADDENDS) -> int:
    """Bytes per bucket accumulator.

    A bucket holds a *sum* of indices, not a single index, so the width
    covers ceil(log2 n) bits plus log2(max_addends) carry headroom,
    rounded up to whole bytes.
    """
    if max_addends < 1:
        raise ValueError("max_addends must be positive")
    return max(1, math.ceil((index_bits(n) + (max_addends - 1).bit_length()) / 8))


# -- lexicographic codec --------------------------------------------------


def lex_order_encode(block_order: Sequence[bytes]) -> bytes:
    """Encode the canonical order of a block's ShortIds.

    ``block_order`` lists the ids in canonical (block) order.  For each
    id in lexicographic order, the payload stores its canonical position
    (0-based) in ceil(log2 n) bits, packed MSB-first.
    """
    n = len(block_order)
    position = {sid: i for i, sid in enumerate(block_order)}
    if len(position) != n:
        raise ValueError("duplicate ShortIds in block order")
    bits = index_bits(n) if n else 0
    if bits == 0:
        return b""
    out = bytearray((n * bits + 7) // 8)
    bitpos = 0
    for sid in sorted(position):
        val = position[sid]
        for shift in range(bits - 1, -1, -1):
            if (val >> shift) & 1:
                out[bitpos >> 3] |= 1 << (7 - (bitpos & 7))
            bitpos += 1
    return bytes(out)


def lex_order_decode(short_ids: Iterable[bytes], payload: bytes) -> list[bytes]:
    """Inverse of :func:`lex_order_encode`; returns ids in canonical order."""
    ids = sorted(short_ids)
    if len(ids) != len(set(ids)):
        raise MalformedPayloadError("duplicate ShortIds")
    n = len(ids)
    if n == 0:
        if payload:
            raise MalformedPayloadError("unexpected payload for empty set")
        return []
    bits = index_bits(n)
    expected = (n * bits + 7) // 8
    if len(payload) != expected:
        raise MalformedPayloadError(
            f"payload is {len(payload)} bytes, expected {expected} for n={n}"
        )
    result: list[bytes | None] = [None] * n
    bitpos = 0
    for sid in ids:
        val = 0
        for _ in range(bits):
            val = (val << 1) | ((payload[bitpos >> 3] >> (7 - (bitpos & 7))) & 1)
            bitpos += 1
        if val >= n:
            raise MalformedPayloadError(f"canonical index {val} out of range")
        if result[val] is not None:
            raise MalformedPayloadError(f"canonical index {val} repeated")
        result[val] = sid
    return result  # type: ignore[return-value]


# -- bucket constraint codec ----------------------------------------------


@dataclass(frozen=True)
class BucketEncoding:
    """Geometry of the per-cell accumulator bank.

    v bytes of value field per cell are split into b buckets of
    bucket_width bytes each (b = floor(v / bucket_width)).
    """

    n: int
    v: int
    bucket_width: int
    b: int

    @classmethod
    def from_value_width(cls, n: int, v: int) -> "BucketEncoding":
        """Recover the geometry from a wire-observed value width."""
        w = bucket_width_for(n)
        b = v // w
        if b < 1:
            raise ValueError(f"value width {v} too small for one bucket of {w} bytes")
        return cls(n=n, v=v, bucket_width=w, b=b)

    @classmethod
    def for_bucket_count(cls, n: int, b: int) -> "BucketEncoding":
        if b < 1:
            raise ValueError("need at least one bucket")
        w = bucket_width_for(n)
        return cls(n=n, v=b * w, bucket_width=w, b=b)

    @classmethod
    def for_geometry(cls, n: int, cells: int, ratio: float) -> "BucketEncoding":
        """Size buckets so cells*b is about ratio*n (total buckets versus
        transaction count, the figure-of-merit the solver cares about)."""
        return cls.for_bucket_count(n, max(1, round(ratio * n / cells)))


def bucket_for(sid: bytes, slot: int, b: int) -> int:
    """Bucket selected by a transaction in its slot-th cell: byte ``slot``
    of the ShortId mod b."""
    return sid[slot % len(sid)] % b


def ordered_cells(table: Iblt, tx: bytes) -> tuple[int, ...]:
    """A transaction's k cells in ascending order.

    Bucket selection pairs byte i of the ShortId with the i-th cell; the
    enumeration must be canonical (placement slots are an implementation
    detail of the table), so cells are taken in sorted order.  With the
    cells-equals-k geometry of the ordering experiment this makes byte i
    address cell i exactly.
    """
    return tuple(sorted(table.cell_indices(tx)))


def bucket_index_encode(table: Iblt, tx: bytes, index: int, enc: BucketEncoding) -> None:
    """Accumulate a transaction's 1-based index into one bucket of each
    of its k cells.  Unchecked: see :class:`BucketIndexEncoder` for the
    overflow-enforcing path."""
    if not 1 <= index <= enc.n:
        raise ValueError(f"index {index} outside 1..{enc.n}")
    for slot, cell in enumerate(ordered_cells(table, tx)):
        j = bucket_for(tx, slot, enc.b)
        table.add_to_value(cell, j * enc.bucket_width, enc.bucket_width, index)


class BucketIndexEncoder:
    """Order encoder with per-bucket load tracking.

    Wrapping accumulators stay exact only while no bucket exceeds the
    addend budget the width was provisioned for; this class enforces it.
    """

    def __init__(
        self, table: Iblt, enc: BucketEncoding, max_addends: int = MAX_BUCKET_ADDENDS
    ) -> None:
        if table.value_width < enc.v:
            raise ValueError("table value field narrower than encoding")
        self.table = table
        self.enc = enc
        self.max_addends = max_addends
        self._loads = np.zeros((table.cell_count, enc.b), dtype=np.int32)

    def add(self, tx: bytes, index: int) -> None:
        self.add_many(
            np.frombuffer(tx, dtype=np.uint8).reshape(1, -1), np.array([index])
        )

    def add_many(self, txs: np.ndarray, indices: np.ndarray) -> None:
        """Accumulate many (transaction, index) pairs in one pass."""
        enc = self.enc
        txs = np.ascontiguousarray(txs, dtype=np.uint8)
        if len(txs) != len(indices):
            raise ValueError("txs and indices length mismatch")
        if len(indices) and not (
            1 <= int(np.min(indices)) and int(np.max(indices)) <= enc.n
        ):
            raise ValueError(f"indices outside 1..{enc.n}")
        cells = np.sort(self.table.cell_indices_many(txs), axis=1)
        for row, index in enumerate(indices):
            tx = txs[row]
            for slot in range(self.table.k):
                cell = int(cells[row, slot])
                j = int(tx[slot % len(tx)]) % enc.b
                if self._loads[cell, j] + 1 > self.max_addends:
                    raise BucketOverflowError(
                        f"bucket ({cell}, {j}) exceeded {self.max_addends} addends"
                    )
                self._loads[cell, j] += 1
                self.table.add_to_value(
                    cell, j * enc.bucket_width, enc.bucket_width, int(index)
                )


def bucket_values(table: Iblt, enc: BucketEncoding) -> np.ndarray:
    """Read every accumulator: (cell_count, b) integer matrix."""
    w = enc.bucket_width
    region = table._valsum[:, : enc.b * w].reshape(table.cell_count, enc.b, w)
    weights = (256 ** np.arange(w, dtype=np.int64)).reshape(1, 1, w)
    return (region.astype(np.int64) * weights).sum(axis=2)


@dataclass(frozen=True)
class Equation:
    members: tuple[bytes, ...]
    rhs: int


@dataclass
class ConstraintSystem:
    n: int
    variables: list[bytes]
    equations: list[Equation]
    resolved: dict[bytes, int] = field(default_factory=dict)


def build_constraints(
    short_ids: Iterable[bytes], table: Iblt, enc: BucketEncoding
) -> ConstraintSystem:
    """Turn accumulator state plus the known transaction set into linear
    equations: one per nonempty (cell, bucket) pair, plus the global sum
    1 + 2 + ... + n."""
    ids = sorted(set(short_ids))
    if len(ids) != enc.n:
        raise ValueError(f"got {len(ids)} ids for an encoding of n={enc.n}")
    id_matrix = np.frombuffer(b"".join(ids), dtype=np.uint8).reshape(len(ids), -1)
    cells = np.sort(table.cell_indices_many(id_matrix), axis=1)
    members: dict[tuple[int, int], list[bytes]] = {}
    for row, sid in enumerate(ids):
        for slot in range(table.k):
            key = (int(cells[row, slot]), bucket_for(sid, slot, enc.b))
            members.setdefault(key, []).append(sid)
    values = bucket_values(table, enc)
    equations = [
        Equation(members=tuple(group), rhs=int(values[cell, bucket]))
        for (cell, bucket), group in sorted(members.items())
    ]
    equations.append(Equation(members=tuple(ids), rhs=enc.n * (enc.n + 1) // 2))
    return ConstraintSystem(n=enc.n, variables=ids, equations=equations)


@dataclass
class PropagationOutcome:
    assignment: dict[bytes, int]
    unresolved: list[bytes]
    residual: list[tuple[set[bytes], int]]

    @property
    def complete(self) -> bool:
        return not self.unresolved


def propagate_solve(cs: ConstraintSystem) -> PropagationOutcome:
    """Recursive unary-constraint elimination.

    Any equation reduced to a single variable fixes that variable; the
    value is substituted into every other equation, which may expose new
    unary equations.  No guessing: the loop stops when no unary equation
    remains.  Contradictions (value outside 1..n, two variables forced
    to the same index, nonzero empty equation) raise.
    """
    n = cs.n
    members = [set(eq.members) for eq in cs.equations]
    rhs = [eq.rhs for eq in cs.equations]
    var_eqs: dict[bytes, list[int]] = {v: [] for v in cs.variables}
    for i, group in enumerate(members):
        for v in group:
            var_eqs[v].append(i)

    assignment: dict[bytes, int] = {}
    value_owner: dict[int, bytes] = {}
    pending: deque[tuple[bytes, int]] = deque()

    def schedule(var: bytes, val: int) -> None:
        if not 1 <= val <= n:
            raise InconsistentSystemError(f"index {val} outside 1..{n}")
        if var in assignment:
            if assignment[var] != val:
                raise InconsistentSystemError(
                    f"variable forced to both {assignment[var]} and {val}"
                )
            return
        owner = value_owner.get(val)
        if owner is not None and owner != var:
            raise InconsistentSystemError(f"two variables forced to index {val}")
        assignment[var] = val
        value_owner[val] = var
        pending.append((var, val))

    for var, val in cs.resolved.items():
        if var not in var_eqs:
            raise InconsistentSystemError("resolved variable not in system")
        schedule(var, val)
    for i, group in enumerate(members):
        if len(group) == 1:
            schedule(next(iter(group)), rhs[i])

    while pending:
        var, val = pending.popleft()
        for i in var_eqs[var]:
            if var not in members[i]:
                continue
            members[i].discard(var)
            rhs[i] -= val
            if not members[i]:
                if rhs[i] != 0:
                    raise InconsistentSystemError("equation emptied with nonzero sum")
            elif len(members[i]) == 1:
                schedule(next(iter(members[i])), rhs[i])

    unresolved = sorted(v for v in cs.variables if v not in assignment)
    residual = [
        (group, rhs[i]) for i, group in enumerate(members) if len(group) >= 2
    ]
    return PropagationOutcome(
        assignment=assignment, unresolved=unresolved, residual=residual
    )


_SOLVE_PRIME = 2**31 - 1


def _gf_eliminate(
    residual: list[tuple[set[bytes], int]], unresolved: list[bytes]
) -> tuple[int, list[bytes], dict[bytes, int] | None]:
    """Row-reduce the residual system over GF(p), p = 2**31 - 1.

    Returns (rank, free_variables, solution).  Columns are scanned in
    lexicographic variable order, so the free variables (non-pivot
    columns) are deterministic; disclosing exactly those completes the
    equations to a nonsingular square system.  A solution is returned
    only when no column is free: it is then the unique candidate mod p,
    and true positions live in 1..n, far below p, so a consistent
    integer system yields them exactly.  The caller still re-verifies
    over the integers, which keeps the one-in-p coincidence of a rank
    overcount from ever producing a wrong order.
    """
    p = _SOLVE_PRIME
    u = len(unresolved)
    if not residual or not u:
        return 0, list(unresolved), None
    col = {v: j for j, v in enumerate(unresolved)}
    a = np.zeros((len(residual), u + 1), dtype=np.int64)
    for i, (group, rhs) in enumerate(residual):
        for v in group:
            a[i, col[v]] = 1
        a[i, u] = rhs % p
    rank = 0
    pivot_cols: list[int] = []
    for c in range(u):
        nonzero = np.flatnonzero(a[rank:, c])
        if not len(nonzero):
            continue
        piv = rank + int(nonzero[0])
        if piv != rank:
            a[[rank, piv]] = a[[piv, rank]]
        inv = pow(int(a[rank, c]), p - 2, p)
        a[rank, c:] = (a[rank, c:] * inv) % p
        below = np.flatnonzero(a[rank + 1 :, c]) + rank + 1
        if len(below):
            a[below, c:] = (a[below, c:] - np.outer(a[below, c], a[rank, c:])) % p
        pivot_cols.append(c)
        rank += 1
        if rank == len(residual):
            break
    is_pivot = np.zeros(u, dtype=bool)
    is_pivot[pivot_cols] = True
    free = [unresolved[j] for j in range(u) if not is_pivot[j]]
    if free:
        return rank, free, None
    x = np.zeros(u, dtype=np.int64)
    for i in range(rank - 1, -1, -1):
        c = pivot_cols[i]
        acc = int(((a[i, c + 1 : u] * x[c + 1 : u]) % p).sum() % p)
        x[c] = (int(a[i, u]) - acc) % p
    return rank, [], {unresolved[j]: int(x[j]) for j in range(u)}


def _independent_equations(outcome: PropagationOutcome) -> int:
    """Rank of the residual system.

    The raw equation count overstates the information content: the b
    buckets of any one cell partition all n transactions, so per-cell
    bucket totals each reproduce the global sum, costing k - 1 + 1
    dependencies in a typical k-cell system.  Rank is what determines
    how many disclosures make the system genuinely square.
    """
    rank, _, _ = _gf_eliminate(outcome.residual, outcome.unresolved)
    return rank


def _verified_assignment(
    partial: Mapping[bytes, int],
    solution: Mapping[bytes, int] | None,
    cs: ConstraintSystem,
) -> dict[bytes, int] | None:
    """Merge propagation and solve results, then verify over the integers:
    full coverage, distinct positions in 1..n, every equation satisfied."""
    if solution is None:
        return None
    full = dict(partial)
    full.update(solution)
    if len(full) != cs.n or set(full) != set(cs.variables):
        return None
    if sorted(full.values()) != list(range(1, cs.n + 1)):
        return None
    for eq in cs.equations:
        if sum(full[v] for v in eq.members) != eq.rhs:
            return None
    return full


@dataclass
class FallbackResult:
    unencoded_count: int
    recovered: bool
    assignment: dict[bytes, int] | None


def square_system_fallback(
    cs: ConstraintSystem, true_indices: Mapping[bytes, int]
) -> FallbackResult:
    """Disclose raw indices until the system is square, then solve.

    After propagation stalls with u unknowns and e independent remaining
    equations, max(0, u - e) unencoded indices are taken from the oracle
    for exactly the free variables of the residual's row reduction, so
    the completed system is genuinely nonsingular.  Propagation reruns
    with the disclosures and whatever still remains is solved exactly.
    Recovery is only claimed when the verified assignment matches the
    oracle; a singular system counts as failure.
    """
    first = propagate_solve(cs)
    if not first.unresolved:
        assignment = _verified_assignment(first.assignment, {}, cs)
        recovered = assignment is not None and all(
            assignment[v] == true_indices[v] for v in cs.variables
        )
        return FallbackResult(0, recovered, assignment if recovered else None)
    rank, free, solution = _gf_eliminate(first.residual, first.unresolved)
    disclosed = max(0, len(first.unresolved) - rank)
    outcome = first
    if disclosed:
        seeded = dict(cs.resolved)
        for var in free:
            seeded[var] = true_indices[var]
        outcome = propagate_solve(
            ConstraintSystem(cs.n, cs.variables, cs.equations, seeded)
        )
        if outcome.unresolved:
            _, free2, solution = _gf_eliminate(outcome.residual, outcome.unresolved)
            if free2:
                solution = None
        else:
            solution = {}
    assignment = _verified_assignment(outcome.assignment, solution, cs)
    recovered = assignment is not None and all(
        assignment[v] == true_indices[v] for v in cs.variables
    )
    return FallbackResult(
        unencoded_count=disclosed,
        recovered=recovered,
        assignment=assignment if recovered else None,
    )


# -- simulation driver ------------------------------------------------------


@dataclass
class OrderingTrial:
    trial: int
    mode: str
    n: int
    ratio: float
    complete: bool
    unencoded: int
    recovered: bool
    payload_bytes: int
    equations: int


def _distinct_short_ids(rng: np.random.Generator, n: int, width: int = 5) -> np.ndarray:
    rows = rng.integers(0, 256, size=(n, width), dtype=np.uint8)
    while len(np.unique(rows, axis=0)) != n:
        rows = rng.integers(0, 256, size=(n, width), dtype=np.uint8)
    return rows


def run_ordering_trials(
    n: int,
    ratio: float,
    trials: int,
    mode: str = "csp",
    seed: int = 0,
    k: int = 4,
) -> list[OrderingTrial]:
    """Monte Carlo order-recovery experiment.

    Each trial draws n random ShortIds in a random canonical order.  In
    lex mode the payload is round-tripped; in csp mode a k-cell table is
    bucket-encoded at the given buckets-to-transactions ratio (cells
    times per-cell buckets, relative to n), then solved by propagation
    with the square-system fallback.

    k = 4 is the default because the recovery statistics depend on how
    many bucket partitions each transaction joins: with 4 partitions the
    chance that two transactions land in identical buckets everywhere
    (making their indices algebraically inseparable) stays negligible
    down to n = 50, while the equation supply still thins out fast
    enough below ratio 1.0 to reproduce the published fallback costs.
    """
    if mode not in ("csp", "lex"):
        raise ValueError(f"unknown mode {mode!r}")
    rows: list[OrderingTrial] = []
    for trial in range(trials):
        rng = np.random.Generator(
            np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, trial])
        )
        ids_matrix = _distinct_short_ids(rng, n)
        ids = [row.tobytes() for row in ids_matrix]
        if mode == "lex":
            payload = lex_order_encode(ids)
            if lex_order_decode(ids, payload) != ids:
                raise AssertionError("lexicographic round trip failed")
            rows.append(
                OrderingTrial(trial, mode, n, ratio, True, 0, True, len(payload), 0)
            )
            continue
        enc = BucketEncoding.for_geometry(n, cells=k, ratio=ratio)
        table = Iblt(k, k=k, key_width=5, value_width=enc.v, seed=trial)
        truth = {sid: i + 1 for i, sid in enumerate(ids)}
        encoder = BucketIndexEncoder(table, enc)
        encoder.add_many(ids_matrix, np.arange(1, n + 1))
        cs = build_constraints(ids, table, enc)
        outcome = propagate_solve(cs)
        if outcome.complete:
            if any(outcome.assignment[sid] != truth[sid] for sid in ids):
                raise AssertionError("propagation produced a wrong index")
            result = FallbackResult(0, True, outcome.assignment)
        else:
            result = square_system_fallback(cs, truth)
        payload_bytes = k * enc.v + 2 + 4 * result.unencoded_count
        rows.append(
            OrderingTrial(
                trial=trial,
                mode=mode,
                n=n,
                ratio=ratio,
                complete=outcome.complete,
                unencoded=result.unencoded_count,
                recovered=result.recovered,
                payload_bytes=payload_bytes,
                equations=len(cs.equations),
            )
        )
    return rows
