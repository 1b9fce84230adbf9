"""Graphene block propagation.

A sender announces a block; the receiver asks for it with its mempool
size; the sender answers with a Bloom filter and an IBLT over 5-byte
ShortIds.  The receiver filters its mempool through the Bloom filter,
builds its own IBLT from the survivors, subtracts, and peels the
difference: false positives fall out on one side, transactions the
receiver lacks on the other.  Anything missing is fetched explicitly,
and an ordering payload restores canonical transaction order.  When the
difference does not decode, the receiver retries with a doubled claimed
mempool, which buys a denser filter and a larger difference budget.

The module also carries the analytic cost model T(a) used to size the
filter/IBLT split, and a deterministic in-memory protocol harness with
per-message byte accounting.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .filters import BloomFilter
from .hashing import derive, hash_bytes, mix64, GOLDEN
from .iblt import Iblt, iblt_sizing
from .ordering import (
    BucketEncoding,
    BucketIndexEncoder,
    InconsistentSystemError,
    _gf_eliminate,
    _verified_assignment,
    build_constraints,
    lex_order_decode,
    lex_order_encode,
    propagate_solve,
)

SHORT_ID_LEN = 5
TX_HASH_LEN = 32

MSG_INV = 1
MSG_GETGRAPHENE = 2
MSG_GRAPHENE = 3
MSG_GETDATA = 4
MSG_TXS = 5

ORDERING_LEX = 0
ORDERING_CSP = 1


class MalformedMessageError(ValueError):
    """A wire message whose fields disagree with its own contents."""


class ShortIdCollisionError(ValueError):
    """Two distinct transactions truncate to the same ShortId; the
    5-byte space makes this ~n^2/2^41 per block, and correctness wins
    over availability when it happens."""


def short_id(tx_hash: bytes) -> bytes:
    """First five bytes of the 32-byte transaction hash."""
    if len(tx_hash) != TX_HASH_LEN:
        raise ValueError(f"tx hash must be {TX_HASH_LEN} bytes")
    return tx_hash[:SHORT_ID_LEN]


# -- domain types -----------------------------------------------------------


@dataclass
class Block:
    tx_hashes: list[bytes]
    tx_payloads: list[bytes]
    aux_header: bytes = b""

    def __post_init__(self) -> None:
        # Normalize so equality compares content, not the container type
        # the caller happened to build with.
        self.tx_hashes = list(self.tx_hashes)
        self.tx_payloads = list(self.tx_payloads)
        if len(self.tx_hashes) != len(self.tx_payloads):
            raise ValueError("hash/payload count mismatch")
        for h in self.tx_hashes:
            if len(h) != TX_HASH_LEN:
                raise ValueError(f"tx hash must be {TX_HASH_LEN} bytes")

    def __len__(self) -> int:
        return len(self.tx_hashes)

    def short_ids(self) -> list[bytes]:
        """ShortIds in canonical block order."""
        return [short_id(h) for h in self.tx_hashes]


@dataclass
class Mempool:
    """Transactions known locally: hash -> payload.

    Mutate through :meth:`add` (it keeps the ShortId index fresh);
    writing to ``entries`` directly leaves a stale index behind.
    """

    entries: dict[bytes, bytes] = field(default_factory=dict)
    _by_sid: dict[bytes, list[bytes]] | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        for h in self.entries:
            if len(h) != TX_HASH_LEN:
                raise ValueError(f"tx hash must be {TX_HASH_LEN} bytes")

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, tx_hash: bytes, payload: bytes) -> None:
        if len(tx_hash) != TX_HASH_LEN:
            raise ValueError(f"tx hash must be {TX_HASH_LEN} bytes")
        self.entries[tx_hash] = payload
        self._by_sid = None

    def by_short_id(self) -> dict[bytes, list[bytes]]:
        """ShortId -> all mempool hashes truncating to it (cached)."""
        if self._by_sid is None:
            out: dict[bytes, list[bytes]] = {}
            for h in self.entries:
                out.setdefault(short_id(h), []).append(h)
            self._by_sid = out
        return self._by_sid


@dataclass(frozen=True)
class InvMsg:
    block_digest: int


@dataclass(frozen=True)
class GetGrapheneMsg:
    mempool_size: int


@dataclass(frozen=True)
class GrapheneMsg:
    bloom: bytes
    iblt: bytes
    n_block_txs: int
    iblt_cell_count: int
    ordering_payload: bytes
    aux_header: bytes


@dataclass(frozen=True)
class GetDataMsg:
    short_ids: tuple[bytes, ...]


@dataclass(frozen=True)
class TxsMsg:
    txs: tuple[tuple[bytes, bytes], ...]  # (hash, payload) pairs


# -- wire codecs ------------------------------------------------------------

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _lp(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


class _Reader:
    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise MalformedMessageError("truncated message")
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedMessageError("trailing bytes after message")


def encode_message(msg: object) -> bytes:
    if isinstance(msg, InvMsg):
        return bytes([MSG_INV]) + _U64.pack(msg.block_digest)
    if isinstance(msg, GetGrapheneMsg):
        return bytes([MSG_GETGRAPHENE]) + _U32.pack(msg.mempool_size)
    if isinstance(msg, GrapheneMsg):
        return (
            bytes([MSG_GRAPHENE])
            + _lp(msg.bloom)
            + _lp(msg.iblt)
            + _U32.pack(msg.n_block_txs)
            + _U32.pack(msg.iblt_cell_count)
            + _lp(msg.ordering_payload)
            + _lp(msg.aux_header)
        )
    if isinstance(msg, GetDataMsg):
        body = b"".join(msg.short_ids)
        return bytes([MSG_GETDATA]) + _U32.pack(len(msg.short_ids)) + body
    if isinstance(msg, TxsMsg):
        parts = [bytes([MSG_TXS]), _U32.pack(len(msg.txs))]
        for tx_hash, payload in msg.txs:
            parts.append(tx_hash)
            parts.append(_lp(payload))
        return b"".join(parts)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def decode_message(data: bytes):
    if not data:
        raise MalformedMessageError("empty message")
    tag = data[0]
    r = _Reader(data, 1)
    if tag == MSG_INV:
        msg = InvMsg(block_digest=r.u64())
    elif tag == MSG_GETGRAPHENE:
        msg = GetGrapheneMsg(mempool_size=r.u32())
    elif tag == MSG_GRAPHENE:
        msg = GrapheneMsg(
            bloom=r.lp(),
            iblt=r.lp(),
            n_block_txs=r.u32(),
            iblt_cell_count=r.u32(),
            ordering_payload=r.lp(),
            aux_header=r.lp(),
        )
    elif tag == MSG_GETDATA:
        count = r.u32()
        msg = GetDataMsg(
            short_ids=tuple(r.take(SHORT_ID_LEN) for _ in range(count))
        )
    elif tag == MSG_TXS:
        count = r.u32()
        msg = TxsMsg(
            txs=tuple((r.take(TX_HASH_LEN), r.lp()) for _ in range(count))
        )
    else:
        raise MalformedMessageError(f"unknown message tag {tag}")
    r.done()
    return msg


def serialize_block(block: Block) -> bytes:
    """The full-block wire encoding Graphene is compared against."""
    parts = [_U32.pack(len(block)), _lp(block.aux_header)]
    for tx_hash, payload in zip(block.tx_hashes, block.tx_payloads):
        parts.append(tx_hash)
        parts.append(_lp(payload))
    return b"".join(parts)


def block_digest(block: Block) -> int:
    return hash_bytes(serialize_block(block), seed=0)


# -- cost model -------------------------------------------------------------

_LN2_SQ = math.log(2) ** 2


@dataclass(frozen=True)
class CostParams:
    m: int
    n: int
    a: int
    tau: float
    d_mult: float

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.m <= self.n:
            raise ValueError("m must exceed n")
        if not 1 <= self.a <= self.m - self.n:
            raise ValueError(f"a must lie in [1, {self.m - self.n}]")


def cost_T(p: CostParams) -> float:
    """Analytic Graphene bytes: Bloom term plus IBLT term.

    T(a) = n * (-ln(a / (m - n))) / (8 * ln^2 2) + a * d_mult * tau.
    The filter gets cheaper as its allowed false-positive budget a
    grows; the IBLT needed to absorb those false positives gets dearer.
    """
    bloom_bits = -math.log(p.a / (p.m - p.n)) * p.n / _LN2_SQ
    return bloom_bits / 8 + p.a * p.d_mult * p.tau


def choose_a(m: int, n: int, tau: float, d_mult: float) -> int:
    """Integer a in [1, m-n] minimizing cost_T; ties go to the smaller a.

    T is strictly convex in a, so the integer minimum sits next to the
    stationary point a* = n / (8 ln^2 2 * d_mult * tau); comparing the
    floor/ceil neighborhood is exact.
    """
    if m <= n:
        raise ValueError("m must exceed n")
    hi = m - n
    star = n / (8 * _LN2_SQ * d_mult * tau)
    candidates = set()
    for c in (math.floor(star) - 1, math.floor(star), math.ceil(star), math.ceil(star) + 1):
        candidates.add(min(hi, max(1, c)))
    return min(
        sorted(candidates),
        key=lambda a: cost_T(CostParams(m=m, n=n, a=a, tau=tau, d_mult=d_mult)),
    )


# -- sender / receiver ------------------------------------------------------


@dataclass(frozen=True)
class GrapheneParams:
    """Knobs for the encode/decode pair.

    d_mult feeds the cost model's per-difference cell estimate; the
    wire IBLT is provisioned separately: its expected difference gets
    diff_headroom slack and doubles through sizing_multiplier, because a
    filter tuned to the analytic optimum leaves the IBLT with nearly
    zero margin and every marginal cell costs just tau bytes against a
    multi-kilobyte retry.  retry_growth scales that budget per attempt,
    since a failed decode is evidence the difference estimate was low.
    """

    d_mult: float = 1.5
    iblt_k: int = 4
    sizing_multiplier: float = 2.0
    diff_headroom: int = 20
    retry_growth: int = 4
    max_retries: int = 4
    ordering_mode: str = "lex"
    csp_ratio: float = 1.3


DEFAULT_PARAMS = GrapheneParams()

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


def _attempt_seed(seed: int, attempt: int) -> int:
    return mix64((seed + attempt * GOLDEN) & _SEED_MASK)


def sender_encode(
    block: Block,
    get: GetGrapheneMsg,
    seed: int,
    attempt: int = 0,
    params: GrapheneParams = DEFAULT_PARAMS,
) -> GrapheneMsg:
    """Build the Bloom filter + IBLT answer for one request.

    The Bloom filter is sized to pass a = choose_a expected mempool
    false positives; the IBLT must absorb those false positives plus
    any block transactions the receiver lacks.  attempt > 0 reruns with
    fresh hashing salts and a retry_growth^attempt larger difference
    budget.
    """
    n = len(block)
    if n == 0:
        raise ValueError("cannot encode an empty block")
    sids = block.short_ids()
    if len(set(sids)) != n:
        raise ShortIdCollisionError("two block transactions share a ShortId")
    if params.ordering_mode not in ("lex", "csp"):
        raise ValueError(f"unknown ordering mode {params.ordering_mode!r}")

    m = get.mempool_size
    degenerate = m <= n
    m_eff = max(m, n + 1)

    def budget(a: int) -> int:
        return math.ceil((a + params.diff_headroom) * params.retry_growth**attempt)

    tau = float(Iblt.CELL_FIXED_BYTES + SHORT_ID_LEN)
    a = 1 if degenerate else choose_a(m_eff, n, tau, params.d_mult)
    cells = iblt_sizing(budget(a), params.sizing_multiplier, params.iblt_k)
    value_width = 0
    enc = None
    if params.ordering_mode == "csp":
        if n > 0xFFFF:
            raise ValueError("csp ordering caps n at 65535")
        enc = BucketEncoding.for_geometry(n, cells=cells, ratio=params.csp_ratio)
        value_width = enc.v
        if not degenerate:
            # The value field makes each cell dearer, which pulls the
            # optimal false-positive budget down.  The cell count stays
            # committed to the pass-one geometry (shrinking it would
            # thin the buckets the encoding was sized for).
            a = choose_a(m_eff, n, tau + value_width, params.d_mult)

    salt = _attempt_seed(seed, attempt)
    fpr = min(a / (m_eff - n), 0.99)
    bloom = BloomFilter.for_target_fpr(n, fpr, seed=derive(salt, 4))
    rows = np.frombuffer(b"".join(sids), dtype=np.uint8).reshape(n, SHORT_ID_LEN)
    bloom.insert_many(rows)

    table = Iblt(
        cells,
        k=params.iblt_k,
        key_width=SHORT_ID_LEN,
        value_width=value_width,
        seed=derive(salt, 5),
    )
    if value_width:
        table.insert_many(rows, np.zeros((n, value_width), dtype=np.uint8))
    else:
        table.insert_many(rows)

    if params.ordering_mode == "lex":
        ordering_payload = bytes([ORDERING_LEX]) + lex_order_encode(sids)
    else:
        assert enc is not None
        encoder = BucketIndexEncoder(table, enc)
        encoder.add_many(rows, np.arange(1, n + 1))
        ordering_payload = bytes([ORDERING_CSP]) + _csp_disclosures(sids, table, enc)

    return GrapheneMsg(
        bloom=bloom.to_bytes(),
        iblt=table.serialize(),
        n_block_txs=n,
        iblt_cell_count=cells,
        ordering_payload=ordering_payload,
        aux_header=block.aux_header,
    )


def _csp_disclosures(sids: list[bytes], table: Iblt, enc: BucketEncoding) -> bytes:
    """Solve the sender's own constraint system and spell out the free
    variables as (sorted-position, index) pairs so the receiver's system
    is square and nonsingular."""
    truth = {sid: i + 1 for i, sid in enumerate(sids)}
    cs = build_constraints(sids, table, enc)
    outcome = propagate_solve(cs)
    free: list[bytes] = []
    if outcome.unresolved:
        _, free, _ = _gf_eliminate(outcome.residual, outcome.unresolved)
    ordered = sorted(cs.variables)
    position = {sid: i for i, sid in enumerate(ordered)}
    parts = [struct.pack("<H", len(free))]
    for var in free:
        parts.append(struct.pack("<HH", position[var], truth[var]))
    return b"".join(parts)


@dataclass
class GrapheneDecodeOutcome:
    accepted: set[bytes]
    missing: set[bytes]
    retry_needed: bool
    false_positives: set[bytes]
    candidate_count: int


def receiver_decode(
    msg: GrapheneMsg, mempool: Mempool
) -> GrapheneDecodeOutcome:
    """Reconcile a graphene message against the local mempool.

    Candidates are the mempool ShortIds passing the Bloom filter.  The
    receiver rebuilds the sender's IBLT geometry from the message,
    inserts the candidates, subtracts, and peels: keys only on the
    receiver side are filter false positives, keys only on the sender
    side are block transactions to fetch.  A retry is signaled when the
    difference fails to decode or the account does not add up to the
    declared transaction count.
    """
    try:
        table = Iblt.deserialize(msg.iblt)
    except ValueError as exc:
        raise MalformedMessageError(str(exc)) from exc
    if table.cell_count != msg.iblt_cell_count:
        raise MalformedMessageError(
            f"declared {msg.iblt_cell_count} cells, serialized {table.cell_count}"
        )
    bloom = BloomFilter.from_bytes(msg.bloom)

    by_sid = mempool.by_short_id()
    all_sids = sorted(by_sid)
    candidates: list[bytes] = []
    if all_sids:
        rows = np.frombuffer(b"".join(all_sids), dtype=np.uint8).reshape(
            len(all_sids), SHORT_ID_LEN
        )
        hits = bloom.contains_many(rows)
        candidates = [sid for sid, hit in zip(all_sids, hits) if hit]
    for sid in candidates:
        if len(by_sid[sid]) > 1:
            raise ShortIdCollisionError(
                f"mempool holds {len(by_sid[sid])} transactions for one ShortId"
            )

    local = Iblt(
        table.cell_count,
        k=table.k,
        key_width=table.key_width,
        value_width=table.value_width,
        seed=table.seed,
    )
    if candidates:
        cand_rows = np.frombuffer(b"".join(candidates), dtype=np.uint8).reshape(
            len(candidates), SHORT_ID_LEN
        )
        if table.value_width:
            local.insert_many(
                cand_rows,
                np.zeros((len(candidates), table.value_width), dtype=np.uint8),
            )
        else:
            local.insert_many(cand_rows)
    diff = local.subtract(table)
    diff.zero_values()  # ordering accumulators are not per-key data
    result = diff.decode()

    false_positives = result.keys_only_in_a()
    missing = result.keys_only_in_b()
    accepted = set(candidates) - false_positives
    retry_needed = not result.complete or (
        len(accepted) + len(missing) != msg.n_block_txs
    )
    return GrapheneDecodeOutcome(
        accepted=accepted,
        missing=missing,
        retry_needed=retry_needed,
        false_positives=false_positives,
        candidate_count=len(candidates),
    )


def retry_exchange(prev: GetGrapheneMsg) -> GetGrapheneMsg:
    """The retry rule: claim double the mempool, buying a denser filter."""
    return GetGrapheneMsg(mempool_size=prev.mempool_size * 2)


# -- order reassembly -------------------------------------------------------


def _order_from_payload(
    payload: bytes, sids: set[bytes], msg: GrapheneMsg
) -> list[bytes] | None:
    """Canonical ShortId order from the ordering payload, or None when
    the payload cannot be solved/verified against this transaction set."""
    if not payload:
        return None
    mode, rest = payload[0], payload[1:]
    if mode == ORDERING_LEX:
        try:
            return lex_order_decode(sids, rest)
        except ValueError:
            return None
    if mode != ORDERING_CSP:
        return None
    n = len(sids)
    if len(rest) < 2:
        return None
    (count,) = struct.unpack_from("<H", rest, 0)
    if len(rest) != 2 + 4 * count:
        return None
    table = Iblt.deserialize(msg.iblt)
    if table.value_width == 0:
        return None
    try:
        enc = BucketEncoding.from_value_width(n, table.value_width)
    except ValueError:
        return None
    ordered = sorted(sids)
    resolved: dict[bytes, int] = {}
    for i in range(count):
        pos, idx = struct.unpack_from("<HH", rest, 2 + 4 * i)
        if pos >= n:
            return None
        resolved[ordered[pos]] = idx
    cs = build_constraints(ordered, table, enc)
    cs.resolved.update(resolved)
    try:
        outcome = propagate_solve(cs)
    except InconsistentSystemError:
        return None
    solution: dict[bytes, int] | None = {}
    if outcome.unresolved:
        _, free, solution = _gf_eliminate(outcome.residual, outcome.unresolved)
        if free:
            return None
    assignment = _verified_assignment(outcome.assignment, solution, cs)
    if assignment is None:
        return None
    by_index = sorted(assignment, key=assignment.get)
    return by_index


# -- protocol harness -------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str  # "s2r" or "r2s"
    msg_type: int
    nbytes: int


@dataclass
class ProtocolResult:
    success: bool
    block: Block | None
    retries: int
    transcript: list[TranscriptEntry]
    failure: str | None = None

    def _bytes(self, *msg_types: int) -> int:
        return sum(e.nbytes for e in self.transcript if e.msg_type in msg_types)

    @property
    def graphene_bytes(self) -> int:
        return self._bytes(MSG_GRAPHENE)

    @property
    def getdata_bytes(self) -> int:
        return self._bytes(MSG_GETDATA)

    @property
    def txs_bytes(self) -> int:
        return self._bytes(MSG_TXS)

    @property
    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self.transcript)

    @property
    def bytes_to_receiver(self) -> int:
        return sum(e.nbytes for e in self.transcript if e.direction == "s2r")

    @property
    def bytes_to_sender(self) -> int:
        return sum(e.nbytes for e in self.transcript if e.direction == "r2s")


def protocol_run(
    sender_block: Block,
    receiver_mempool: Mempool,
    seed: int = 0,
    params: GrapheneParams = DEFAULT_PARAMS,
    transcript_sink: list[TranscriptEntry] | None = None,
) -> ProtocolResult:
    """Drive one block relay end to end over an in-memory channel.

    inv -> getgraphene -> graphene (with retry doublings) -> getdata for
    the missing transactions -> txs -> reassembly in canonical order.
    Every serialized message lands in the transcript with its byte count
    and direction.  Success requires the reassembled block to equal the
    sender's block exactly; anything else is an explicit failure with
    the accounting kept.
    """
    transcript: list[TranscriptEntry] = (
        transcript_sink if transcript_sink is not None else []
    )

    def send(direction: str, msg: object) -> bytes:
        wire = encode_message(msg)
        transcript.append(TranscriptEntry(direction, wire[0], len(wire)))
        return wire

    def fail(reason: str, retries: int) -> ProtocolResult:
        return ProtocolResult(
            success=False,
            block=None,
            retries=retries,
            transcript=transcript,
            failure=reason,
        )

    send("s2r", InvMsg(block_digest=block_digest(sender_block)))
    get = GetGrapheneMsg(mempool_size=len(receiver_mempool))
    send("r2s", get)

    outcome = None
    msg = None
    retries = 0
    for attempt in range(params.max_retries + 1):
        retries = attempt
        msg = decode_message(
            send(
                "s2r",
                sender_encode(sender_block, get, seed, attempt=attempt, params=params),
            )
        )
        try:
            outcome = receiver_decode(msg, receiver_mempool)
        except ShortIdCollisionError as exc:
            return fail(f"short id ambiguity: {exc}", retries)
        if not outcome.retry_needed:
            break
        if attempt < params.max_retries:
            get = retry_exchange(get)
            send("r2s", get)
    else:
        return fail("difference never decoded within the retry budget", retries)
    assert outcome is not None and msg is not None

    by_sid = receiver_mempool.by_short_id()
    known: dict[bytes, tuple[bytes, bytes]] = {}
    for sid in outcome.accepted:
        tx_hash = by_sid[sid][0]
        known[sid] = (tx_hash, receiver_mempool.entries[tx_hash])

    if outcome.missing:
        wanted = tuple(sorted(outcome.missing))
        send("r2s", GetDataMsg(short_ids=wanted))
        sender_by_sid = {
            short_id(h): (h, p)
            for h, p in zip(sender_block.tx_hashes, sender_block.tx_payloads)
        }
        try:
            served = tuple(sender_by_sid[sid] for sid in wanted)
        except KeyError:
            return fail("receiver requested a ShortId outside the block", retries)
        txs_msg = decode_message(send("s2r", TxsMsg(txs=served)))
        for tx_hash, payload in txs_msg.txs:
            sid = short_id(tx_hash)
            if sid not in outcome.missing:
                return fail("sender shipped an unrequested transaction", retries)
            known[sid] = (tx_hash, payload)

    if len(known) != msg.n_block_txs:
        return fail("reassembled transaction count mismatch", retries)
    order = _order_from_payload(msg.ordering_payload, set(known), msg)
    if order is None:
        return fail("ordering payload did not solve", retries)
    block = Block(
        tx_hashes=[known[sid][0] for sid in order],
        tx_payloads=[known[sid][1] for sid in order],
        aux_header=msg.aux_header,
    )
    if (
        block.tx_hashes != sender_block.tx_hashes
        or block.tx_payloads != sender_block.tx_payloads
        or block.aux_header != sender_block.aux_header
    ):
        return fail("reassembled block does not match the original", retries)
    return ProtocolResult(
        success=True,
        block=block,
        retries=retries,
        transcript=transcript,
    )
