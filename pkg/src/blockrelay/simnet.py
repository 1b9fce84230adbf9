"""Synthetic relay scenarios and baseline comparisons.

This module builds randomized block/mempool pairs with a controlled
overlap fraction, drives :func:`blockrelay.graphene.protocol_run` over
them, and reports transfer sizes next to two analytic baselines:

* compact relay: a fixed header plus one six-byte short id per block
  transaction, assuming the receiver already holds every payload;
* xthin relay: the receiver first ships a Bloom filter of its whole
  mempool (sized for ``m`` entries at a 0.1% false positive rate), then
  the sender returns the six-byte ids plus full payloads for whatever
  the filter missed.

All randomness flows through counter-based Philox streams keyed on the
scenario seed, so every sweep is reproducible bit for bit and each
trial draws from its own stream regardless of execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .filters import bloom_bits_for
from .graphene import (
    MSG_GETDATA,
    TX_HASH_LEN,
    Block,
    GrapheneParams,
    DEFAULT_PARAMS,
    Mempool,
    ProtocolResult,
    protocol_run,
    serialize_block,
)
from .hashing import mix64

__all__ = [
    "COMPACT_HEADER_BYTES",
    "SHORT_TX_ID_BYTES",
    "XTHIN_BLOOM_FPR",
    "ScenarioConfig",
    "gen_scenario",
    "baseline_compact_bytes",
    "baseline_xthin_bytes",
    "BlockSimRow",
    "run_block_sim",
    "SweepRow",
    "SweepReport",
    "run_sweep",
]

# Compact-style relay announces the block header (80 bytes) plus a
# four-byte transaction count before the short id list.
COMPACT_HEADER_BYTES = 84

# Both baselines identify transactions with truncated six-byte ids.
SHORT_TX_ID_BYTES = 6

# The xthin receiver sizes its mempool Bloom filter for this rate.
XTHIN_BLOOM_FPR = 1e-3

# Wire framing charged per payload the xthin sender returns: the full
# transaction hash plus a four-byte length prefix.
XTHIN_PER_TX_OVERHEAD = TX_HASH_LEN + 4

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class ScenarioConfig:
    """One synthetic relay setup.

    ``overlap`` is the fraction of block transactions already present
    in the receiver's mempool; the mempool is padded with filler
    transactions up to ``mempool_size``.  ``tx_payload_bytes`` is the
    mean serialized payload size; ``payload_distribution`` selects how
    individual sizes scatter around it ("fixed" or "exponential").
    """

    n_block: int
    mempool_size: int
    overlap: float
    tx_payload_bytes: float = 300.0
    payload_distribution: str = "fixed"
    trials: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_block < 1:
            raise ValueError("n_block must be positive")
        if self.mempool_size < self.n_block:
            raise ValueError("mempool_size must be at least n_block")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.tx_payload_bytes < 1:
            raise ValueError("tx_payload_bytes must be at least 1")
        if self.payload_distribution not in ("fixed", "exponential"):
            raise ValueError(
                f"unknown payload_distribution {self.payload_distribution!r}"
            )
        if self.trials < 1:
            raise ValueError("trials must be positive")


def _stream(seed: int, token: int) -> np.random.Generator:
    """Philox stream for one trial; distinct tokens never collide."""
    key = np.array(
        [seed & _MASK64, mix64((token * _GOLDEN + 1) & _MASK64)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def _trial_token(point: int, trial: int) -> int:
    return point * 1_000_003 + trial


def _unique_hashes(rng: np.random.Generator, count: int) -> list[bytes]:
    """Draw ``count`` hashes whose five-byte ShortIds are all distinct.

    Real transaction ids are unique with overwhelming probability; the
    generator enforces it outright so scenario statistics never mix in
    the protocol's separate collision-abort path.
    """
    sid_void = np.dtype((np.void, 5))

    def as_sids(rows: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(rows).view(sid_void).ravel()

    out: list[bytes] = []
    seen: np.ndarray | None = None
    while len(out) < count:
        need = count - len(out)
        raw = rng.integers(
            0, 256, size=(need + need // 8 + 16, TX_HASH_LEN), dtype=np.uint8
        )
        _, first = np.unique(as_sids(raw[:, :5]), return_index=True)
        keep = raw[np.sort(first)]
        if seen is not None:
            merged = np.concatenate([seen, as_sids(keep[:, :5])])
            _, first = np.unique(merged, return_index=True)
            fresh = np.sort(first[first >= len(seen)]) - len(seen)
            keep = keep[fresh]
        keep = keep[:need]
        out.extend(row.tobytes() for row in keep)
        sids = as_sids(keep[:, :5])
        seen = sids if seen is None else np.concatenate([seen, sids])
    return out


def _payload_sizes(
    rng: np.random.Generator, cfg: ScenarioConfig, count: int
) -> np.ndarray:
    if cfg.payload_distribution == "fixed":
        return np.full(count, int(round(cfg.tx_payload_bytes)), dtype=np.int64)
    sizes = np.rint(rng.exponential(cfg.tx_payload_bytes, size=count)).astype(np.int64)
    return np.maximum(sizes, 1)


def _payloads(rng: np.random.Generator, sizes: np.ndarray) -> list[bytes]:
    total = int(sizes.sum())
    blob = rng.integers(0, 256, size=total, dtype=np.uint8).tobytes()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [blob[offsets[i] : offsets[i + 1]] for i in range(len(sizes))]


def gen_scenario(cfg: ScenarioConfig, counter: int = 0) -> tuple[Block, Mempool]:
    """Build one (block, mempool) pair for ``cfg``.

    Exactly ``round(overlap * n_block)`` block transactions land in the
    mempool (rounding to nearest, half away from zero); filler
    transactions pad it to ``mempool_size``.  Filler payloads are left
    empty: no reported metric ever serializes them, and at mempool
    scale their content would dominate generation cost for nothing.
    ``counter`` selects an independent Philox stream so sweeps can
    split per trial without reseeding.
    """
    rng = _stream(cfg.seed, counter)
    shared = int(cfg.overlap * cfg.n_block + 0.5)
    filler = cfg.mempool_size - shared
    hashes = _unique_hashes(rng, cfg.n_block + filler)
    block_hashes = hashes[: cfg.n_block]
    sizes = _payload_sizes(rng, cfg, cfg.n_block)
    block_payloads = _payloads(rng, sizes)

    entries: dict[bytes, bytes] = {}
    shared_idx = rng.choice(cfg.n_block, size=shared, replace=False)
    for i in shared_idx:
        entries[block_hashes[i]] = block_payloads[i]
    for h in hashes[cfg.n_block :]:
        entries[h] = b""

    block = Block(tx_hashes=tuple(block_hashes), tx_payloads=tuple(block_payloads))
    return block, Mempool(entries=entries)


def baseline_compact_bytes(n: int) -> int:
    """Compact relay cost: fixed header plus six bytes per transaction."""
    return COMPACT_HEADER_BYTES + SHORT_TX_ID_BYTES * n


def baseline_xthin_bytes(
    n: int, m: int, missing: int, payload_bytes: float = 300.0
) -> float:
    """Xthin relay cost for a block of ``n`` against a mempool of ``m``.

    Charges the receiver's mempool Bloom filter (``m`` entries at
    ``XTHIN_BLOOM_FPR``), the compact-style header and short id list,
    and one full payload of ``payload_bytes`` (plus hash and length
    framing) per transaction the filter missed.  Always at least the
    compact baseline, since the extra terms are nonnegative.
    """
    if missing < 0:
        raise ValueError("missing must be nonnegative")
    bloom = math.ceil(bloom_bits_for(max(m, 1), XTHIN_BLOOM_FPR) / 8)
    fetch = missing * (payload_bytes + XTHIN_PER_TX_OVERHEAD)
    return bloom + baseline_compact_bytes(n) + fetch


def _missing_count(result: ProtocolResult) -> int:
    """Transactions fetched in full, recovered from the transcript."""
    total = 0
    for entry in result.transcript:
        if entry.msg_type == MSG_GETDATA:
            total += (entry.nbytes - 5) // 5
    return total


@dataclass(frozen=True)
class BlockSimRow:
    """Per-block outcome from :func:`run_block_sim`."""

    block: int
    graphene_bytes: int
    total_bytes: int
    full_block_bytes: int
    missing_tx_count: int
    retries: int
    success: bool


def run_block_sim(
    cfg: ScenarioConfig,
    blocks: int,
    params: GrapheneParams = DEFAULT_PARAMS,
    transcripts: list[list] | None = None,
) -> list[BlockSimRow]:
    """Relay ``blocks`` independent scenarios drawn from ``cfg``.

    ``graphene_bytes`` counts the announcement and request traffic
    (graphene messages plus getdata); ``total_bytes`` adds the fetched
    payloads, handshake, and everything else on the wire.  Pass a list
    as ``transcripts`` to additionally collect each block's full wire
    transcript (one list of entries per block, in block order).
    """
    if blocks < 1:
        raise ValueError("blocks must be positive")
    rows = []
    for b in range(blocks):
        token = _trial_token(0, b)
        block, mempool = gen_scenario(cfg, counter=token)
        result = protocol_run(
            block, mempool, seed=mix64((cfg.seed + token * _GOLDEN) & _MASK64), params=params
        )
        if transcripts is not None:
            transcripts.append(result.transcript)
        rows.append(
            BlockSimRow(
                block=b,
                graphene_bytes=result.graphene_bytes + result.getdata_bytes,
                total_bytes=result.total_bytes,
                full_block_bytes=len(serialize_block(block)),
                missing_tx_count=_missing_count(result),
                retries=result.retries,
                success=result.success,
            )
        )
    return rows


@dataclass(frozen=True)
class SweepRow:
    """Mean metrics for one overlap grid point."""

    overlap: float
    graphene_bytes: float
    compact_bytes: float
    xthin_bytes: float
    missing_tx_count: float
    retries: float
    success_rate: float


@dataclass
class SweepReport:
    """Grid results plus the observed graphene/compact crossover.

    ``crossover_overlap`` is the largest grid overlap at which mean
    graphene traffic still exceeds the compact baseline, or ``None``
    when graphene wins everywhere.  ``metadata`` pins every constant
    the baselines used, so serialized reports are self-describing.
    """

    rows: list[SweepRow]
    crossover_overlap: float | None
    metadata: dict = field(default_factory=dict)


def run_sweep(
    cfg: ScenarioConfig,
    overlaps: Sequence[float],
    params: GrapheneParams = DEFAULT_PARAMS,
) -> SweepReport:
    """Average ``cfg.trials`` relays at each overlap in ``overlaps``.

    Byte and retry columns average the successful trials (a failed
    relay never produced a comparable transfer); failures only lower
    ``success_rate``.  ``graphene_bytes`` counts graphene messages plus
    getdata requests, mirroring the compact baseline's assumption that
    payload delivery is a cost any protocol shares.
    """
    if not overlaps:
        raise ValueError("overlaps must be nonempty")
    rows = []
    for pi, p in enumerate(overlaps):
        point = replace(cfg, overlap=float(p))
        graphene: list[int] = []
        missing: list[int] = []
        retries: list[int] = []
        successes = 0
        for t in range(cfg.trials):
            token = _trial_token(pi + 1, t)
            block, mempool = gen_scenario(point, counter=token)
            result = protocol_run(
                block,
                mempool,
                seed=mix64((cfg.seed + token * _GOLDEN) & _MASK64),
                params=params,
            )
            if result.success:
                successes += 1
                graphene.append(result.graphene_bytes + result.getdata_bytes)
                missing.append(_missing_count(result))
                retries.append(result.retries)
        ok = max(successes, 1)
        mean_missing = sum(missing) / ok
        rows.append(
            SweepRow(
                overlap=float(p),
                graphene_bytes=sum(graphene) / ok,
                compact_bytes=float(baseline_compact_bytes(point.n_block)),
                xthin_bytes=baseline_xthin_bytes(
                    point.n_block,
                    point.mempool_size,
                    int(round(mean_missing)),
                    point.tx_payload_bytes,
                ),
                missing_tx_count=mean_missing,
                retries=sum(retries) / ok,
                success_rate=successes / cfg.trials,
            )
        )
    exceeded = [r.overlap for r in rows if r.graphene_bytes > r.compact_bytes]
    return SweepReport(
        rows=rows,
        crossover_overlap=max(exceeded) if exceeded else None,
        metadata={
            "n_block": cfg.n_block,
            "mempool_size": cfg.mempool_size,
            "tx_payload_bytes": cfg.tx_payload_bytes,
            "payload_distribution": cfg.payload_distribution,
            "trials": cfg.trials,
            "seed": cfg.seed,
            "compact_header_bytes": COMPACT_HEADER_BYTES,
            "short_tx_id_bytes": SHORT_TX_ID_BYTES,
            "xthin_bloom_fpr": XTHIN_BLOOM_FPR,
            "xthin_per_tx_overhead": XTHIN_PER_TX_OVERHEAD,
        },
    )
