"""Tests for the graphene block relay protocol."""

import dataclasses
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockrelay.graphene import (
    Block,
    CostParams,
    GetDataMsg,
    GetGrapheneMsg,
    GrapheneMsg,
    GrapheneParams,
    InvMsg,
    MalformedMessageError,
    Mempool,
    MSG_GETDATA,
    MSG_GETGRAPHENE,
    MSG_GRAPHENE,
    MSG_INV,
    MSG_TXS,
    ShortIdCollisionError,
    TxsMsg,
    block_digest,
    choose_a,
    cost_T,
    decode_message,
    encode_message,
    protocol_run,
    receiver_decode,
    retry_exchange,
    sender_encode,
    serialize_block,
    short_id,
)
from blockrelay.iblt import Iblt


def make_hashes(rng: np.random.Generator, count: int) -> list[bytes]:
    """Random 32-byte tx hashes with pairwise distinct ShortIds."""
    out: list[bytes] = []
    seen: set[bytes] = set()
    while len(out) < count:
        rows = rng.integers(0, 256, size=(count, 32), dtype=np.uint8)
        for row in rows:
            h = row.tobytes()
            if h[:5] in seen:
                continue
            seen.add(h[:5])
            out.append(h)
            if len(out) == count:
                break
    return out


def make_block(hashes, payloads, aux=b"") -> Block:
    return Block(
        tx_hashes=list(hashes),
        tx_payloads=[payloads[h] for h in hashes],
        aux_header=aux,
    )


@pytest.fixture(scope="module")
def corpus():
    """A shared pool of transactions: 3000 hashes with payloads."""
    rng = np.random.default_rng(0xB10C)
    hashes = make_hashes(rng, 3000)
    payloads = {
        h: rng.integers(0, 256, size=120, dtype=np.uint8).tobytes() for h in hashes
    }
    return hashes, payloads


class TestShortId:
    def test_truncates_to_five_bytes(self):
        h = bytes(range(32))
        assert short_id(h) == bytes([0, 1, 2, 3, 4])

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            short_id(b"short")


class TestDomainTypes:
    def test_block_count_mismatch(self):
        with pytest.raises(ValueError):
            Block(tx_hashes=[bytes(32)], tx_payloads=[])

    def test_block_rejects_bad_hash(self):
        with pytest.raises(ValueError):
            Block(tx_hashes=[b"tiny"], tx_payloads=[b""])

    def test_mempool_groups_by_short_id(self):
        a = bytes([1] * 5 + [0] * 27)
        b = bytes([1] * 5 + [9] * 27)
        c = bytes([2] * 32)
        pool = Mempool(entries={a: b"pa", b: b"pb", c: b"pc"})
        grouped = pool.by_short_id()
        assert sorted(grouped[bytes([1] * 5)]) == sorted([a, b])
        assert grouped[bytes([2] * 5)] == [c]


class TestCostModel:
    def test_reference_point(self):
        p = CostParams(m=60000, n=400, a=20, tau=13, d_mult=1.5)
        assert abs(cost_T(p) - 1223) < 1

    def test_filter_free_at_max_a(self):
        # a = m - n makes the Bloom term vanish: ln(1) = 0.
        p = CostParams(m=500, n=100, a=400, tau=13, d_mult=1.5)
        assert cost_T(p) == pytest.approx(400 * 1.5 * 13)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            CostParams(m=100, n=100, a=1, tau=13, d_mult=1.5)
        with pytest.raises(ValueError):
            CostParams(m=200, n=100, a=0, tau=13, d_mult=1.5)
        with pytest.raises(ValueError):
            CostParams(m=200, n=100, a=101, tau=13, d_mult=1.5)
        with pytest.raises(ValueError):
            CostParams(m=2, n=0, a=1, tau=13, d_mult=1.5)

    @pytest.mark.parametrize(
        "m,n,tau,d_mult",
        [
            (600, 400, 13.0, 1.5),
            (60000, 400, 13.0, 1.5),
            (1000, 50, 33.0, 1.5),
            (5000, 2000, 13.0, 1.0),
            (410, 400, 13.0, 1.5),
        ],
    )
    def test_matches_exhaustive_scan(self, m, n, tau, d_mult):
        best, best_cost = None, math.inf
        for a in range(1, m - n + 1):
            c = cost_T(CostParams(m=m, n=n, a=a, tau=tau, d_mult=d_mult))
            if c < best_cost:
                best, best_cost = a, c
        assert choose_a(m, n, tau, d_mult) == best

    def test_single_slack_slot(self):
        assert choose_a(401, 400, 13.0, 1.5) == 1

    def test_dearer_cells_never_raise_a(self):
        for m, n in [(60000, 400), (5000, 1000), (300, 200)]:
            tau = 13.0
            for _ in range(6):
                assert choose_a(m, n, 2 * tau, 1.5) <= choose_a(m, n, tau, 1.5)
                tau *= 2


class TestWireCodecs:
    @pytest.mark.parametrize(
        "msg",
        [
            InvMsg(block_digest=0xDEADBEEFCAFE),
            GetGrapheneMsg(mempool_size=60000),
            GrapheneMsg(
                bloom=b"\x01\x02",
                iblt=b"\x03" * 40,
                n_block_txs=7,
                iblt_cell_count=12,
                ordering_payload=b"\x00\x1b",
                aux_header=b"hdr",
            ),
            GetDataMsg(short_ids=(b"abcde", b"fghij")),
            TxsMsg(txs=((bytes(range(32)), b"payload"), (bytes(32), b""))),
        ],
    )
    def test_round_trip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    def test_tags(self):
        assert encode_message(InvMsg(block_digest=1))[0] == MSG_INV
        assert encode_message(GetGrapheneMsg(mempool_size=1))[0] == MSG_GETGRAPHENE
        assert encode_message(GetDataMsg(short_ids=()))[0] == MSG_GETDATA
        assert encode_message(TxsMsg(txs=()))[0] == MSG_TXS

    def test_unknown_tag(self):
        with pytest.raises(MalformedMessageError):
            decode_message(b"\x2a\x00")

    def test_empty(self):
        with pytest.raises(MalformedMessageError):
            decode_message(b"")

    def test_truncated(self):
        wire = encode_message(GetDataMsg(short_ids=(b"abcde",)))
        with pytest.raises(MalformedMessageError):
            decode_message(wire[:-1])

    def test_trailing_garbage(self):
        wire = encode_message(InvMsg(block_digest=3))
        with pytest.raises(MalformedMessageError):
            decode_message(wire + b"\x00")

    def test_not_a_message(self):
        with pytest.raises(TypeError):
            encode_message("inv")

    def test_block_serialization_counts_every_field(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:5], payloads, aux=b"AUX")
        wire = serialize_block(block)
        expected = 4 + (4 + 3) + sum(32 + 4 + len(payloads[h]) for h in hashes[:5])
        assert len(wire) == expected
        assert block_digest(block) == block_digest(make_block(hashes[:5], payloads, aux=b"AUX"))
        assert block_digest(block) != block_digest(make_block(hashes[:5], payloads))


class TestSenderEncode:
    def test_declared_cells_match_serialized_table(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:100], payloads)
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=2000), seed=1)
        table = Iblt.deserialize(msg.iblt)
        assert table.cell_count == msg.iblt_cell_count
        assert msg.n_block_txs == 100

    def test_bloom_never_misses_block_txs(self, corpus):
        from blockrelay.filters import BloomFilter

        hashes, payloads = corpus
        for seed in range(5):
            block = make_block(hashes[seed : seed + 80], payloads)
            msg = sender_encode(block, GetGrapheneMsg(mempool_size=1500), seed=seed)
            bloom = BloomFilter.from_bytes(msg.bloom)
            assert all(bloom.contains(sid) for sid in block.short_ids())

    def test_in_block_collision_rejected(self, corpus):
        hashes, payloads = corpus
        twin = hashes[0][:5] + bytes(27)
        block = Block(
            tx_hashes=[hashes[0], twin],
            tx_payloads=[payloads[hashes[0]], b"other"],
        )
        with pytest.raises(ShortIdCollisionError):
            sender_encode(block, GetGrapheneMsg(mempool_size=100), seed=0)

    def test_empty_block_rejected(self):
        with pytest.raises(ValueError):
            sender_encode(Block(tx_hashes=[], tx_payloads=[]), GetGrapheneMsg(10), seed=0)

    def test_unknown_ordering_mode(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:10], payloads)
        params = dataclasses.replace(GrapheneParams(), ordering_mode="sorted")
        with pytest.raises(ValueError):
            sender_encode(block, GetGrapheneMsg(mempool_size=100), seed=0, params=params)

    def test_tiny_claimed_mempool_still_encodes(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:50], payloads)
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=0), seed=3)
        assert msg.n_block_txs == 50

    def test_retry_attempts_grow_the_table(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:100], payloads)
        get = GetGrapheneMsg(mempool_size=2000)
        sizes = [
            Iblt.deserialize(
                sender_encode(block, get, seed=1, attempt=i).iblt
            ).cell_count
            for i in range(3)
        ]
        assert sizes[0] < sizes[1] < sizes[2]


class TestReceiverDecode:
    def test_superset_mempool_accepts_block(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:200], payloads)
        pool = Mempool(entries={h: payloads[h] for h in hashes[:1500]})
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=9)
        out = receiver_decode(msg, pool)
        assert not out.retry_needed
        assert not out.missing
        assert out.accepted == set(block.short_ids())
        assert out.false_positives.isdisjoint(set(block.short_ids()))

    def test_gap_resolves_to_missing_set(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:200], payloads)
        held = hashes[10:1500]  # first ten block txs absent
        pool = Mempool(entries={h: payloads[h] for h in held})
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=9)
        out = receiver_decode(msg, pool)
        assert not out.retry_needed
        assert out.missing == {short_id(h) for h in hashes[:10]}

    def test_cell_count_mismatch_flagged(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:50], payloads)
        pool = Mempool(entries={h: payloads[h] for h in hashes[:500]})
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=2)
        forged = dataclasses.replace(msg, iblt_cell_count=msg.iblt_cell_count + 1)
        with pytest.raises(MalformedMessageError):
            receiver_decode(forged, pool)

    def test_garbled_table_flagged(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:50], payloads)
        pool = Mempool(entries={h: payloads[h] for h in hashes[:500]})
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=2)
        forged = dataclasses.replace(msg, iblt=msg.iblt[: len(msg.iblt) // 2])
        with pytest.raises(MalformedMessageError):
            receiver_decode(forged, pool)

    def test_mempool_short_id_ambiguity_flagged(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:50], payloads)
        twin = hashes[0][:5] + bytes(27)
        entries = {h: payloads[h] for h in hashes[:500]}
        entries[twin] = b"impostor"
        pool = Mempool(entries=entries)
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=2)
        with pytest.raises(ShortIdCollisionError):
            receiver_decode(msg, pool)

    def test_undersized_table_requests_retry(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:400], payloads)
        # Receiver holds almost none of the block: the difference dwarfs
        # the first-attempt table.
        pool = Mempool(entries={h: payloads[h] for h in hashes[400:800]})
        msg = sender_encode(block, GetGrapheneMsg(mempool_size=len(pool)), seed=2)
        out = receiver_decode(msg, pool)
        assert out.retry_needed

    def test_retry_doubles_claimed_mempool(self):
        assert retry_exchange(GetGrapheneMsg(mempool_size=700)) == GetGrapheneMsg(
            mempool_size=1400
        )


def run_overlap(corpus, n, overlap, seed, extra=1000, **kwargs):
    hashes, payloads = corpus
    rng = np.random.default_rng(seed)
    block_hashes = [hashes[i] for i in rng.choice(len(hashes), size=n, replace=False)]
    block = make_block(block_hashes, payloads)
    keep = rng.random(n) < overlap
    entries = {h: payloads[h] for h, k in zip(block_hashes, keep) if k}
    others = [h for h in hashes if h not in entries][:extra]
    entries.update({h: payloads[h] for h in others})
    return block, protocol_run(block, Mempool(entries=entries), seed=seed, **kwargs)


class TestProtocol:
    def test_superset_round_trip(self, corpus):
        block, res = run_overlap(corpus, n=300, overlap=1.0, seed=41)
        assert res.success
        assert res.retries == 0
        assert res.block == block
        assert res.failure is None

    def test_transcript_shape(self, corpus):
        _, res = run_overlap(corpus, n=120, overlap=1.0, seed=7)
        tags = [e.msg_type for e in res.transcript]
        assert tags[:3] == [MSG_INV, MSG_GETGRAPHENE, MSG_GRAPHENE]
        assert {e.direction for e in res.transcript} <= {"s2r", "r2s"}
        assert res.total_bytes == sum(e.nbytes for e in res.transcript)
        assert res.bytes_to_receiver + res.bytes_to_sender == res.total_bytes

    def test_exact_gap_is_fetched(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:150], payloads)
        absent = set(hashes[:5])
        entries = {h: payloads[h] for h in hashes[:1200] if h not in absent}
        res = protocol_run(block, Mempool(entries=entries), seed=13)
        assert res.success
        getdata = [e for e in res.transcript if e.msg_type == MSG_GETDATA]
        assert len(getdata) == 1
        # tag + count + five ShortIds
        assert getdata[0].nbytes == 1 + 4 + 5 * 5
        txs = [e for e in res.transcript if e.msg_type == MSG_TXS]
        assert txs[0].nbytes == 1 + 4 + sum(32 + 4 + len(payloads[h]) for h in absent)

    def test_disjoint_mempool_fetches_everything(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:80], payloads)
        res = protocol_run(block, Mempool(entries={}), seed=5)
        assert res.success
        assert res.block == block
        assert res.txs_bytes >= sum(len(payloads[h]) for h in hashes[:80])

    def test_beats_full_block_at_full_overlap(self, corpus):
        block, res = run_overlap(corpus, n=300, overlap=1.0, seed=17, extra=2000)
        assert res.success
        assert res.graphene_bytes + res.getdata_bytes < len(serialize_block(block))

    def test_partial_overlap_converges_quickly(self, corpus):
        hits = 0
        seeds = range(40)
        for seed in seeds:
            _, res = run_overlap(corpus, n=250, overlap=0.8, seed=1000 + seed)
            if res.success and res.retries <= 3:
                hits += 1
        assert hits >= math.ceil(0.95 * len(seeds))

    def test_csp_ordering_end_to_end(self, corpus):
        params = GrapheneParams(ordering_mode="csp")
        block, res = run_overlap(corpus, n=200, overlap=0.9, seed=77, params=params)
        assert res.success
        assert res.block == block

    def test_forced_ambiguity_fails_explicitly(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:60], payloads)
        twin = hashes[0][:5] + bytes(27)
        entries = {h: payloads[h] for h in hashes[:600]}
        entries[twin] = b"impostor"
        res = protocol_run(block, Mempool(entries=entries), seed=21)
        assert not res.success
        assert res.block is None
        assert "ambiguity" in res.failure

    def test_retry_budget_exhaustion_is_explicit(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:400], payloads)
        pool = Mempool(entries={h: payloads[h] for h in hashes[400:800]})
        params = GrapheneParams(max_retries=0)
        res = protocol_run(block, pool, seed=3, params=params)
        assert not res.success
        assert res.retries == 0
        assert "retry budget" in res.failure

    def test_single_tx_block(self, corpus):
        hashes, payloads = corpus
        block = make_block(hashes[:1], payloads)
        pool = Mempool(entries={h: payloads[h] for h in hashes[:50]})
        res = protocol_run(block, pool, seed=2)
        assert res.success
        assert res.block == block

    @settings(max_examples=20, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=60),
        overlap=st.floats(min_value=0.0, max_value=1.0),
        mode=st.sampled_from(["lex", "csp"]),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_always_reassembles_or_fails_honestly(self, n, overlap, mode, seed):
        rng = np.random.default_rng(seed)
        hashes = make_hashes(rng, n + 200)
        payloads = {
            h: rng.integers(0, 256, size=40, dtype=np.uint8).tobytes() for h in hashes
        }
        block = make_block(hashes[:n], payloads)
        keep = rng.random(n) < overlap
        entries = {h: payloads[h] for h, k in zip(hashes[:n], keep) if k}
        entries.update({h: payloads[h] for h in hashes[n : n + 150]})
        params = GrapheneParams(ordering_mode=mode)
        res = protocol_run(block, Mempool(entries=entries), seed=seed, params=params)
        if res.success:
            assert res.block == block
        else:
            assert res.failure


class TestBloomBudget:
    def test_false_positive_rate_tracks_target(self, corpus):
        """Pooled over 50 blocks at m=60000, the realized Bloom false
        positive count stays within 20 percent of the a the cost model
        paid for."""
        rng = np.random.default_rng(0xF11)
        m, n = 60000, 400
        hashes = make_hashes(rng, m)
        payloads = {h: b"" for h in hashes}
        a = choose_a(m, n, 13.0, 1.5)
        observed = 0
        trials = 50
        for t in range(trials):
            idx = rng.choice(m, size=n, replace=False)
            block = make_block([hashes[i] for i in idx], payloads)
            pool = Mempool(entries={h: payloads[h] for h in hashes})
            msg = sender_encode(block, GetGrapheneMsg(mempool_size=m), seed=t)
            out = receiver_decode(msg, pool)
            assert not out.retry_needed
            observed += len(out.false_positives)
        expected = a * trials
        assert abs(observed - expected) <= 0.2 * expected
