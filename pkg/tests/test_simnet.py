"""Scenario generation, baselines, and the overlap sweep."""

import dataclasses

import numpy as np
import pytest

from blockrelay.graphene import serialize_block, short_id
from blockrelay.simnet import (
    COMPACT_HEADER_BYTES,
    SHORT_TX_ID_BYTES,
    XTHIN_PER_TX_OVERHEAD,
    ScenarioConfig,
    SweepReport,
    baseline_compact_bytes,
    baseline_xthin_bytes,
    gen_scenario,
    run_block_sim,
    run_sweep,
)

SMALL = ScenarioConfig(n_block=400, mempool_size=2000, overlap=0.9, seed=21)


@pytest.fixture(scope="module")
def sweep_report() -> SweepReport:
    cfg = ScenarioConfig(
        n_block=400, mempool_size=60000, overlap=1.0, trials=3, seed=11
    )
    return run_sweep(cfg, [0.85, 0.9, 1.0])


class TestScenarioConfig:
    def test_rejects_overlap_outside_unit_interval(self):
        for bad in (-0.1, 1.0001):
            with pytest.raises(ValueError, match="overlap"):
                ScenarioConfig(n_block=10, mempool_size=100, overlap=bad)

    def test_rejects_mempool_smaller_than_block(self):
        with pytest.raises(ValueError, match="mempool_size"):
            ScenarioConfig(n_block=100, mempool_size=99, overlap=0.5)

    def test_rejects_unknown_distribution(self):
        with pytest.raises(ValueError, match="payload_distribution"):
            ScenarioConfig(
                n_block=10,
                mempool_size=100,
                overlap=0.5,
                payload_distribution="pareto",
            )

    def test_rejects_degenerate_counts(self):
        with pytest.raises(ValueError):
            ScenarioConfig(n_block=0, mempool_size=100, overlap=0.5)
        with pytest.raises(ValueError):
            ScenarioConfig(n_block=10, mempool_size=100, overlap=0.5, trials=0)
        with pytest.raises(ValueError):
            ScenarioConfig(
                n_block=10, mempool_size=100, overlap=0.5, tx_payload_bytes=0
            )


class TestGenScenario:
    def test_shared_count_is_exact(self):
        block, mempool = gen_scenario(SMALL)
        shared = sum(1 for h in block.tx_hashes if h in mempool.entries)
        assert shared == 360
        assert len(mempool) == 2000
        assert len(block) == 400

    def test_rounds_half_away_from_zero(self):
        cfg = ScenarioConfig(n_block=5, mempool_size=50, overlap=0.5, seed=1)
        block, mempool = gen_scenario(cfg)
        shared = sum(1 for h in block.tx_hashes if h in mempool.entries)
        assert shared == 3

    def test_full_overlap_is_superset(self):
        cfg = dataclasses.replace(SMALL, overlap=1.0)
        block, mempool = gen_scenario(cfg)
        assert set(block.tx_hashes) <= set(mempool.entries)

    def test_zero_overlap_is_disjoint(self):
        cfg = dataclasses.replace(SMALL, overlap=0.0)
        block, mempool = gen_scenario(cfg)
        assert not set(block.tx_hashes) & set(mempool.entries)

    def test_short_ids_unique_across_scenario(self):
        block, mempool = gen_scenario(SMALL)
        everything = set(block.tx_hashes) | set(mempool.entries)
        sids = {short_id(h) for h in everything}
        assert len(sids) == len(everything)

    def test_deterministic_and_counter_split(self):
        a_block, a_pool = gen_scenario(SMALL)
        b_block, b_pool = gen_scenario(SMALL)
        assert a_block.tx_hashes == b_block.tx_hashes
        assert a_pool.entries == b_pool.entries
        c_block, _ = gen_scenario(SMALL, counter=1)
        assert c_block.tx_hashes != a_block.tx_hashes

    def test_fixed_payload_sizes(self):
        block, _ = gen_scenario(SMALL)
        assert {len(p) for p in block.tx_payloads} == {300}

    def test_exponential_payload_sizes(self):
        cfg = ScenarioConfig(
            n_block=3000,
            mempool_size=3000,
            overlap=1.0,
            tx_payload_bytes=120.0,
            payload_distribution="exponential",
            seed=5,
        )
        block, _ = gen_scenario(cfg)
        sizes = np.array([len(p) for p in block.tx_payloads])
        assert sizes.min() >= 1
        assert abs(sizes.mean() - 120.0) / 120.0 < 0.2

    def test_single_transaction_universe(self):
        cfg = ScenarioConfig(n_block=1, mempool_size=1, overlap=1.0, seed=2)
        block, mempool = gen_scenario(cfg)
        assert len(block) == 1 and len(mempool) == 1
        assert block.tx_hashes[0] in mempool.entries


class TestBaselines:
    def test_compact_formula(self):
        assert baseline_compact_bytes(400) == 2484
        assert baseline_compact_bytes(0) == COMPACT_HEADER_BYTES

    def test_xthin_never_beats_compact(self):
        for n in (1, 50, 400, 3000):
            for m in (n, 10 * n, 60000 + n):
                assert baseline_xthin_bytes(n, m, 0) >= baseline_compact_bytes(n)

    def test_xthin_missing_term(self):
        base = baseline_xthin_bytes(400, 60000, 0)
        plus = baseline_xthin_bytes(400, 60000, 7)
        assert plus - base == 7 * (300.0 + XTHIN_PER_TX_OVERHEAD)

    def test_xthin_rejects_negative_missing(self):
        with pytest.raises(ValueError, match="missing"):
            baseline_xthin_bytes(400, 60000, -1)

    def test_short_id_width_is_six_bytes(self):
        assert SHORT_TX_ID_BYTES == 6
        assert baseline_compact_bytes(10) - baseline_compact_bytes(9) == 6


class TestRunBlockSim:
    def test_full_overlap_relays_everything(self):
        cfg = ScenarioConfig(n_block=150, mempool_size=4000, overlap=1.0, seed=9)
        rows = run_block_sim(cfg, blocks=3)
        assert [r.block for r in rows] == [0, 1, 2]
        for r in rows:
            assert r.success
            assert r.missing_tx_count == 0
            assert r.full_block_bytes == 4 + 4 + 150 * (32 + 4 + 300)
            assert r.graphene_bytes < r.full_block_bytes

    def test_partial_overlap_counts_missing(self):
        cfg = ScenarioConfig(n_block=150, mempool_size=4000, overlap=0.8, seed=9)
        rows = run_block_sim(cfg, blocks=3)
        for r in rows:
            assert r.success
            assert r.missing_tx_count >= 30

    def test_full_block_bytes_matches_serializer(self):
        cfg = ScenarioConfig(n_block=40, mempool_size=100, overlap=1.0, seed=4)
        block, _ = gen_scenario(cfg, counter=0)
        rows = run_block_sim(cfg, blocks=1)
        assert rows[0].full_block_bytes == len(serialize_block(block))

    def test_deterministic(self):
        cfg = ScenarioConfig(n_block=100, mempool_size=1000, overlap=0.9, seed=6)
        assert run_block_sim(cfg, blocks=2) == run_block_sim(cfg, blocks=2)

    def test_rejects_zero_blocks(self):
        with pytest.raises(ValueError, match="blocks"):
            run_block_sim(SMALL, blocks=0)


class TestRunSweep:
    def test_rows_cover_grid_exactly(self, sweep_report):
        assert [r.overlap for r in sweep_report.rows] == [0.85, 0.9, 1.0]

    def test_all_trials_succeed(self, sweep_report):
        assert all(r.success_rate == 1.0 for r in sweep_report.rows)

    def test_crossover_is_largest_losing_overlap(self, sweep_report):
        by_overlap = {r.overlap: r for r in sweep_report.rows}
        assert by_overlap[1.0].graphene_bytes < by_overlap[1.0].compact_bytes
        assert by_overlap[0.9].graphene_bytes > by_overlap[0.9].compact_bytes
        assert sweep_report.crossover_overlap == 0.9

    def test_missing_tracks_overlap_gap(self, sweep_report):
        for row in sweep_report.rows:
            expected = (1.0 - row.overlap) * 400
            assert abs(row.missing_tx_count - expected) <= 20

    def test_fetch_share_grows_as_overlap_falls(self, sweep_report):
        def share(row):
            fetch = row.missing_tx_count * (300.0 + XTHIN_PER_TX_OVERHEAD)
            return fetch / (row.graphene_bytes + fetch)

        first, last = sweep_report.rows[0], sweep_report.rows[-1]
        assert first.overlap < last.overlap
        assert share(first) > share(last)

    def test_metadata_pins_constants(self, sweep_report):
        md = sweep_report.metadata
        assert md["compact_header_bytes"] == COMPACT_HEADER_BYTES
        assert md["xthin_bloom_fpr"] == 1e-3
        assert md["trials"] == 3
        assert md["seed"] == 11

    def test_crossover_none_when_graphene_always_wins(self):
        cfg = ScenarioConfig(
            n_block=400, mempool_size=8000, overlap=1.0, trials=2, seed=3
        )
        report = run_sweep(cfg, [1.0])
        assert report.crossover_overlap is None

    def test_deterministic(self):
        cfg = ScenarioConfig(
            n_block=200, mempool_size=3000, overlap=1.0, trials=2, seed=17
        )
        a = run_sweep(cfg, [0.9, 1.0])
        b = run_sweep(cfg, [0.9, 1.0])
        assert a.rows == b.rows
        assert a.crossover_overlap == b.crossover_overlap

    def test_rejects_empty_grid(self):
        with pytest.raises(ValueError, match="overlaps"):
            run_sweep(SMALL, [])
