"""Peer-management calculations.

Three small families of pure functions: trust scoring for gossip peers
(how much a node prefers a peer based on its transaction behavior,
connection age, and a static weight prior), adaptive request TTL from
round-trip estimates, and bootstrap connection sizing from download
backlog.  Everything here is arithmetic on plain records; no protocol
machinery, timers, or sockets.

Two precedence choices are deliberate and load-bearing:

* the bad-transaction ratio divides by ``new_txs + 1``, never by the
  raw count, so idle peers do not divide by zero;
* the quality expression is ``((1 / badTxRatio) + 1) * penalty`` under
  ordinary operator precedence.

Changing either silently shifts every downstream score, so the golden
vectors in the test data pin them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PeerStats:
    """Observed behavior of one gossip peer."""

    invalid_txs: int = 0
    random_tx_requests: int = 0
    new_txs: int = 0
    connection_age: float = 0.0
    weight: float = 0.0
    trusted: bool = False

    def __post_init__(self) -> None:
        if min(self.invalid_txs, self.random_tx_requests, self.new_txs) < 0:
            raise ValueError("transaction counts must be nonnegative")
        if self.connection_age < 0:
            raise ValueError("connection age must be nonnegative")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")


@dataclass(frozen=True)
class QosState:
    """Round-trip estimate and confidence driving request TTLs."""

    rtt: float = 20.0
    rtt_conf: float = 1.0
    ttl_scaling: float = 3.0
    ttl_limit: float = 60.0
    tuning_impact: float = 0.25

    def __post_init__(self) -> None:
        if self.rtt <= 0:
            raise ValueError("rtt must be positive")
        if not 0.0 < self.rtt_conf <= 1.0:
            raise ValueError("rtt_conf must lie in (0, 1]")


@dataclass(frozen=True)
class BootstrapConfig:
    """Connection sizing for initial ledger download."""

    min_peers: int = 4
    max_peers: int = 64
    est_blocks_per_bootstrap: int = 50000
    max_new_attempts: int = 10

    def __post_init__(self) -> None:
        if self.min_peers > self.max_peers:
            raise ValueError("min_peers must not exceed max_peers")


def peer_quality(s: PeerStats) -> float:
    """Quality in (0, 2]: high for peers that deliver new transactions
    cleanly, low for peers pushing invalid data or spamming requests.

    An untrusted peer that has delivered nothing new while misbehaving
    more than three times takes a 1/(badTxs+1) penalty on top of the
    ratio; trusted peers never do.
    """
    bad_txs = s.invalid_txs + s.random_tx_requests
    bad_tx_ratio = (s.invalid_txs * 5 + s.random_tx_requests) / (s.new_txs + 1) + 1
    if not s.trusted and s.new_txs == 0 and bad_txs > 3:
        penalty = 1 / (bad_txs + 1)
    else:
        penalty = 1.0
    return ((1 / bad_tx_ratio) + 1) * penalty


def peer_score(s: PeerStats, quality: float) -> float:
    """Final ranking score: age times quality, boosted up to 11x by the
    static weight prior."""
    return s.connection_age * quality * (1 + s.weight * 10)


def qos_tune(q: QosState, peer_median_rtt: float) -> QosState:
    """Blend the tracked rtt toward the peers' median and harden the
    confidence by half its remaining distance to 1."""
    if peer_median_rtt <= 0:
        raise ValueError("peer median rtt must be positive")
    rtt = (1 - q.tuning_impact) * q.rtt + q.tuning_impact * peer_median_rtt
    conf = q.rtt_conf + (1 - q.rtt_conf) / 2
    return dataclasses.replace(q, rtt=rtt, rtt_conf=conf)


def get_ttl(q: QosState) -> float:
    """Request timeout: scaled rtt inflated by low confidence, capped."""
    return min(q.ttl_limit, q.ttl_scaling * q.rtt / q.rtt_conf)


def bootstrap_peer_count(cfg: BootstrapConfig, pulls_in_progress: int) -> int:
    """Target peer count for bootstrap, scaling from min_peers toward
    max_peers as the pull backlog approaches a full ledger download.
    The step is clamped so backlogs past the estimate stay at max."""
    step = min(1.0, max(0.0, pulls_in_progress / cfg.est_blocks_per_bootstrap))
    target = math.floor(cfg.min_peers + (cfg.max_peers - cfg.min_peers) * step)
    return max(1, target)


def new_connection_count(cfg: BootstrapConfig, target: int, active: int) -> int:
    """How many connection attempts to launch now: twice the deficit,
    never negative, capped at the per-round attempt budget."""
    return max(0, min(cfg.max_new_attempts, (target - active) * 2))


def evaluate_vector(op: str, inputs: dict) -> dict:
    """Evaluate one regression vector; shared by the golden-vector tests
    and the CLI's eval subcommand.  Unspecified record fields keep their
    defaults."""
    if op == "peer_quality":
        return {"quality": peer_quality(PeerStats(**inputs))}
    if op == "peer_score":
        rest = {k: v for k, v in inputs.items() if k != "quality"}
        return {"score": peer_score(PeerStats(**rest), inputs["quality"])}
    if op == "qos_tune":
        rest = {k: v for k, v in inputs.items() if k != "peer_median_rtt"}
        out = qos_tune(QosState(**rest), inputs["peer_median_rtt"])
        return {"rtt": out.rtt, "rtt_conf": out.rtt_conf}
    if op == "get_ttl":
        return {"ttl": get_ttl(QosState(**inputs))}
    if op == "bootstrap_peer_count":
        cfg = BootstrapConfig(**inputs.get("config", {}))
        return {"target": bootstrap_peer_count(cfg, inputs["pulls_in_progress"])}
    if op == "new_connection_count":
        cfg = BootstrapConfig(**inputs.get("config", {}))
        return {
            "count": new_connection_count(cfg, inputs["target"], inputs["active"])
        }
    raise ValueError(f"unknown op {op!r}")
