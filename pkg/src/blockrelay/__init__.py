"""blockrelay: set-reconciliation primitives and a block propagation simulator.

The package provides the building blocks for Graphene-style block relay
(Bloom filters, invertible Bloom lookup tables, transaction order codecs),
a frontier synchronization layer built on the same tables, peer scoring
heuristics, and a simulation harness with wire-cost baselines.
"""

__version__ = "0.1.0"

from .filters import BloomFilter, CuckooFilter, bloom_fpr, bloom_optimal_k
from .iblt import DecodeResult, Iblt, iblt_sizing

__all__ = [
    "BloomFilter",
    "CuckooFilter",
    "DecodeResult",
    "Iblt",
    "__version__",
    "bloom_fpr",
    "bloom_optimal_k",
    "iblt_sizing",
]
