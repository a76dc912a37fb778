"""Deterministic simulator and optimizer for draft-tree speculative decoding.

The package models the serving loop of a drafter/verifier pair without real
models: draft trees carry surrogate acceptance probabilities, latency comes
from profiled width/latency curves, and every run is reproducible from a
single seed.
"""

from specsim.errors import ConfigError

__all__ = ["ConfigError"]

__version__ = "0.1.0"
