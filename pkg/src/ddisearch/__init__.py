"""Joint search over per-query subgraph scopes and relational encoders."""

from . import encoder, graph, metrics, scope, search, synth, tape

__all__ = ["encoder", "graph", "metrics", "scope", "search", "synth", "tape"]
__version__ = "0.1.0"
