"""Phenotype-driven causal gene prioritization over a typed knowledge graph.

The pipeline: sample a phenotype-centered m-hop subgraph, encode it with a
multi-head graph attention stack, score edges and candidate genes against a
pooled patient representation, train with a joint margin/ranking objective,
then extract a compact patient subgraph and (optionally) fuse external gene
scores with a membership boost.
"""

__version__ = "0.1.0"
