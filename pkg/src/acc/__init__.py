"""Adaptive context compression for retrieval-augmented generation.

Desk-scale stack: a hierarchical document compressor producing
position-ranked embedding prefixes, a halting selector trained with policy
gradients, a toy frozen decoder, a synthetic key-value QA corpus with a
deterministic retriever, and a benchmark harness (`acc` CLI).
"""

__version__ = "0.1.0"
