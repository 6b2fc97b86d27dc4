"""Unsupervised grammar induction inside a transformer.

A parser head learns syntactic distance and height jointly with a
sequence-to-sequence objective, converts them into a dependency-distribution
mask that guides encoder self-attention, and exposes the induced structure
as constituency trees.
"""

__version__ = "0.1.0"
