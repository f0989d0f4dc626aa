"""Subset-expert classification toolkit.

Builds class subsets by fusing lexical and confusion-derived dissimilarities
with single-linkage clustering, then trains a shared-backbone model with one
expert head per subset, mean feature aggregation, and two-way mutual learning.

Kept import-light on purpose: pull in submodules explicitly, e.g.
``from elfis import tensor`` or ``from elfis.model import init_model``.
"""

__version__ = "0.1.0"
