"""Generative bundle recommendation.

Pipeline: learn item embeddings from user-item co-occurrence with graph
convolutions, build kNN item clusters, train an encoder-decoder that emits a
pseudo "ideal" bundle per user, then retrieve and rank predefined bundles by
a Jaccard/cosine similarity mix against that pseudo bundle.
"""

__version__ = "0.1.0"
