"""Generative next-item recommendation over semantic IDs with in-decoder reranking.

Modules follow the pipeline order: ``numerics`` (float mode, primitives,
gradient checks), ``tokenizer`` (residual k-means semantic IDs), ``data``
(catalogs, sequences, splits), ``serialization`` (token layout), ``backbone``
(decoder with KV caches), ``decode`` (trie-constrained beam search),
``rerank`` (history retrieval and rank-head scoring), ``training``,
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
