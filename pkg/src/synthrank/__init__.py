"""Synthetic-query training for compact re-rankers.

The pieces: corpus and run IO (:mod:`synthrank.corpus`), BM25 retrieval
(:mod:`synthrank.bm25`), prompted query generation and log-prob filtering
(:mod:`synthrank.querygen`), the hashed-feature ranker and its training loop
(:mod:`synthrank.ranker`), consistency filtering (:mod:`synthrank.consistency`),
evaluation statistics (:mod:`synthrank.evaluation`), and the orchestrating
pipeline plus CLI (:mod:`synthrank.pipeline`, :mod:`synthrank.cli`).
"""

__version__ = "0.1.0"
