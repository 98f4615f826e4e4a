"""Consistency checking of generated queries, plus the training stages built
on it: fine-tuning on the checked subset and multi-collection pretraining.

A generated query passes the check when the scorer, re-ranking the BM25
candidate pool for that query, places the query's source document within the
top k (k between 1 and 3).  Fine-tuning then continues from the given
parameters on just the passing queries; the all-domain stage instead trains
one model on every collection's unfiltered queries, drawing negatives from
each query's own collection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

from .bm25 import Bm25Retriever, tokenize
from .corpus import Corpus, Document
from .querygen import GeneratedQuery
from .ranker import (
    RankerConfig,
    RankerParams,
    TrainConfig,
    TrainResult,
    TrainingCollection,
    train_single,
)

logger = logging.getLogger(__name__)

Scorer = Callable[[str, Document], float]


class ConsistencyError(Exception):
    """Invalid consistency-check inputs."""


@dataclass(frozen=True)
class ConsistencyConfig:
    k: int = 3
    candidate_pool_depth: int = 100

    def __post_init__(self) -> None:
        if not (1 <= self.k <= 3):
            raise ConsistencyError(f"k must lie in {{1, 2, 3}}, got {self.k}")
        if self.candidate_pool_depth < self.k:
            raise ConsistencyError(
                f"candidate_pool_depth {self.candidate_pool_depth} smaller than k {self.k}"
            )


def consistency_check(
    query: GeneratedQuery,
    scorer: Scorer,
    retriever: Bm25Retriever,
    corpus: Corpus,
    config: ConsistencyConfig = ConsistencyConfig(),
) -> bool:
    """True when the scorer ranks the source document in its top k of the
    BM25 pool; a source missing from the pool fails outright."""
    if query.source_doc_id not in corpus:
        raise ConsistencyError(
            f"unknown source document {query.source_doc_id!r} for generated query"
        )
    pool = retriever.retrieve(tokenize(query.text), config.candidate_pool_depth)
    pool_ids = [sd.doc_id for sd in pool]
    if query.source_doc_id not in pool_ids:
        return False
    reranked = sorted(
        pool_ids, key=lambda doc_id: (-scorer(query.text, corpus.get(doc_id)), doc_id)
    )
    return query.source_doc_id in reranked[: config.k]


def build_checked_set(
    queries: Sequence[GeneratedQuery],
    scorer: Scorer,
    retriever: Bm25Retriever,
    corpus: Corpus,
    config: ConsistencyConfig = ConsistencyConfig(),
) -> list[GeneratedQuery]:
    """The passing subset, in the original order."""
    return [
        q for q in queries if consistency_check(q, scorer, retriever, corpus, config)
    ]


def check_flags(
    queries: Sequence[GeneratedQuery],
    scorer: Scorer,
    retriever: Bm25Retriever,
    corpus: Corpus,
    config: ConsistencyConfig = ConsistencyConfig(),
) -> list[bool]:
    return [consistency_check(q, scorer, retriever, corpus, config) for q in queries]


def finetune_on_checked(
    params: RankerParams,
    checked_queries: Sequence[GeneratedQuery],
    corpus: Corpus,
    retriever: Bm25Retriever,
    config: TrainConfig,
    seed: int = 0,
) -> TrainResult:
    """Continue training from ``params`` on the checked queries with a fresh
    optimizer and schedule; an empty checked set is a warning, not an error,
    and returns the parameters unchanged."""
    if not checked_queries:
        logger.warning("empty checked set; returning parameters unchanged")
        return TrainResult(
            params=params.copy(),
            epoch_losses=[],
            optimizer_steps=0,
            skipped_instances=0,
        )
    collection = TrainingCollection(corpus=corpus, retriever=retriever)
    examples = [(q.text, q.source_doc_id, 0) for q in checked_queries]
    return train_single(
        [collection],
        examples,
        config,
        ranker_config=params.config,
        seed=seed,
        initial_params=params,
    )


def all_domain_pretrain(
    collections: Sequence[tuple[Corpus, Bm25Retriever, Sequence[GeneratedQuery]]],
    config: TrainConfig,
    ranker_config: RankerConfig | None = None,
    seed: int = 0,
) -> TrainResult:
    """Train one model on the concatenation of every collection's queries.

    Negatives for each instance come from that query's own collection.  With
    a single collection this is identical to plain training under the same
    seed.
    """
    if not collections:
        raise ConsistencyError("all-domain pretraining needs at least one collection")
    training_collections = [
        TrainingCollection(corpus=corpus, retriever=retriever)
        for corpus, retriever, _ in collections
    ]
    examples = [
        (q.text, q.source_doc_id, idx)
        for idx, (_, _, queries) in enumerate(collections)
        for q in queries
    ]
    return train_single(
        training_collections, examples, config, ranker_config=ranker_config, seed=seed
    )
