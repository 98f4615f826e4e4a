"""Shared builders: small corpora, a synthetic separable collection, and a
stub generation client."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from synthrank.corpus import Corpus, Document, QueryRecord
from synthrank.querygen import GeneratedQuery, GenerationResponse


def make_corpus(texts: dict[str, str] | list[tuple[str, str]]) -> Corpus:
    """Title-less corpus from {doc_id: body} (or ordered pairs)."""
    items = texts.items() if isinstance(texts, dict) else texts
    return Corpus(Document(doc_id=d, body=b) for d, b in items)


@dataclass
class StubClient:
    """Generation client returning canned responses in order."""

    responses: list[GenerationResponse]
    prompts: list[str] = field(default_factory=list)
    _cursor: int = 0

    def complete(self, prompt: str) -> GenerationResponse:
        self.prompts.append(prompt)
        response = self.responses[self._cursor % len(self.responses)]
        self._cursor += 1
        return response


def stub_response(tokens: list[str], logprobs: list[float] | None = None) -> GenerationResponse:
    if logprobs is None:
        logprobs = [-1.0] * len(tokens)
    return GenerationResponse(
        tokens=tuple(tokens), token_logprobs=tuple(logprobs), text="".join(tokens)
    )


@dataclass
class ToyCollection:
    """A separable synthetic collection.

    Each topic has one "answer" document marked by the token ``hallmark`` and
    nine decoys marked ``mundane``; decoys repeat the topic token more often,
    so plain BM25 tends to rank them above the answer.  Queries mention the
    topic plus noise words, and always target the answer document.
    """

    corpus: Corpus
    train_queries: list[GeneratedQuery]
    heldout_queries: list[QueryRecord]
    qrels: dict[str, dict[str, int]]
    answer_doc: dict[str, str]  # topic -> answer doc_id


def build_toy_collection(
    n_topics: int = 30,
    docs_per_topic: int = 10,
    train_per_topic: int = 5,
    seed: int = 7,
) -> ToyCollection:
    rng = random.Random(seed)
    fillers = [f"filler{i:02d}" for i in range(40)]
    docs: list[Document] = []
    answer_doc: dict[str, str] = {}
    topics = [f"topic{i:02d}" for i in range(n_topics)]
    for t_idx, topic in enumerate(topics):
        for j in range(docs_per_topic):
            doc_id = f"d{t_idx:02d}{j:02d}"
            unique = f"uniq{t_idx:02d}{j:02d}"
            noise = rng.sample(fillers, 6)
            if j == 0:
                body_tokens = [topic] + ["hallmark"] * 3 + noise + [unique]
                answer_doc[topic] = doc_id
            else:
                body_tokens = [topic] * 3 + ["mundane"] * 3 + noise + [unique]
            docs.append(
                Document(
                    doc_id=doc_id,
                    title=f"{topic} {unique}",
                    body=" ".join(body_tokens),
                )
            )
    corpus = Corpus(docs)

    train_queries: list[GeneratedQuery] = []
    for t_idx, topic in enumerate(topics):
        for j in range(train_per_topic):
            noise = rng.sample(fillers, 2)
            text = f"{topic} {noise[0]} {noise[1]}"
            n_tokens = rng.randint(2, 6)
            logprobs = [rng.uniform(-3.0, -0.1) for _ in range(n_tokens)]
            train_queries.append(
                GeneratedQuery.create(text, answer_doc[topic], logprobs)
            )

    heldout_queries: list[QueryRecord] = []
    qrels: dict[str, dict[str, int]] = {}
    for t_idx, topic in enumerate(topics):
        noise = rng.sample(fillers, 2)
        qid = f"h{t_idx:02d}"
        heldout_queries.append(
            QueryRecord(query_id=qid, text=f"{topic} {noise[0]} {noise[1]}")
        )
        qrels[qid] = {answer_doc[topic]: 1}

    return ToyCollection(
        corpus=corpus,
        train_queries=train_queries,
        heldout_queries=heldout_queries,
        qrels=qrels,
        answer_doc=answer_doc,
    )


def write_toy_collection_files(toy: ToyCollection, root: Path) -> dict[str, Path]:
    """Materialize a toy collection on disk in the pipeline's file formats."""
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": root / "corpus.jsonl",
        "queries": root / "queries.jsonl",
        "qrels": root / "qrels.txt",
        "offline_queries": root / "offline_queries.jsonl",
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for doc in toy.corpus:
            fh.write(
                json.dumps(
                    {"doc_id": doc.doc_id, "title": doc.title, "body": doc.body}
                )
                + "\n"
            )
    with open(paths["queries"], "w", encoding="utf-8") as fh:
        for q in toy.heldout_queries:
            fh.write(json.dumps({"query_id": q.query_id, "text": q.text}) + "\n")
    with open(paths["qrels"], "w", encoding="utf-8") as fh:
        for qid, judgments in toy.qrels.items():
            for doc_id, grade in judgments.items():
                fh.write(f"{qid} 0 {doc_id} {grade}\n")
    with open(paths["offline_queries"], "w", encoding="utf-8") as fh:
        for q in toy.train_queries:
            fh.write(
                json.dumps(
                    {
                        "source_doc_id": q.source_doc_id,
                        "text": q.text,
                        "token_logprobs": list(q.token_logprobs),
                    }
                )
                + "\n"
            )
    return paths


def toy_pipeline_config(
    paths: dict[str, Path], output_dir: Path, seeds=(0, 1, 2)
) -> dict:
    """Config dict tuned so the toy collection is learnable in seconds."""
    return {
        "schema_version": 1,
        "output_dir": str(output_dir),
        "seeds": list(seeds),
        "bm25": {"k1": 0.9, "b": 0.4, "stage1_k": 400},
        "rerank_depth": 100,
        "generation": {"keep_fraction": 0.1, "seed": 0},
        "training": {
            "epochs": 24,
            "accumulation_steps": 16,
            "head_lr": 0.08,
            "embedding_lr": 0.04,
            "dim": 32,
            "hash_bits": 18,
        },
        "finetune": {"epochs": 6, "head_lr": 0.08, "embedding_lr": 0.04},
        "consistency": {"k": 3, "candidate_pool_depth": 100},
        "evaluation": {"metrics": ["ndcg@10"]},
        "collections": [
            {
                "name": "toy",
                "corpus": str(paths["corpus"]),
                "queries": str(paths["queries"]),
                "qrels": str(paths["qrels"]),
                "offline_queries": str(paths["offline_queries"]),
            }
        ],
    }


@pytest.fixture(scope="session")
def toy_collection() -> ToyCollection:
    return build_toy_collection()
