#!/usr/bin/env python3
"""Generate a small separable demo collection plus a ready-to-run config.

Each topic gets one "answer" document (marked by the token ``hallmark``) and
a set of decoys that repeat the topic word more often, so plain BM25 tends to
rank decoys above the answer while a trained scorer can learn to prefer it.
Training queries land in an offline generation file, so the whole pipeline
runs without any generation endpoint:

    python3 scripts/make_toy_collection.py demo/
    synthrank run-recipe --config demo/config.json --recipe consistency
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from synthrank.corpus import Corpus, Document, write_qrels
from synthrank.querygen import GeneratedQuery, write_generated_queries


def build(n_topics: int, docs_per_topic: int, train_per_topic: int, seed: int):
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
                Document(doc_id=doc_id, title=f"{topic} {unique}", body=" ".join(body_tokens))
            )

    train_queries: list[GeneratedQuery] = []
    for topic in topics:
        for _ in range(train_per_topic):
            noise = rng.sample(fillers, 2)
            logprobs = [rng.uniform(-3.0, -0.1) for _ in range(rng.randint(2, 6))]
            train_queries.append(
                GeneratedQuery.create(
                    f"{topic} {noise[0]} {noise[1]}", answer_doc[topic], logprobs
                )
            )

    heldout: list[tuple[str, str]] = []
    qrels: dict[str, dict[str, int]] = {}
    for t_idx, topic in enumerate(topics):
        noise = rng.sample(fillers, 2)
        qid = f"h{t_idx:02d}"
        heldout.append((qid, f"{topic} {noise[0]} {noise[1]}"))
        qrels[qid] = {answer_doc[topic]: 1}

    return Corpus(docs), train_queries, heldout, qrels


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path, help="directory for data files and config.json")
    parser.add_argument("--n-topics", type=int, default=30)
    parser.add_argument("--docs-per-topic", type=int, default=10)
    parser.add_argument("--train-per-topic", type=int, default=5)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--train-seeds", default="0,1,2", help="comma-separated training seeds")
    args = parser.parse_args()

    corpus, train_queries, heldout, qrels = build(
        args.n_topics, args.docs_per_topic, args.train_per_topic, args.seed
    )
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(
                json.dumps({"doc_id": doc.doc_id, "title": doc.title, "body": doc.body}) + "\n"
            )
    with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
        for qid, text in heldout:
            fh.write(json.dumps({"query_id": qid, "text": text}) + "\n")
    write_qrels(qrels, out / "qrels.txt")
    write_generated_queries(train_queries, out / "offline_queries.jsonl")

    config = {
        "schema_version": 1,
        "output_dir": "out",
        "seeds": [int(s) for s in args.train_seeds.split(",")],
        "bm25": {"k1": 0.9, "b": 0.4, "stage1_k": 400},
        "rerank_depth": 100,
        "generation": {"keep_fraction": 0.1, "seed": 0},
        # rates far above the full-scale defaults: the toy set needs to be
        # learnable within a couple dozen optimizer steps
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
                "corpus": "corpus.jsonl",
                "queries": "queries.jsonl",
                "qrels": "qrels.txt",
                "offline_queries": "offline_queries.jsonl",
            }
        ],
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")

    print(f"wrote {len(corpus)} documents, {len(train_queries)} offline queries, "
          f"{len(heldout)} held-out queries to {out}")
    print(f"next: synthrank run-recipe --config {out / 'config.json'} --recipe consistency")


if __name__ == "__main__":
    main()
