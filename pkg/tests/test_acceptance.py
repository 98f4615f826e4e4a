"""Acceptance gate: nine numbered end-to-end checks, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the
per-criterion lines on success).
"""

import hashlib
import json
import math
import random
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from synthrank.bm25 import Bm25Params, Bm25Retriever, InvertedIndex, retrieve_top_k, tokenize
from synthrank.consistency import ConsistencyConfig, build_checked_set
from synthrank.corpus import RunEntry
from synthrank.evaluation import (
    PerQueryScores,
    aggregate_gains,
    mean_average_precision,
    mrr,
    ndcg_at_k,
    paired_t_test,
)
from synthrank.pipeline import PipelineRunner, parse_config
from synthrank.querygen import GeneratedQuery, filter_top_fraction
from synthrank.ranker import (
    AdamWState,
    Gradients,
    LrSchedule,
    OptimizerConfig,
    RankerConfig,
    RankerParams,
    adamw_step,
    infonce_grad,
    infonce_loss,
    instance_loss,
    lr_at_step,
)

from conftest import build_toy_collection, make_corpus, toy_pipeline_config, write_toy_collection_files

DATA_DIR = Path(__file__).parent / "data"


@contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {number}] FAIL  {label}")
        raise
    print(f"[criterion {number}] PASS  {label}")


# Reference scoreboard: seven (dataset, metric) cells per system.
SCOREBOARD_CELLS = [
    ("msmarco", "mrr"),
    ("trec-dl-2020", "map"),
    ("trec-dl-2020", "ndcg@10"),
    ("robust04", "map"),
    ("robust04", "ndcg@20"),
    ("nq", "ndcg@10"),
    ("trec-covid", "ndcg@10"),
]
BASELINE_ROW = [0.1867, 0.3612, 0.5159, 0.2555, 0.4285, 0.3248, 0.6767]
MODEL_ROWS = {
    "minilm-all-consistency": (
        [0.2468, 0.3929, 0.5726, 0.2639, 0.4599, 0.3747, 0.7688],
        1.13,
        7,
    ),
    "deberta-consistency": (
        [0.2815, 0.4446, 0.6717, 0.3009, 0.5360, 0.4621, 0.8183],
        1.30,
        7,
    ),
    "mono-t5-3b": (
        [0.2967, 0.4334, 0.6612, 0.3180, 0.5181, 0.5133, 0.7835],
        1.32,
        7,
    ),
    "mono-t5-220m": (
        [0.2585, 0.3599, 0.5764, 0.2490, 0.4268, 0.3354, 0.6666],
        1.07,
        3,
    ),
}


def test_criterion_1_gain_table_arithmetic():
    with criterion(1, "scoreboard gain arithmetic within 0.005"):
        start = time.perf_counter()
        baseline = dict(zip(SCOREBOARD_CELLS, BASELINE_ROW))
        for name, (row, expected_gain, expected_wins) in MODEL_ROWS.items():
            report = aggregate_gains(dict(zip(SCOREBOARD_CELLS, row)), baseline)
            assert abs(report.average_gain - expected_gain) <= 0.005, name
            assert report.win_count == expected_wins, name
        assert time.perf_counter() - start < 1.0


def direct_bm25_ranking(docs, query_tokens, params, k):
    """Exhaustive direct-formula scoring over every document."""
    n = len(docs)
    df = Counter()
    for tokens in docs.values():
        df.update(set(tokens))
    avgdl = sum(len(t) for t in docs.values()) / n
    scores = {}
    for doc_id, tokens in docs.items():
        tf = Counter(tokens)
        total = 0.0
        for term in query_tokens:
            if tf[term] == 0:
                continue
            idf = math.log(1.0 + (n - df[term] + 0.5) / (df[term] + 0.5))
            norm = tf[term] + params.k1 * (
                1.0 - params.b + params.b * len(tokens) / avgdl
            )
            total += idf * tf[term] / norm
        if total > 0.0:
            scores[doc_id] = total
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def test_criterion_2_bm25_oracle_equivalence():
    with criterion(2, "top-k retrieval equals exhaustive scoring on 200 corpora"):
        start = time.perf_counter()
        rng = random.Random(20260814)
        params = Bm25Params()
        for trial in range(200):
            vocab = [f"w{i}" for i in range(rng.randint(5, 25))]
            n_docs = rng.randint(1, 200)
            docs = {
                f"d{i:03d}": rng.choices(vocab, k=rng.randint(1, 30))
                for i in range(n_docs)
            }
            corpus = make_corpus({d: " ".join(t) for d, t in docs.items()})
            index = InvertedIndex.build(corpus, "combined", tokenize)
            query = rng.choices(vocab, k=rng.randint(1, 5))
            k = rng.randint(1, n_docs + 3)
            got = retrieve_top_k(index, query, k, params)
            want = direct_bm25_ranking(docs, query, params, k)
            assert [sd.doc_id for sd in got] == [d for d, _ in want], trial
            for sd, (_, score) in zip(got, want):
                assert abs(sd.score - score) <= 1e-9, trial
        assert time.perf_counter() - start < 30.0


def oracle_metrics(ranked, judgments, k):
    """Definitional reciprocal rank, average precision, and ndcg@k."""
    rr = 0.0
    for i, doc in enumerate(ranked, start=1):
        if judgments.get(doc, 0) >= 1:
            rr = 1.0 / i
            break
    n_relevant = sum(1 for g in judgments.values() if g >= 1)
    ap = None
    if n_relevant:
        hits, total = 0, 0.0
        for i, doc in enumerate(ranked, start=1):
            if judgments.get(doc, 0) >= 1:
                hits += 1
                total += hits / i
        ap = total / n_relevant
    dcg = sum(
        judgments.get(doc, 0) / math.log2(i + 1)
        for i, doc in enumerate(ranked[:k], start=1)
    )
    ideal = sorted((g for g in judgments.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    ndcg = dcg / idcg if idcg > 0 else 0.0
    return rr, ap, ndcg


def test_criterion_3_metric_oracle_equivalence():
    with criterion(3, "metrics match brute-force oracles on 1000 instances"):
        start = time.perf_counter()
        rng = random.Random(31)
        universe = [f"d{i}" for i in range(15)]
        for trial in range(1000):
            ranked = rng.sample(universe, rng.randint(0, 10))
            judgments = {
                doc: rng.choice([0, 1, 2, 3])
                for doc in rng.sample(universe, rng.randint(0, 8))
            }
            run = {
                "q": [
                    RunEntry("q", doc, i, float(len(ranked) - i), "t")
                    for i, doc in enumerate(ranked, start=1)
                ]
            }
            qrels = {"q": judgments}
            k = rng.randint(1, 12)
            want_rr, want_ap, want_ndcg = oracle_metrics(ranked, judgments, k)
            assert abs(mrr(run, qrels).values["q"] - want_rr) <= 1e-9, trial
            got_ap = mean_average_precision(run, qrels).values
            if want_ap is None:
                assert "q" not in got_ap, trial
            else:
                assert abs(got_ap["q"] - want_ap) <= 1e-9, trial
            got_ndcg = ndcg_at_k(run, qrels, k).values["q"]
            assert abs(got_ndcg - want_ndcg) <= 1e-9, trial
        assert time.perf_counter() - start < 30.0


def test_criterion_4_infonce_gradient_check():
    with criterion(4, "analytic gradients match finite differences"):
        start = time.perf_counter()
        assert abs(infonce_loss(0.7, [0.7, 0.7, 0.7]) - math.log(4.0)) <= 1e-9
        rng = random.Random(17)
        vocab = [f"w{i}" for i in range(15)]
        step = 1e-5
        worst = 0.0
        for trial in range(100):
            params = RankerParams.initialize(
                RankerConfig(dim=6, hash_bits=12), seed=trial
            )
            q = " ".join(rng.choices(vocab, k=3))
            pos = " ".join(rng.choices(vocab, k=6))
            negs = [" ".join(rng.choices(vocab, k=6)) for _ in range(3)]
            _, grads = infonce_grad(params, q, pos, negs)
            for bucket in grads.embeddings:
                params.ensure_embedding(bucket)
            _, grads = infonce_grad(params, q, pos, negs)

            def fd(mutate):
                probe = params.copy()
                mutate(probe, step)
                up = instance_loss(probe, q, pos, negs)
                probe = params.copy()
                mutate(probe, -step)
                down = instance_loss(probe, q, pos, negs)
                return (up - down) / (2 * step)

            checks = [
                (grads.head[i], lambda p, h, i=i: p.head.__setitem__(i, p.head[i] + h))
                for i in range(params.config.dim)
            ]
            checks.append((grads.bias, lambda p, h: setattr(p, "bias", p.bias + h)))
            for bucket in sorted(grads.embeddings)[:3]:
                for i in range(params.config.dim):
                    checks.append(
                        (
                            grads.embeddings[bucket][i],
                            lambda p, h, b=bucket, i=i: p.embeddings[b].__setitem__(
                                i, p.embeddings[b][i] + h
                            ),
                        )
                    )
            for analytic, mutate in checks:
                numeric = fd(mutate)
                worst = max(
                    worst, abs(analytic - numeric) / max(1.0, abs(numeric))
                )
        assert worst < 1e-4
        assert time.perf_counter() - start < 30.0


def test_criterion_5_schedule_and_optimizer_point_checks():
    with criterion(5, "schedule points exact; first optimizer step closed-form"):
        for base, total in [(0.3, 10), (1.0, 7), (2e-4, 1)]:
            sched = LrSchedule(base_lr=base, total_steps=total)
            warm = math.ceil(0.2 * total)
            assert sched.warmup_steps == warm
            points = {0, warm, total, warm // 2, (warm + total) // 2}
            for step in points:
                if step <= warm:
                    expected = base * step / warm
                else:
                    expected = base * (total - step) / (total - warm)
                assert lr_at_step(sched, step) == expected, (base, total, step)

        config = OptimizerConfig(head_lr=0.25, embedding_lr=0.05, weight_decay=0.5)
        params = RankerParams.initialize(RankerConfig(dim=3, hash_bits=10), seed=0)
        params.ensure_embedding(4)
        before_head = params.head.copy()
        before_bias = params.bias
        before_emb = params.embeddings[4].copy()
        grads = Gradients(
            head=np.array([0.2, -0.4, 0.0]),
            bias=0.3,
            embeddings={4: np.array([-1.0, 0.5, 0.0])},
        )
        # warmup of 1 step puts the schedule at its base rate on step 1
        sched = LrSchedule(base_lr=0.05, total_steps=4)
        state = AdamWState(config, dim=3)
        adamw_step(state, params, grads, sched)
        assert state.step == 1

        def closed_form(theta, g, lr):
            return theta * (1 - lr * config.weight_decay) - lr * g / (
                abs(g) + config.eps
            )

        for i in range(3):
            want = closed_form(before_head[i], grads.head[i], config.head_lr)
            assert abs(params.head[i] - want) <= 1e-12, f"head[{i}]"
            want = closed_form(before_emb[i], grads.embeddings[4][i], config.embedding_lr)
            assert abs(params.embeddings[4][i] - want) <= 1e-12, f"emb[{i}]"
        want = closed_form(before_bias, grads.bias, config.head_lr)
        assert abs(params.bias - want) <= 1e-12, "bias"


def test_criterion_6_filter_and_consistency_properties():
    with criterion(6, "filter keeps exactly the top tenth; checks grow with k"):
        rng = random.Random(23)
        grid = [-0.1, -0.3, -0.5, -0.9, -1.5, -2.0]
        for n in range(1, 1001):
            queries = []
            for i in range(n):
                lp = rng.choice(grid) if i % 2 else -rng.random() * 3 - 1e-9
                queries.append(GeneratedQuery.create(f"q{i}", "src", [lp]))
            kept = filter_top_fraction(queries)
            assert len(kept) == math.ceil(0.1 * n), n
            kept_counts = Counter(q.avg_logprob for q in kept)
            all_counts = Counter(q.avg_logprob for q in queries)
            discarded = list((all_counts - kept_counts).elements())
            if discarded:
                assert min(q.avg_logprob for q in kept) >= max(discarded), n

        corpus = make_corpus(
            {
                f"d{i:03d}": f"shared word{i % 23} extra{i % 7} tail{i % 3}"
                for i in range(200)
            }
        )
        retriever = Bm25Retriever(corpus)

        def pseudo_scorer(query_text, doc):
            key = f"{query_text}|{doc.doc_id}".encode()
            return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") / 2**64

        queries = [
            GeneratedQuery.create(
                f"shared word{i % 23} extra{i % 5}", f"d{(i * 37) % 200:03d}", [-1.0]
            )
            for i in range(40)
        ]
        kept_by_k = {}
        for k in (1, 2, 3):
            config = ConsistencyConfig(k=k, candidate_pool_depth=50)
            kept = build_checked_set(queries, pseudo_scorer, retriever, corpus, config)
            kept_by_k[k] = {(q.text, q.source_doc_id) for q in kept}
        assert kept_by_k[1] <= kept_by_k[2] <= kept_by_k[3]


def test_criterion_7_end_to_end_toy_training(tmp_path):
    with criterion(7, "trained ranker beats or ties first-stage retrieval on the toy set"):
        start = time.perf_counter()
        toy = build_toy_collection()
        paths = write_toy_collection_files(toy, tmp_path / "data")
        out = tmp_path / "out"
        config = parse_config(toy_pipeline_config(paths, out), base_dir=tmp_path)
        PipelineRunner(config).run_recipe("consistency")
        report = json.loads((out / "toy" / "report.json").read_text())
        block = report["metrics"]["ndcg@10"]
        assert report["seeds"] == [0, 1, 2]
        assert block["model_mean"] >= block["bm25_mean"]
        assert isinstance(block["p_value"], float)
        assert 0.0 <= block["p_value"] <= 1.0
        assert time.perf_counter() - start < 60.0


def test_criterion_8_statistics_oracle():
    with criterion(8, "paired t-test matches frozen reference and is antisymmetric"):
        cases = json.loads((DATA_DIR / "t_test_reference.json").read_text())["cases"]
        assert len(cases) == 20
        for case in cases:
            diffs = case["diffs"]
            a = PerQueryScores("m", {f"q{i}": d for i, d in enumerate(diffs)})
            b = PerQueryScores("m", {f"q{i}": 0.0 for i in range(len(diffs))})
            result = paired_t_test(a, b)
            assert abs(result.t_statistic - case["t"]) <= 1e-6
            assert abs(result.p_value - case["p"]) <= 1e-6
        rng = random.Random(5)
        for _ in range(30):
            n = rng.randint(2, 40)
            a = PerQueryScores("m", {f"q{i}": rng.random() for i in range(n)})
            b = PerQueryScores("m", {f"q{i}": rng.random() for i in range(n)})
            ab = paired_t_test(a, b)
            ba = paired_t_test(b, a)
            assert not ab.degenerate
            assert ab.t_statistic == pytest.approx(-ba.t_statistic, abs=1e-12)
            assert ab.p_value == pytest.approx(ba.p_value, abs=1e-12)


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "repeated recipe runs emit byte-identical runs and checkpoints"):
        toy = build_toy_collection(
            n_topics=6, docs_per_topic=6, train_per_topic=2, seed=3
        )
        paths = write_toy_collection_files(toy, tmp_path / "data")

        def run_once(out_dir):
            data = toy_pipeline_config(paths, out_dir, seeds=(0, 1))
            data["bm25"]["stage1_k"] = 100
            data["rerank_depth"] = 36
            data["training"]["epochs"] = 4
            data["finetune"]["epochs"] = 2
            config = parse_config(data, base_dir=tmp_path)
            PipelineRunner(config).run_recipe("consistency")
            return {
                str(p.relative_to(out_dir)): p.read_bytes()
                for p in sorted(out_dir.rglob("*"))
                if p.suffix in (".trec", ".bin")
            }

        first = run_once(tmp_path / "run_a")
        second = run_once(tmp_path / "run_b")
        assert set(first) == set(second)
        assert any(name.endswith(".trec") for name in first)
        assert any(name.endswith(".bin") for name in first)
        for name in first:
            assert first[name] == second[name], name
