"""End-to-end orchestration: validated config, resumable stages, recipes.

Every stage writes its artifacts plus an entry in ``manifest.json``; a stage
whose artifacts already exist is skipped, so deleting only downstream files
and re-running reproduces them byte-for-byte.  A lock file rejects concurrent
invocations on the same output directory.

Recipes:

* ``baseline``    generate, keep the top fraction by log-prob, train per
                  seed, re-rank, evaluate against BM25.
* ``consistency`` baseline plus a consistency-check pass whose surviving
                  queries fine-tune each seed's model before re-ranking.
* ``all-domain``  one model pretrained on every collection's unfiltered
                  queries, then consistency fine-tuning per collection.
* ``eval-only``   score an existing run or checkpoint without training.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .bm25 import Bm25Params, Bm25Retriever, ScoredDoc, TokenizerConfig, tokenize
from .consistency import ConsistencyConfig, check_flags
from .corpus import (
    Corpus,
    CorpusError,
    QueryRecord,
    ingest_corpus,
    read_qrels,
    read_queries,
    read_run,
    write_run,
)
from .evaluation import (
    EvaluationError,
    PerQueryScores,
    SeedRunSet,
    aggregate_gains,
    compute_metric,
    default_threshold,
    paired_t_test,
    parse_metric,
    seed_average,
)
from .querygen import (
    GeneratedQuery,
    HttpGenerationClient,
    filter_top_fraction,
    generate_queries,
    read_checked_queries,
    read_generated_queries,
    read_prompt_examples,
    write_checked_queries,
    write_generated_queries,
)
from .ranker import (
    FrozenScorer,
    RankerConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_single,
    TrainingCollection,
)
from .consistency import all_domain_pretrain, finetune_on_checked

SCHEMA_VERSION = 1
RECIPES = ("baseline", "consistency", "all-domain", "eval-only")


class ConfigError(Exception):
    """Invalid or unusable configuration (CLI exit code 2)."""


class StageError(Exception):
    """A pipeline stage could not run or failed (CLI exit code 3)."""


@dataclass(frozen=True)
class CollectionConfig:
    name: str
    corpus: Path
    corpus_format: str = "jsonl"
    queries: Path | None = None
    queries_format: str = "jsonl"
    qrels: Path | None = None
    offline_queries: Path | None = None
    prompt_examples: Path | None = None


@dataclass(frozen=True)
class GenerationSettings:
    num_queries: int = 100
    keep_fraction: float = 0.10
    endpoint: str | None = None
    seed: int = 0


@dataclass(frozen=True)
class EvaluationSettings:
    metrics: tuple[str, ...] = ("ndcg@10",)
    significance_threshold: float | None = None


@dataclass(frozen=True)
class ConsistencySettings:
    config: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    checker_checkpoint: Path | None = None


@dataclass(frozen=True)
class EvalOnlySettings:
    run: Path | None = None
    checkpoint: Path | None = None


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: Path
    collections: tuple[CollectionConfig, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    bm25: Bm25Params = field(default_factory=Bm25Params)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    stage1_k: int = 1000
    rerank_depth: int = 100
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    finetune: TrainConfig | None = None
    consistency: ConsistencySettings = field(default_factory=ConsistencySettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    eval_only: EvalOnlySettings = field(default_factory=EvalOnlySettings)

    def finetune_config(self) -> TrainConfig:
        return self.finetune if self.finetune is not None else self.training


def _take(section: dict, key: str, default=None):
    return section.pop(key, default)


def _no_extras(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(section))}")


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    return path


def read_config_data(path) -> tuple[dict, Path]:
    """Raw config JSON and the directory relative paths resolve against."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid config JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data, path.parent


def load_config(path) -> PipelineConfig:
    """Parse and validate a JSON config; relative paths are taken against the
    config file's directory."""
    data, base_dir = read_config_data(path)
    return parse_config(data, base_dir=base_dir)


def parse_config(data: dict, base_dir: Path) -> PipelineConfig:
    data = json.loads(json.dumps(data))  # defensive deep copy
    version = _take(data, "schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")

    output_dir = _take(data, "output_dir")
    if not output_dir:
        raise ConfigError("config needs an output_dir")
    output_dir = _resolve(base_dir, output_dir)

    raw_collections = _take(data, "collections")
    if not raw_collections or not isinstance(raw_collections, list):
        raise ConfigError("config needs a non-empty collections list")
    collections = []
    seen_names: set[str] = set()
    for i, raw in enumerate(raw_collections):
        if not isinstance(raw, dict):
            raise ConfigError(f"collections[{i}] must be an object")
        raw = dict(raw)
        name = _take(raw, "name")
        if not name or not all(c.isalnum() or c in "_-" for c in name):
            raise ConfigError(f"collections[{i}] needs a filesystem-safe name")
        if name in seen_names:
            raise ConfigError(f"duplicate collection name {name!r}")
        seen_names.add(name)
        corpus = _take(raw, "corpus")
        if not corpus:
            raise ConfigError(f"collection {name!r} needs a corpus path")
        coll = CollectionConfig(
            name=name,
            corpus=_resolve(base_dir, corpus),
            corpus_format=_take(raw, "corpus_format", "jsonl"),
            queries=_resolve(base_dir, _take(raw, "queries")),
            queries_format=_take(raw, "queries_format", "jsonl"),
            qrels=_resolve(base_dir, _take(raw, "qrels")),
            offline_queries=_resolve(base_dir, _take(raw, "offline_queries")),
            prompt_examples=_resolve(base_dir, _take(raw, "prompt_examples")),
        )
        _no_extras(raw, f"collections[{i}]")
        if coll.corpus_format not in ("jsonl", "tsv"):
            raise ConfigError(f"collection {name!r}: unknown corpus_format")
        collections.append(coll)

    seeds = _take(data, "seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers")
    if any(not isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    bm25_raw = dict(_take(data, "bm25", {}))
    try:
        bm25 = Bm25Params(
            k1=float(_take(bm25_raw, "k1", 0.9)), b=float(_take(bm25_raw, "b", 0.4))
        )
    except Exception as exc:
        raise ConfigError(f"bad bm25 section: {exc}") from exc
    stage1_k = _take(bm25_raw, "stage1_k", 1000)
    tokenizer = TokenizerConfig(
        remove_stopwords=bool(_take(bm25_raw, "remove_stopwords", False)),
        stem=bool(_take(bm25_raw, "stem", False)),
    )
    _no_extras(bm25_raw, "bm25")

    rerank_depth = _take(data, "rerank_depth", 100)
    if not isinstance(rerank_depth, int) or rerank_depth < 1:
        raise ConfigError("rerank_depth must be a positive integer")
    if not isinstance(stage1_k, int) or stage1_k < 1:
        raise ConfigError("bm25.stage1_k must be a positive integer")
    if rerank_depth > stage1_k:
        raise ConfigError("rerank_depth cannot exceed bm25.stage1_k")

    gen_raw = dict(_take(data, "generation", {}))
    generation = GenerationSettings(
        num_queries=int(_take(gen_raw, "num_queries", 100)),
        keep_fraction=float(_take(gen_raw, "keep_fraction", 0.10)),
        endpoint=_take(gen_raw, "endpoint"),
        seed=int(_take(gen_raw, "seed", 0)),
    )
    _no_extras(gen_raw, "generation")
    if not (0.0 < generation.keep_fraction <= 1.0):
        raise ConfigError("generation.keep_fraction must lie in (0, 1]")

    def parse_training(section_name: str, raw: dict | None) -> TrainConfig | None:
        if raw is None:
            return None
        raw = dict(raw)
        defaults = TrainConfig()
        try:
            cfg = TrainConfig(
                epochs=int(_take(raw, "epochs", defaults.epochs)),
                accumulation_steps=int(
                    _take(raw, "accumulation_steps", defaults.accumulation_steps)
                ),
                num_negatives=int(_take(raw, "num_negatives", defaults.num_negatives)),
                negative_pool_depth=int(
                    _take(raw, "negative_pool_depth", defaults.negative_pool_depth)
                ),
                head_lr=float(_take(raw, "head_lr", defaults.head_lr)),
                embedding_lr=float(_take(raw, "embedding_lr", defaults.embedding_lr)),
                weight_decay=float(_take(raw, "weight_decay", defaults.weight_decay)),
                warmup_fraction=float(
                    _take(raw, "warmup_fraction", defaults.warmup_fraction)
                ),
            )
        except ValueError as exc:
            raise ConfigError(f"bad {section_name} section: {exc}") from exc
        _no_extras(raw, section_name)
        return cfg

    training_raw = dict(_take(data, "training", {}))
    ranker_kwargs = {}
    for key, cast in (("dim", int), ("hash_bits", int), ("init_scale", float)):
        if key in training_raw:
            ranker_kwargs[key] = cast(training_raw.pop(key))
    try:
        ranker = RankerConfig(**ranker_kwargs)
    except ValueError as exc:
        raise ConfigError(f"bad training section: {exc}") from exc
    training = parse_training("training", training_raw)
    finetune = parse_training("finetune", _take(data, "finetune"))

    cons_raw = dict(_take(data, "consistency", {}))
    try:
        cons_config = ConsistencyConfig(
            k=int(_take(cons_raw, "k", 3)),
            candidate_pool_depth=int(_take(cons_raw, "candidate_pool_depth", 100)),
        )
    except Exception as exc:
        raise ConfigError(f"bad consistency section: {exc}") from exc
    consistency = ConsistencySettings(
        config=cons_config,
        checker_checkpoint=_resolve(base_dir, _take(cons_raw, "checker_checkpoint")),
    )
    _no_extras(cons_raw, "consistency")

    eval_raw = dict(_take(data, "evaluation", {}))
    metrics = tuple(_take(eval_raw, "metrics", ["ndcg@10"]))
    threshold = _take(eval_raw, "significance_threshold")
    if threshold is not None:
        threshold = float(threshold)
        if not (0.0 < threshold < 1.0):
            raise ConfigError("evaluation.significance_threshold must lie in (0, 1)")
    _no_extras(eval_raw, "evaluation")
    for spec in metrics:
        try:
            parse_metric(spec)
        except EvaluationError as exc:
            raise ConfigError(str(exc)) from exc
    evaluation = EvaluationSettings(metrics=metrics, significance_threshold=threshold)

    eo_raw = dict(_take(data, "eval_only", {}))
    eval_only = EvalOnlySettings(
        run=_resolve(base_dir, _take(eo_raw, "run")),
        checkpoint=_resolve(base_dir, _take(eo_raw, "checkpoint")),
    )
    _no_extras(eo_raw, "eval_only")

    _no_extras(data, "config")

    config = PipelineConfig(
        output_dir=output_dir,
        collections=tuple(collections),
        seeds=tuple(seeds),
        bm25=bm25,
        tokenizer=tokenizer,
        stage1_k=stage1_k,
        rerank_depth=rerank_depth,
        generation=generation,
        training=training,
        ranker=ranker,
        finetune=finetune,
        consistency=consistency,
        evaluation=evaluation,
        eval_only=eval_only,
    )
    validate_config(config)
    return config


def validate_config(config: PipelineConfig) -> None:
    for coll in config.collections:
        for label, p in (
            ("corpus", coll.corpus),
            ("queries", coll.queries),
            ("qrels", coll.qrels),
            ("offline_queries", coll.offline_queries),
            ("prompt_examples", coll.prompt_examples),
        ):
            if p is not None and not Path(p).is_file():
                raise ConfigError(
                    f"collection {coll.name!r}: {label} file {p} does not exist"
                )
    if config.consistency.checker_checkpoint is not None:
        if not Path(config.consistency.checker_checkpoint).is_file():
            raise ConfigError(
                f"checker checkpoint {config.consistency.checker_checkpoint} does not exist"
            )


def config_to_dict(config: PipelineConfig) -> dict:
    """Normalized, JSON-ready view (used for the copy kept in the output dir)."""

    def opt(p):
        return str(p) if p is not None else None

    def train_dict(t: TrainConfig) -> dict:
        return {
            "epochs": t.epochs,
            "accumulation_steps": t.accumulation_steps,
            "num_negatives": t.num_negatives,
            "negative_pool_depth": t.negative_pool_depth,
            "head_lr": t.head_lr,
            "embedding_lr": t.embedding_lr,
            "weight_decay": t.weight_decay,
            "warmup_fraction": t.warmup_fraction,
        }

    return {
        "schema_version": SCHEMA_VERSION,
        "output_dir": str(config.output_dir),
        "seeds": list(config.seeds),
        "bm25": {
            "k1": config.bm25.k1,
            "b": config.bm25.b,
            "stage1_k": config.stage1_k,
            "remove_stopwords": config.tokenizer.remove_stopwords,
            "stem": config.tokenizer.stem,
        },
        "rerank_depth": config.rerank_depth,
        "generation": {
            "num_queries": config.generation.num_queries,
            "keep_fraction": config.generation.keep_fraction,
            "endpoint": config.generation.endpoint,
            "seed": config.generation.seed,
        },
        "training": {
            **train_dict(config.training),
            "dim": config.ranker.dim,
            "hash_bits": config.ranker.hash_bits,
            "init_scale": config.ranker.init_scale,
        },
        "finetune": train_dict(config.finetune) if config.finetune else None,
        "consistency": {
            "k": config.consistency.config.k,
            "candidate_pool_depth": config.consistency.config.candidate_pool_depth,
            "checker_checkpoint": opt(config.consistency.checker_checkpoint),
        },
        "evaluation": {
            "metrics": list(config.evaluation.metrics),
            "significance_threshold": config.evaluation.significance_threshold,
        },
        "eval_only": {
            "run": opt(config.eval_only.run),
            "checkpoint": opt(config.eval_only.checkpoint),
        },
        "collections": [
            {
                "name": c.name,
                "corpus": str(c.corpus),
                "corpus_format": c.corpus_format,
                "queries": opt(c.queries),
                "queries_format": c.queries_format,
                "qrels": opt(c.qrels),
                "offline_queries": opt(c.offline_queries),
                "prompt_examples": opt(c.prompt_examples),
            }
            for c in config.collections
        ],
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


class Workspace:
    """Output-directory layout, stage manifest, and the invocation lock."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"
        self.lock_path = self.root / ".lock"

    def _manifest(self) -> dict:
        if self.manifest_path.is_file():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"stages": {}}

    def stage_done(self, stage: str) -> bool:
        entry = self._manifest()["stages"].get(stage)
        if entry is None:
            return False
        return all((self.root / rel).is_file() for rel in entry["artifacts"])

    def mark_done(self, stage: str, artifacts: Sequence[Path]) -> None:
        manifest = self._manifest()
        rels = [str(Path(a).relative_to(self.root)) for a in artifacts]
        manifest["stages"][stage] = {"artifacts": sorted(rels)}
        _write_json(self.manifest_path, manifest)

    def recorded_recipe(self) -> str | None:
        return self._manifest().get("recipe")

    def record_recipe(self, recipe: str) -> None:
        manifest = self._manifest()
        previous = manifest.get("recipe")
        if previous is not None and previous != recipe:
            raise StageError(
                f"output directory already holds a {previous!r} run; "
                f"use a fresh directory for recipe {recipe!r}"
            )
        manifest["recipe"] = recipe
        _write_json(self.manifest_path, manifest)

    def require(self, path: Path, producer: str) -> Path:
        if not Path(path).is_file():
            raise StageError(
                f"missing upstream artifact {path}; rerun stage {producer!r}"
            )
        return Path(path)

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"output directory {self.root} is locked by another invocation "
                f"(remove {self.lock_path} if that run is dead)"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            try:
                os.unlink(self.lock_path)
            except FileNotFoundError:
                pass


@dataclass
class CollectionRuntime:
    config: CollectionConfig
    corpus: Corpus
    retriever: Bm25Retriever
    _queries: list[QueryRecord] | None = None
    _qrels: dict | None = None

    def queries(self) -> list[QueryRecord]:
        if self._queries is None:
            if self.config.queries is None:
                raise StageError(
                    f"collection {self.config.name!r} has no queries file configured"
                )
            self._queries = read_queries(self.config.queries, self.config.queries_format)
        return self._queries

    def qrels(self) -> dict:
        if self._qrels is None:
            if self.config.qrels is None:
                raise StageError(
                    f"collection {self.config.name!r} has no qrels file configured"
                )
            self._qrels = read_qrels(self.config.qrels)
        return self._qrels


def rerank(
    scorer: Callable[[str, object], float],
    retriever: Bm25Retriever,
    queries: Sequence[QueryRecord],
    depth: int = 100,
) -> dict[str, list[ScoredDoc]]:
    """Re-sort each query's BM25 candidates by the scorer.

    Candidates come from the retriever's standard path (two-stage when titles
    exist) truncated at ``depth``; ties in scorer output break by doc_id, so a
    constant scorer yields doc_id order.
    """
    runs: dict[str, list[ScoredDoc]] = {}
    corpus = retriever.corpus
    for query in queries:
        candidates = retriever.retrieve(
            retriever.tokenizer(query.bm25_text()), depth
        )
        rescored = [
            ScoredDoc(c.doc_id, float(scorer(query.ranker_text(), corpus.get(c.doc_id))))
            for c in candidates
        ]
        rescored.sort(key=lambda d: (-d.score, d.doc_id))
        runs[query.query_id] = rescored
    return runs


class PipelineRunner:
    """Executes stages against one validated config."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.ws = Workspace(config.output_dir)
        self._runtimes: dict[str, CollectionRuntime] = {}

    # ---- layout -----------------------------------------------------------

    def coll_dir(self, coll: CollectionConfig) -> Path:
        return self.ws.root / coll.name

    def seed_dir(self, coll: CollectionConfig, seed: int) -> Path:
        return self.coll_dir(coll) / f"seed_{seed}"

    def pretrain_dir(self, seed: int) -> Path:
        return self.ws.root / "all_domain" / f"seed_{seed}"

    # ---- shared state -----------------------------------------------------

    def runtime(self, coll: CollectionConfig) -> CollectionRuntime:
        rt = self._runtimes.get(coll.name)
        if rt is None:
            try:
                corpus = ingest_corpus(coll.corpus, coll.corpus_format)
            except CorpusError as exc:
                raise StageError(f"cannot ingest corpus for {coll.name!r}: {exc}") from exc
            retriever = Bm25Retriever(
                corpus,
                params=self.config.bm25,
                stage1_k=self.config.stage1_k,
                tokenizer=self.config.tokenizer.tokenize,
            )
            rt = CollectionRuntime(config=coll, corpus=corpus, retriever=retriever)
            self._runtimes[coll.name] = rt
        return rt

    # ---- stages -----------------------------------------------------------

    def stage_generate(self, coll: CollectionConfig) -> Path:
        stage = f"{coll.name}/generate"
        out = self.coll_dir(coll) / "generated.jsonl"
        if self.ws.stage_done(stage):
            return out
        rt = self.runtime(coll)
        if coll.offline_queries is not None:
            queries = read_generated_queries(coll.offline_queries)
        else:
            if self.config.generation.endpoint is None:
                raise StageError(
                    f"collection {coll.name!r} has neither offline_queries nor a "
                    "generation endpoint"
                )
            if coll.prompt_examples is None:
                raise StageError(
                    f"collection {coll.name!r} needs prompt_examples for live generation"
                )
            template = read_prompt_examples(coll.prompt_examples)
            client = HttpGenerationClient(self.config.generation.endpoint)
            queries = generate_queries(
                rt.corpus,
                template,
                client,
                self.config.generation.num_queries,
                self.config.generation.seed,
            )
        for q in queries:
            if q.source_doc_id not in rt.corpus:
                raise StageError(
                    f"generated query names unknown source document {q.source_doc_id!r}"
                )
        out.parent.mkdir(parents=True, exist_ok=True)
        write_generated_queries(queries, out)
        self.ws.mark_done(stage, [out])
        return out

    def stage_filter(self, coll: CollectionConfig) -> Path:
        stage = f"{coll.name}/filter"
        out = self.coll_dir(coll) / "filtered.jsonl"
        if self.ws.stage_done(stage):
            return out
        generated = self.ws.require(
            self.coll_dir(coll) / "generated.jsonl", f"{coll.name}/generate"
        )
        queries = read_generated_queries(generated)
        kept = filter_top_fraction(queries, self.config.generation.keep_fraction)
        write_generated_queries(kept, out)
        self.ws.mark_done(stage, [out])
        return out

    def stage_bm25_run(self, coll: CollectionConfig) -> Path:
        stage = f"{coll.name}/bm25-run"
        out = self.coll_dir(coll) / "run_bm25.trec"
        if self.ws.stage_done(stage):
            return out
        rt = self.runtime(coll)
        runs = {}
        for query in rt.queries():
            ranked = rt.retriever.retrieve(
                rt.retriever.tokenizer(query.bm25_text()), self.config.rerank_depth
            )
            runs[query.query_id] = [(sd.doc_id, sd.score) for sd in ranked]
        out.parent.mkdir(parents=True, exist_ok=True)
        write_run(runs, "bm25", out)
        self.ws.mark_done(stage, [out])
        return out

    def stage_train(self, coll: CollectionConfig, seed: int) -> Path:
        stage = f"{coll.name}/seed_{seed}/train"
        out = self.seed_dir(coll, seed) / "checkpoint_base.bin"
        log_path = self.seed_dir(coll, seed) / "train_log.json"
        if self.ws.stage_done(stage):
            return out
        filtered = self.ws.require(
            self.coll_dir(coll) / "filtered.jsonl", f"{coll.name}/filter"
        )
        queries = read_generated_queries(filtered)
        if not queries:
            raise StageError(f"no filtered queries to train on for {coll.name!r}")
        rt = self.runtime(coll)
        collection = TrainingCollection(corpus=rt.corpus, retriever=rt.retriever)
        examples = [(q.text, q.source_doc_id, 0) for q in queries]
        result = train_single(
            [collection],
            examples,
            self.config.training,
            ranker_config=self.config.ranker,
            seed=seed,
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, out)
        _write_json(
            log_path,
            {
                "epoch_losses": result.epoch_losses,
                "optimizer_steps": result.optimizer_steps,
                "skipped_instances": result.skipped_instances,
            },
        )
        self.ws.mark_done(stage, [out, log_path])
        return out

    def stage_pretrain_all(self, seed: int) -> Path:
        stage = f"all_domain/seed_{seed}/pretrain"
        out = self.pretrain_dir(seed) / "checkpoint_pretrain.bin"
        log_path = self.pretrain_dir(seed) / "pretrain_log.json"
        if self.ws.stage_done(stage):
            return out
        collections = []
        for coll in self.config.collections:
            generated = self.ws.require(
                self.coll_dir(coll) / "generated.jsonl", f"{coll.name}/generate"
            )
            rt = self.runtime(coll)
            collections.append(
                (rt.corpus, rt.retriever, read_generated_queries(generated))
            )
        result = all_domain_pretrain(
            collections, self.config.training, self.config.ranker, seed
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, out)
        _write_json(
            log_path,
            {
                "epoch_losses": result.epoch_losses,
                "optimizer_steps": result.optimizer_steps,
                "skipped_instances": result.skipped_instances,
            },
        )
        self.ws.mark_done(stage, [out, log_path])
        return out

    def stage_check(
        self, coll: CollectionConfig, seed: int, default_checker: Path
    ) -> Path:
        stage = f"{coll.name}/seed_{seed}/check"
        out = self.seed_dir(coll, seed) / "checked.jsonl"
        if self.ws.stage_done(stage):
            return out
        generated = self.ws.require(
            self.coll_dir(coll) / "generated.jsonl", f"{coll.name}/generate"
        )
        checker_path = self.config.consistency.checker_checkpoint or default_checker
        self.ws.require(checker_path, "train (or pretrain-all)")
        queries = read_generated_queries(generated)
        rt = self.runtime(coll)
        scorer = FrozenScorer(load_checkpoint(checker_path))
        flags = check_flags(
            queries, scorer, rt.retriever, rt.corpus, self.config.consistency.config
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        write_checked_queries(queries, flags, out)
        self.ws.mark_done(stage, [out])
        return out

    def stage_finetune(
        self, coll: CollectionConfig, seed: int, init_checkpoint: Path
    ) -> Path:
        stage = f"{coll.name}/seed_{seed}/finetune"
        out = self.seed_dir(coll, seed) / "checkpoint_final.bin"
        log_path = self.seed_dir(coll, seed) / "finetune_log.json"
        if self.ws.stage_done(stage):
            return out
        checked_path = self.ws.require(
            self.seed_dir(coll, seed) / "checked.jsonl", f"{coll.name}/seed_{seed}/check"
        )
        self.ws.require(init_checkpoint, "train (or pretrain-all)")
        checked = [q for q, passed in read_checked_queries(checked_path) if passed]
        rt = self.runtime(coll)
        params = load_checkpoint(init_checkpoint)
        result = finetune_on_checked(
            params, checked, rt.corpus, rt.retriever, self.config.finetune_config(), seed
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.params, out)
        _write_json(
            log_path,
            {
                "checked_queries": len(checked),
                "epoch_losses": result.epoch_losses,
                "optimizer_steps": result.optimizer_steps,
                "skipped_instances": result.skipped_instances,
            },
        )
        self.ws.mark_done(stage, [out, log_path])
        return out

    def stage_rerank(
        self, coll: CollectionConfig, seed: int, checkpoint: Path, producer: str
    ) -> Path:
        stage = f"{coll.name}/seed_{seed}/rerank"
        out = self.seed_dir(coll, seed) / "run_model.trec"
        if self.ws.stage_done(stage):
            return out
        self.ws.require(checkpoint, producer)
        rt = self.runtime(coll)
        scorer = FrozenScorer(load_checkpoint(checkpoint))
        ranked = rerank(scorer, rt.retriever, rt.queries(), self.config.rerank_depth)
        runs = {
            qid: [(sd.doc_id, sd.score) for sd in docs] for qid, docs in ranked.items()
        }
        out.parent.mkdir(parents=True, exist_ok=True)
        write_run(runs, f"model-seed{seed}", out)
        self.ws.mark_done(stage, [out])
        return out

    def stage_eval(
        self, coll: CollectionConfig, model_runs: Mapping[int, Path]
    ) -> Path:
        stage = f"{coll.name}/eval"
        report_path = self.coll_dir(coll) / "report.json"
        summary_path = self.coll_dir(coll) / "summary.txt"
        if self.ws.stage_done(stage):
            return report_path
        bm25_path = self.ws.require(
            self.coll_dir(coll) / "run_bm25.trec", f"{coll.name}/bm25-run"
        )
        rt = self.runtime(coll)
        qrels = rt.qrels()
        bm25_run = read_run(bm25_path)
        seed_runs = {
            seed: read_run(self.ws.require(path, f"{coll.name}/seed_{seed}/rerank"))
            for seed, path in model_runs.items()
        }
        report = evaluate_runs(
            collection=coll.name,
            qrels=qrels,
            bm25_run=bm25_run,
            seed_runs=seed_runs,
            metrics=self.config.evaluation.metrics,
            threshold=self.config.evaluation.significance_threshold,
        )
        _write_json(report_path, report)
        summary_path.write_text(format_summary(report), encoding="utf-8")
        self.ws.mark_done(stage, [report_path, summary_path])
        return report_path

    # ---- recipes ----------------------------------------------------------

    def run_recipe(self, recipe: str) -> Path:
        if recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {recipe!r}; choose from {RECIPES}")
        with self.ws.lock():
            self.ws.record_recipe(recipe)
            _write_json(self.ws.root / "config.json", config_to_dict(self.config))
            if recipe == "eval-only":
                reports = self._run_eval_only()
            elif recipe == "all-domain":
                reports = self._run_all_domain()
            else:
                reports = self._run_single_collection_recipe(recipe)
            gains_path = self._write_gains(reports)
        return gains_path

    def _run_single_collection_recipe(self, recipe: str) -> list[Path]:
        reports = []
        for coll in self.config.collections:
            self.stage_generate(coll)
            self.stage_filter(coll)
            self.stage_bm25_run(coll)
            model_runs: dict[int, Path] = {}
            for seed in self.config.seeds:
                base = self.stage_train(coll, seed)
                if recipe == "consistency":
                    self.stage_check(coll, seed, default_checker=base)
                    final = self.stage_finetune(coll, seed, init_checkpoint=base)
                    producer = f"{coll.name}/seed_{seed}/finetune"
                else:
                    final = base
                    producer = f"{coll.name}/seed_{seed}/train"
                model_runs[seed] = self.stage_rerank(coll, seed, final, producer)
            reports.append(self.stage_eval(coll, model_runs))
        return reports

    def _run_all_domain(self) -> list[Path]:
        for coll in self.config.collections:
            self.stage_generate(coll)
        pretrained = {seed: self.stage_pretrain_all(seed) for seed in self.config.seeds}
        reports = []
        for coll in self.config.collections:
            self.stage_bm25_run(coll)
            model_runs: dict[int, Path] = {}
            for seed in self.config.seeds:
                self.stage_check(coll, seed, default_checker=pretrained[seed])
                final = self.stage_finetune(
                    coll, seed, init_checkpoint=pretrained[seed]
                )
                model_runs[seed] = self.stage_rerank(
                    coll, seed, final, f"{coll.name}/seed_{seed}/finetune"
                )
            reports.append(self.stage_eval(coll, model_runs))
        return reports

    def _run_eval_only(self) -> list[Path]:
        settings = self.config.eval_only
        if settings.run is None and settings.checkpoint is None:
            raise ConfigError("eval-only recipe needs eval_only.run or eval_only.checkpoint")
        reports = []
        for coll in self.config.collections:
            self.stage_bm25_run(coll)
            if settings.run is not None:
                model_run_path = self.ws.require(settings.run, "external run")
            else:
                seed = self.config.seeds[0]
                model_run_path = self.stage_rerank(
                    coll, seed, Path(settings.checkpoint), "external checkpoint"
                )
            stage = f"{coll.name}/eval"
            report_path = self.coll_dir(coll) / "report.json"
            summary_path = self.coll_dir(coll) / "summary.txt"
            if not self.ws.stage_done(stage):
                rt = self.runtime(coll)
                report = evaluate_runs(
                    collection=coll.name,
                    qrels=rt.qrels(),
                    bm25_run=read_run(self.coll_dir(coll) / "run_bm25.trec"),
                    seed_runs={self.config.seeds[0]: read_run(model_run_path)},
                    metrics=self.config.evaluation.metrics,
                    threshold=self.config.evaluation.significance_threshold,
                )
                _write_json(report_path, report)
                summary_path.write_text(format_summary(report), encoding="utf-8")
                self.ws.mark_done(stage, [report_path, summary_path])
            reports.append(report_path)
        return reports

    def _write_gains(self, report_paths: Sequence[Path]) -> Path:
        model_cells: dict[tuple[str, str], float] = {}
        bm25_cells: dict[tuple[str, str], float] = {}
        for path in report_paths:
            report = json.loads(Path(path).read_text(encoding="utf-8"))
            for spec, block in report["metrics"].items():
                key = (report["collection"], spec)
                model_cells[key] = block["model_mean"]
                bm25_cells[key] = block["bm25_mean"]
        gains_path = self.ws.root / "gains.json"
        try:
            gains = aggregate_gains(model_cells, bm25_cells)
        except EvaluationError as exc:
            _write_json(gains_path, {"error": str(exc)})
            return gains_path
        _write_json(
            gains_path,
            {
                "cells": {
                    f"{dataset}:{metric}": ratio
                    for (dataset, metric), ratio in sorted(gains.ratios.items())
                },
                "average_gain": gains.average_gain,
                "win_count": gains.win_count,
            },
        )
        return gains_path


def evaluate_runs(
    collection: str,
    qrels: Mapping[str, Mapping[str, int]],
    bm25_run,
    seed_runs: Mapping[int, dict],
    metrics: Sequence[str],
    threshold: float | None,
) -> dict:
    """Seed-averaged model metrics vs. the BM25 baseline with a paired test."""
    if not seed_runs:
        raise StageError("no model runs to evaluate")
    out_metrics: dict[str, dict] = {}
    seeds = sorted(seed_runs)
    for spec in metrics:
        bm25_scores = compute_metric(bm25_run, qrels, spec)
        grid: dict[tuple[str, int], float] = {}
        for seed in seeds:
            per_query = compute_metric(seed_runs[seed], qrels, spec)
            for qid, value in per_query.values.items():
                grid[(qid, seed)] = value
        averaged = seed_average(SeedRunSet(metric=spec, seeds=list(seeds), values=grid))
        test = paired_t_test(averaged, bm25_scores, threshold)
        out_metrics[spec] = {
            "bm25_mean": bm25_scores.mean(),
            "model_mean": averaged.mean(),
            "per_query_model": dict(sorted(averaged.values.items())),
            "per_query_bm25": dict(sorted(bm25_scores.values.items())),
            "t_statistic": None if test.degenerate else test.t_statistic,
            "p_value": test.p_value,
            "threshold": test.threshold,
            "significant": test.significant,
            "degenerate": test.degenerate,
            "n_queries": test.n_queries,
        }
    return {
        "collection": collection,
        "seeds": seeds,
        "metrics": out_metrics,
    }


def format_summary(report: dict) -> str:
    """Plain-text table: one row per system, one column per metric."""
    specs = list(report["metrics"])
    headers = ["system"] + specs
    bm25_row = ["bm25"] + [
        f"{report['metrics'][s]['bm25_mean']:.4f}" for s in specs
    ]
    model_row = ["model"] + [
        f"{report['metrics'][s]['model_mean']:.4f}"
        + ("*" if report["metrics"][s]["significant"] else "")
        for s in specs
    ]
    widths = [
        max(len(headers[i]), len(bm25_row[i]), len(model_row[i]))
        for i in range(len(headers))
    ]

    def fmt(row):
        return "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()

    lines = [
        f"collection: {report['collection']} (seeds {report['seeds']})",
        fmt(headers),
        fmt(["-" * w for w in widths]),
        fmt(bm25_row),
        fmt(model_row),
        "* significant under the paired t-test threshold",
    ]
    return "\n".join(lines) + "\n"
