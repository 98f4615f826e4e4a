"""Command-line entry points for the pipeline stages and recipes.

Exit codes: 0 on success, 2 for configuration problems, 3 for stage failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bm25 import InvertedIndex, save_index
from .corpus import read_qrels, read_run
from .evaluation import compute_metric, paired_t_test
from .pipeline import (
    RECIPES,
    ConfigError,
    PipelineConfig,
    PipelineRunner,
    StageError,
    parse_config,
    read_config_data,
)

logger = logging.getLogger(__name__)


def _add_config_arg(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to the JSON config file")


def _set_nested(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {key} is not a section")
    node[keys[-1]] = value


# (cli flag attribute, config path, cast)
_OVERRIDES = [
    ("k1", "bm25.k1", float),
    ("b", "bm25.b", float),
    ("stage1_k", "bm25.stage1_k", int),
    ("rerank_k", "rerank_depth", int),
    ("num_queries", "generation.num_queries", int),
    ("keep_fraction", "generation.keep_fraction", float),
    ("endpoint", "generation.endpoint", str),
    ("gen_seed", "generation.seed", int),
    ("epochs", "training.epochs", int),
    ("accum_steps", "training.accumulation_steps", int),
    ("dim", "training.dim", int),
    ("hash_bits", "training.hash_bits", int),
    ("head_lr", "training.head_lr", float),
    ("embedding_lr", "training.embedding_lr", float),
    ("k", "consistency.k", int),
    ("pool_depth", "consistency.candidate_pool_depth", int),
    ("checker_model", "consistency.checker_checkpoint", str),
    ("threshold", "evaluation.significance_threshold", float),
]


def _load_config(args) -> PipelineConfig:
    data, base_dir = read_config_data(args.config)
    for attr, dotted, cast in _OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            _set_nested(data, dotted, cast(value))
    seeds = getattr(args, "seeds", None)
    if seeds is not None:
        try:
            data["seeds"] = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad --seeds value {seeds!r}") from None
    metrics = getattr(args, "metric", None)
    if metrics:
        _set_nested(data, "evaluation.metrics", list(metrics))
    offline = getattr(args, "offline_file", None)
    if offline is not None:
        colls = data.get("collections")
        if not isinstance(colls, list) or len(colls) != 1:
            raise ConfigError(
                "--offline-file requires a single-collection config; "
                "set offline_queries per collection otherwise"
            )
        colls[0]["offline_queries"] = offline
    return parse_config(data, base_dir)


def _seed_list(config: PipelineConfig, args) -> list[int]:
    return list(config.seeds)


def cmd_index(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            rt = runner.runtime(coll)
            out_dir = runner.coll_dir(coll)
            out_dir.mkdir(parents=True, exist_ok=True)
            artifacts = [out_dir / "index_combined.bin"]
            save_index(rt.retriever.combined, artifacts[0])
            if rt.retriever.is_two_stage:
                artifacts.append(out_dir / "index_title.bin")
                save_index(rt.retriever.title_index, artifacts[1])
                artifacts.append(out_dir / "index_body.bin")
                save_index(rt.retriever.body_index, artifacts[2])
            runner.ws.mark_done(f"{coll.name}/index", artifacts)
            print(f"indexed {coll.name}: {len(rt.corpus)} documents")
    return 0


def cmd_generate(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            path = runner.stage_generate(coll)
            print(f"{coll.name}: generated queries at {path}")
    return 0


def cmd_filter(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            path = runner.stage_filter(coll)
            print(f"{coll.name}: filtered queries at {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            for seed in _seed_list(config, args):
                path = runner.stage_train(coll, seed)
                print(f"{coll.name} seed {seed}: checkpoint at {path}")
    return 0


def cmd_check(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            for seed in _seed_list(config, args):
                base = runner.seed_dir(coll, seed) / "checkpoint_base.bin"
                path = runner.stage_check(coll, seed, default_checker=base)
                print(f"{coll.name} seed {seed}: checked queries at {path}")
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            for seed in _seed_list(config, args):
                base = runner.seed_dir(coll, seed) / "checkpoint_base.bin"
                path = runner.stage_finetune(coll, seed, init_checkpoint=base)
                print(f"{coll.name} seed {seed}: fine-tuned checkpoint at {path}")
    return 0


def cmd_pretrain_all(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            runner.stage_generate(coll)
        for seed in _seed_list(config, args):
            path = runner.stage_pretrain_all(seed)
            print(f"seed {seed}: pretrained checkpoint at {path}")
    return 0


def cmd_rerank(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            for seed in _seed_list(config, args):
                if args.checkpoint is not None:
                    ckpt = Path(args.checkpoint)
                    producer = "external checkpoint"
                else:
                    final = runner.seed_dir(coll, seed) / "checkpoint_final.bin"
                    base = runner.seed_dir(coll, seed) / "checkpoint_base.bin"
                    if final.is_file():
                        ckpt, producer = final, f"{coll.name}/seed_{seed}/finetune"
                    else:
                        ckpt, producer = base, f"{coll.name}/seed_{seed}/train"
                path = runner.stage_rerank(coll, seed, ckpt, producer)
                print(f"{coll.name} seed {seed}: run at {path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    with runner.ws.lock():
        for coll in config.collections:
            runner.stage_bm25_run(coll)
            model_runs = {
                seed: runner.seed_dir(coll, seed) / "run_model.trec"
                for seed in _seed_list(config, args)
            }
            report = runner.stage_eval(coll, model_runs)
            print((runner.coll_dir(coll) / "summary.txt").read_text(), end="")
            print(f"report: {report}")
    return 0


def cmd_significance(args) -> int:
    qrels = read_qrels(args.qrels)
    run_a = read_run(args.run_a)
    run_b = read_run(args.run_b)
    scores_a = compute_metric(run_a, qrels, args.metric)
    scores_b = compute_metric(run_b, qrels, args.metric)
    result = paired_t_test(scores_a, scores_b, args.threshold)
    payload = {
        "metric": args.metric,
        "mean_a": scores_a.mean(),
        "mean_b": scores_b.mean(),
        "t_statistic": None if result.degenerate else result.t_statistic,
        "p_value": result.p_value,
        "threshold": result.threshold,
        "significant": result.significant,
        "degenerate": result.degenerate,
        "n_queries": result.n_queries,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_run_recipe(args) -> int:
    config = _load_config(args)
    runner = PipelineRunner(config)
    gains = runner.run_recipe(args.recipe)
    for coll in config.collections:
        summary = runner.coll_dir(coll) / "summary.txt"
        if summary.is_file():
            print(summary.read_text(), end="")
    print(f"gain summary: {gains}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthrank",
        description="Train and evaluate re-rankers on synthetic queries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("index", cmd_index, "build and serialize BM25 indexes")
    _add_config_arg(p)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)

    p = add("generate", cmd_generate, "generate synthetic queries")
    _add_config_arg(p)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--endpoint")
    p.add_argument("--offline-file")
    p.add_argument("--gen-seed", type=int)

    p = add("filter", cmd_filter, "keep the top queries by average log-prob")
    _add_config_arg(p)
    p.add_argument("--keep-fraction", type=float)

    def add_training_flags(p):
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--epochs", type=int)
        p.add_argument("--accum-steps", type=int)
        p.add_argument("--dim", type=int)
        p.add_argument("--hash-bits", type=int)
        p.add_argument("--head-lr", type=float)
        p.add_argument("--embedding-lr", type=float)

    p = add("train", cmd_train, "train one model per seed on filtered queries")
    _add_config_arg(p)
    add_training_flags(p)

    p = add("check", cmd_check, "consistency-check generated queries")
    _add_config_arg(p)
    p.add_argument("--k", type=int)
    p.add_argument("--pool-depth", type=int)
    p.add_argument("--checker-model")
    p.add_argument("--seeds")

    p = add("finetune", cmd_finetune, "fine-tune on the checked subset")
    _add_config_arg(p)
    add_training_flags(p)

    p = add("pretrain-all", cmd_pretrain_all, "train on all collections' queries")
    _add_config_arg(p)
    add_training_flags(p)

    p = add("rerank", cmd_rerank, "re-rank BM25 candidates with a checkpoint")
    _add_config_arg(p)
    p.add_argument("--rerank-k", type=int)
    p.add_argument("--stage1-k", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--seeds")

    p = add("eval", cmd_eval, "evaluate model runs against the BM25 baseline")
    _add_config_arg(p)
    p.add_argument("--metric", action="append")
    p.add_argument("--threshold", type=float)
    p.add_argument("--seeds")

    p = add("significance", cmd_significance, "paired t-test between two runs")
    p.add_argument("--qrels", required=True)
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--threshold", type=float)

    p = add("run-recipe", cmd_run_recipe, "run a full recipe end to end")
    _add_config_arg(p)
    p.add_argument("--recipe", required=True, choices=RECIPES)
    p.add_argument("--seeds")
    p.add_argument("--offline-file")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # surface everything else as a stage failure
        logger.exception("unhandled failure")
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
