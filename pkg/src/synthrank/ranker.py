"""Hashed-feature re-ranker: scoring, InfoNCE training, AdamW with warmup.

The model embeds three feature families of a (query, document) pair into a
hashed table: query unigrams, document unigrams, and exact-match indicators
for query terms that occur in the document.  The score is a linear head over
the count-weighted mean of the feature embeddings, plus a bias.

Training minimizes InfoNCE over one positive and a handful of BM25-sampled
negatives, simulating a batch of 16 through gradient accumulation.  The AdamW
step uses decoupled multiplicative weight decay and two learning-rate groups
(head vs. embeddings) driven by one triangular warmup schedule.

Embedding rows are created lazily with a deterministic per-bucket seed, so a
training run is a pure function of (seed, data).  Read-only scoring never
materializes rows into the parameter object; only optimizer updates do.  That
keeps checkpoint bytes independent of whatever was scored along the way.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .bm25 import Bm25Retriever, tokenize
from .corpus import Corpus, Document

logger = logging.getLogger(__name__)

MAX_QUERY_TOKENS = 32
MAX_DOC_TOKENS = 477

_HEAD_STREAM = 1 << 40  # disjoint from bucket ids, which fit in hash_bits


class OptimizerError(Exception):
    """Bad gradients or misconfigured optimizer state."""


class NegativePoolError(Exception):
    """Candidate pool too small to draw the requested negatives."""


class TrainingError(Exception):
    """Invalid training inputs."""


def truncate_inputs(
    query_tokens: Sequence[str], doc_tokens: Sequence[str]
) -> tuple[list[str], list[str]]:
    """Keep the first 32 query tokens and first 477 document tokens."""
    return list(query_tokens[:MAX_QUERY_TOKENS]), list(doc_tokens[:MAX_DOC_TOKENS])


@lru_cache(maxsize=1 << 18)
def _feature_hash(kind: str, token: str) -> int:
    digest = hashlib.blake2b(f"{kind}\x1f{token}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def extract_features(
    query_tokens: Sequence[str], doc_tokens: Sequence[str], hash_bits: int
) -> dict[int, int]:
    """Bucketed feature counts for a (query, document) pair.

    Inputs are expected to be truncated already.  Bucket insertion order is
    deterministic (query order, then document order, then match order), which
    keeps downstream float accumulation reproducible.
    """
    mask = (1 << hash_bits) - 1
    feats: dict[int, int] = {}

    def bump(kind: str, token: str) -> None:
        h = _feature_hash(kind, token) & mask
        feats[h] = feats.get(h, 0) + 1

    for token in query_tokens:
        bump("q", token)
    for token in doc_tokens:
        bump("d", token)
    doc_vocab = set(doc_tokens)
    for token in dict.fromkeys(query_tokens):
        if token in doc_vocab:
            bump("m", token)
    return feats


@dataclass(frozen=True)
class RankerConfig:
    dim: int = 64
    hash_bits: int = 20
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not (1 <= self.hash_bits <= 30):
            raise ValueError(f"hash_bits must lie in [1, 30], got {self.hash_bits}")
        if not (self.init_scale >= 0 and math.isfinite(self.init_scale)):
            raise ValueError(f"init_scale must be finite and >= 0")


class RankerParams:
    """Model parameters: linear head, bias, and sparse embedding rows.

    ``embeddings`` holds only rows the optimizer has materialized; any other
    bucket reads as its deterministic seeded initial vector.
    """

    def __init__(
        self,
        config: RankerConfig,
        seed: int,
        head: np.ndarray,
        bias: float,
        embeddings: dict[int, np.ndarray],
    ):
        self.config = config
        self.seed = seed
        self.head = head
        self.bias = bias
        self.embeddings = embeddings

    @classmethod
    def initialize(cls, config: RankerConfig, seed: int) -> "RankerParams":
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, _HEAD_STREAM])
        head = rng.standard_normal(config.dim) * config.init_scale
        return cls(config, seed, head, 0.0, {})

    def init_vector(self, bucket: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, bucket])
        return rng.standard_normal(self.config.dim) * self.config.init_scale

    def embedding_view(
        self, bucket: int, memo: dict[int, np.ndarray] | None = None
    ) -> np.ndarray:
        """Read a row without materializing it into the parameters."""
        vec = self.embeddings.get(bucket)
        if vec is not None:
            return vec
        if memo is not None:
            vec = memo.get(bucket)
            if vec is None:
                vec = self.init_vector(bucket)
                memo[bucket] = vec
            return vec
        return self.init_vector(bucket)

    def ensure_embedding(self, bucket: int) -> np.ndarray:
        """Materialize a row so the optimizer can update it in place."""
        vec = self.embeddings.get(bucket)
        if vec is None:
            vec = self.init_vector(bucket)
            self.embeddings[bucket] = vec
        return vec

    def copy(self) -> "RankerParams":
        return RankerParams(
            self.config,
            self.seed,
            self.head.copy(),
            self.bias,
            {b: v.copy() for b, v in self.embeddings.items()},
        )


def _pool_features(
    params: RankerParams,
    feats: Mapping[int, int],
    memo: dict[int, np.ndarray] | None,
) -> tuple[np.ndarray, int]:
    pooled = np.zeros(params.config.dim)
    total = 0
    for bucket, count in feats.items():
        pooled += count * params.embedding_view(bucket, memo)
        total += count
    if total:
        pooled /= total
    return pooled, total


def score(params: RankerParams, query_text: str, doc_text: str) -> float:
    """Score one pair from raw text; a feature-less pair scores the bias."""
    q_tokens, d_tokens = truncate_inputs(tokenize(query_text), tokenize(doc_text))
    feats = extract_features(q_tokens, d_tokens, params.config.hash_bits)
    pooled, _ = _pool_features(params, feats, None)
    return float(params.head @ pooled + params.bias)


class FrozenScorer:
    """Callable ``(query_text, Document) -> float`` over fixed parameters.

    Caches the scalar weight ``head . embedding`` per bucket, which makes
    re-ranking a candidate pool linear in token counts.
    """

    def __init__(self, params: RankerParams):
        self.params = params
        self._weights: dict[int, float] = {}
        self._memo: dict[int, np.ndarray] = {}

    def _weight(self, bucket: int) -> float:
        w = self._weights.get(bucket)
        if w is None:
            w = float(self.params.head @ self.params.embedding_view(bucket, self._memo))
            self._weights[bucket] = w
            self._memo.pop(bucket, None)
        return w

    def score_text(self, query_text: str, doc_text: str) -> float:
        q_tokens, d_tokens = truncate_inputs(tokenize(query_text), tokenize(doc_text))
        feats = extract_features(q_tokens, d_tokens, self.params.config.hash_bits)
        total = 0
        acc = 0.0
        for bucket, count in feats.items():
            acc += count * self._weight(bucket)
            total += count
        if not total:
            return float(self.params.bias)
        return acc / total + float(self.params.bias)

    def __call__(self, query_text: str, doc: Document) -> float:
        return self.score_text(query_text, doc.full_text)


def infonce_loss(s_pos: float, s_negs: Sequence[float]) -> float:
    """Contrastive loss of one positive against its negatives; never negative,
    and exactly ln(1 + len(s_negs)) when all scores tie."""
    scores = [s_pos, *s_negs]
    m = max(scores)
    z = math.fsum(math.exp(s - m) for s in scores)
    return float(-(s_pos - m) + math.log(z))


@dataclass
class Gradients:
    head: np.ndarray
    bias: float
    embeddings: dict[int, np.ndarray]


def _instance_forward_backward(
    params: RankerParams,
    query_tokens: Sequence[str],
    doc_token_lists: Sequence[Sequence[str]],
    memo: dict[int, np.ndarray] | None,
) -> tuple[float, np.ndarray, float, dict[int, float]]:
    """Loss plus gradients for one instance; embedding gradients are returned
    as scalar coefficients of the (fixed) head vector."""
    feature_sets = [
        extract_features(query_tokens, d_tokens, params.config.hash_bits)
        for d_tokens in doc_token_lists
    ]
    pooled_list = []
    totals = []
    scores = []
    for feats in feature_sets:
        pooled, total = _pool_features(params, feats, memo)
        pooled_list.append(pooled)
        totals.append(total)
        scores.append(float(params.head @ pooled + params.bias))
    m = max(scores)
    exps = [math.exp(s - m) for s in scores]
    z = math.fsum(exps)
    loss = float(-(scores[0] - m) + math.log(z))
    coefs = [e / z for e in exps]
    coefs[0] -= 1.0
    grad_head = np.zeros(params.config.dim)
    for coef, pooled in zip(coefs, pooled_list):
        grad_head += coef * pooled
    grad_bias = math.fsum(coefs)
    emb_coefs: dict[int, float] = {}
    for coef, feats, total in zip(coefs, feature_sets, totals):
        if not total:
            continue
        for bucket, count in feats.items():
            emb_coefs[bucket] = emb_coefs.get(bucket, 0.0) + coef * count / total
    return loss, grad_head, grad_bias, emb_coefs


def instance_loss(
    params: RankerParams,
    query_text: str,
    positive_text: str,
    negative_texts: Sequence[str],
) -> float:
    q_tokens = tokenize(query_text)[:MAX_QUERY_TOKENS]
    docs = [tokenize(positive_text)[:MAX_DOC_TOKENS]] + [
        tokenize(t)[:MAX_DOC_TOKENS] for t in negative_texts
    ]
    loss, _, _, _ = _instance_forward_backward(params, q_tokens, docs, None)
    return loss


def infonce_grad(
    params: RankerParams,
    query_text: str,
    positive_text: str,
    negative_texts: Sequence[str],
) -> tuple[float, Gradients]:
    """Analytic loss and gradient for one instance (positive listed first)."""
    q_tokens = tokenize(query_text)[:MAX_QUERY_TOKENS]
    docs = [tokenize(positive_text)[:MAX_DOC_TOKENS]] + [
        tokenize(t)[:MAX_DOC_TOKENS] for t in negative_texts
    ]
    loss, grad_head, grad_bias, emb_coefs = _instance_forward_backward(
        params, q_tokens, docs, None
    )
    embeddings = {b: c * params.head for b, c in emb_coefs.items()}
    return loss, Gradients(head=grad_head, bias=grad_bias, embeddings=embeddings)


@dataclass(frozen=True)
class LrSchedule:
    """Triangular schedule: 0 up to the base rate over the first fifth of the
    steps, then linearly back down to 0 at the final step."""

    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or not math.isfinite(self.base_lr):
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError(
                f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}"
            )

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(
            f"step {step} outside schedule range [0, {schedule.total_steps}]"
        )
    w = schedule.warmup_steps
    if step <= w:
        return schedule.base_lr * step / w
    return schedule.base_lr * (schedule.total_steps - step) / (schedule.total_steps - w)


@dataclass(frozen=True)
class OptimizerConfig:
    head_lr: float = 2e-4
    embedding_lr: float = 2e-5
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamWState:
    """Per-parameter first/second moments; embedding moments are lazy."""

    def __init__(self, config: OptimizerConfig, dim: int):
        self.config = config
        self.dim = dim
        self.step = 0
        self.m_head = np.zeros(dim)
        self.v_head = np.zeros(dim)
        self.m_bias = 0.0
        self.v_bias = 0.0
        self.emb_moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _require_finite(values, group: str) -> None:
    if not np.all(np.isfinite(values)):
        raise OptimizerError(f"non-finite gradient in parameter group {group!r}")


def adamw_step(
    state: AdamWState,
    params: RankerParams,
    grads: Gradients,
    schedule: LrSchedule,
) -> None:
    """One decoupled-weight-decay Adam step.

    The schedule is evaluated at the post-increment step count and rescales
    both group rates proportionally; decay multiplies parameters by
    ``1 - lr * weight_decay`` before the moment update is applied.
    """
    cfg = state.config
    _require_finite(grads.head, "head")
    _require_finite(np.asarray(grads.bias), "bias")
    for bucket, g in grads.embeddings.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(
                f"non-finite gradient in parameter group 'embeddings' (bucket {bucket})"
            )
    state.step += 1
    t = state.step
    scale = lr_at_step(schedule, t) / schedule.base_lr
    lr_head = cfg.head_lr * scale
    lr_emb = cfg.embedding_lr * scale
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t

    state.m_head = cfg.beta1 * state.m_head + (1.0 - cfg.beta1) * grads.head
    state.v_head = cfg.beta2 * state.v_head + (1.0 - cfg.beta2) * grads.head**2
    params.head *= 1.0 - lr_head * cfg.weight_decay
    params.head -= lr_head * (state.m_head / bc1) / (np.sqrt(state.v_head / bc2) + cfg.eps)

    state.m_bias = cfg.beta1 * state.m_bias + (1.0 - cfg.beta1) * grads.bias
    state.v_bias = cfg.beta2 * state.v_bias + (1.0 - cfg.beta2) * grads.bias**2
    params.bias *= 1.0 - lr_head * cfg.weight_decay
    params.bias -= lr_head * (state.m_bias / bc1) / (
        math.sqrt(state.v_bias / bc2) + cfg.eps
    )

    for bucket, g in grads.embeddings.items():
        vec = params.ensure_embedding(bucket)
        moments = state.emb_moments.get(bucket)
        if moments is None:
            moments = (np.zeros(state.dim), np.zeros(state.dim))
        m, v = moments
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g**2
        state.emb_moments[bucket] = (m, v)
        vec *= 1.0 - lr_emb * cfg.weight_decay
        vec -= lr_emb * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def sample_negatives(
    pool_doc_ids: Sequence[str],
    positive_doc_id: str,
    n: int,
    rng: random.Random,
) -> list[str]:
    """Uniform sample without replacement from the pool minus the positive."""
    candidates = [d for d in pool_doc_ids if d != positive_doc_id]
    if len(candidates) < n:
        raise NegativePoolError(
            f"pool holds {len(candidates)} candidates, need {n} negatives"
        )
    return rng.sample(candidates, n)


@dataclass(frozen=True)
class TrainingInstance:
    query_text: str
    positive_doc_id: str
    negative_doc_ids: tuple[str, ...]
    collection_index: int = 0

    def __post_init__(self) -> None:
        if not self.negative_doc_ids:
            raise TrainingError("training instance needs at least one negative")
        if self.positive_doc_id in self.negative_doc_ids:
            raise TrainingError("positive document sampled as its own negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    accumulation_steps: int = 16
    num_negatives: int = 3
    negative_pool_depth: int = 1000
    head_lr: float = 2e-4
    embedding_lr: float = 2e-5
    weight_decay: float = 1e-7
    warmup_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.accumulation_steps < 1:
            raise ValueError(
                f"accumulation_steps must be >= 1, got {self.accumulation_steps}"
            )
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.negative_pool_depth <= self.num_negatives:
            raise ValueError("negative_pool_depth must exceed num_negatives")
        if self.head_lr <= 0 or self.embedding_lr <= 0:
            raise ValueError("learning rates must be positive")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            head_lr=self.head_lr,
            embedding_lr=self.embedding_lr,
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class TrainingCollection:
    """A corpus paired with the retriever that supplies negative pools."""

    corpus: Corpus
    retriever: Bm25Retriever


@dataclass
class TrainResult:
    params: RankerParams
    epoch_losses: list[float]
    optimizer_steps: int
    skipped_instances: int


def planned_steps(n_examples: int, config: TrainConfig) -> int:
    per_epoch = math.ceil(n_examples / config.accumulation_steps)
    return config.epochs * per_epoch


def train_single(
    collections: Sequence[TrainingCollection],
    examples: Sequence[tuple[str, str, int]],
    config: TrainConfig,
    ranker_config: RankerConfig | None = None,
    seed: int = 0,
    initial_params: RankerParams | None = None,
    instance_callback: Callable[[int, TrainingInstance], None] | None = None,
) -> TrainResult:
    """One full training run for one seed.

    ``examples`` are ``(query_text, positive_doc_id, collection_index)``
    triples.  Each epoch shuffles the example order, draws fresh negatives
    from each example's own collection pool, and steps the optimizer every
    ``accumulation_steps`` consumed instances, plus once for any trailing
    partial window.  Everything is driven by one seeded RNG, so the result is
    a pure function of (seed, inputs).
    """
    if not examples:
        raise TrainingError("no training examples given")
    if not collections:
        raise TrainingError("no training collections given")
    for query_text, positive, coll_idx in examples:
        if not (0 <= coll_idx < len(collections)):
            raise TrainingError(f"collection index {coll_idx} out of range")
        if positive not in collections[coll_idx].corpus:
            raise TrainingError(
                f"positive document {positive!r} not in collection {coll_idx}"
            )
        if not query_text:
            raise TrainingError("empty training query text")

    if initial_params is not None:
        params = initial_params.copy()
    else:
        params = RankerParams.initialize(ranker_config or RankerConfig(), seed)
    dim = params.config.dim

    rng = random.Random(seed)
    memo: dict[int, np.ndarray] = {}

    query_token_cache = [
        tokenize(text)[:MAX_QUERY_TOKENS] for text, _, _ in examples
    ]
    doc_token_cache: list[dict[str, list[str]]] = [dict() for _ in collections]

    def doc_tokens(coll_idx: int, doc_id: str) -> list[str]:
        cache = doc_token_cache[coll_idx]
        tokens = cache.get(doc_id)
        if tokens is None:
            doc = collections[coll_idx].corpus.get(doc_id)
            tokens = tokenize(doc.full_text)[:MAX_DOC_TOKENS]
            cache[doc_id] = tokens
        return tokens

    pools = [
        [
            sd.doc_id
            for sd in collections[coll_idx].retriever.retrieve_text(
                text, config.negative_pool_depth
            )
        ]
        for text, _, coll_idx in examples
    ]

    total_steps = planned_steps(len(examples), config)
    schedule = LrSchedule(
        base_lr=config.embedding_lr,
        total_steps=total_steps,
        warmup_fraction=config.warmup_fraction,
    )
    state = AdamWState(config.optimizer_config(), dim)

    epoch_losses: list[float] = []
    skipped = 0
    order = list(range(len(examples)))

    window_head = np.zeros(dim)
    window_bias = 0.0
    window_emb: dict[int, float] = {}
    window_count = 0

    def flush_window() -> None:
        nonlocal window_head, window_bias, window_count
        if not window_count:
            return
        grads = Gradients(
            head=window_head / window_count,
            bias=window_bias / window_count,
            # head is constant within a window, so the summed scalar
            # coefficients expand to exact per-row gradients here
            embeddings={
                b: (c / window_count) * params.head for b, c in window_emb.items()
            },
        )
        adamw_step(state, params, grads, schedule)
        window_head = np.zeros(dim)
        window_bias = 0.0
        window_emb.clear()
        window_count = 0

    for epoch in range(config.epochs):
        rng.shuffle(order)
        loss_sum = 0.0
        consumed = 0
        for idx in order:
            query_text, positive, coll_idx = examples[idx]
            try:
                negatives = sample_negatives(
                    pools[idx], positive, config.num_negatives, rng
                )
            except NegativePoolError:
                skipped += 1
                continue
            instance = TrainingInstance(
                query_text=query_text,
                positive_doc_id=positive,
                negative_doc_ids=tuple(negatives),
                collection_index=coll_idx,
            )
            if instance_callback is not None:
                instance_callback(epoch, instance)
            doc_lists = [doc_tokens(coll_idx, positive)] + [
                doc_tokens(coll_idx, neg) for neg in negatives
            ]
            loss, g_head, g_bias, emb_coefs = _instance_forward_backward(
                params, query_token_cache[idx], doc_lists, memo
            )
            window_head += g_head
            window_bias += g_bias
            for bucket, coef in emb_coefs.items():
                window_emb[bucket] = window_emb.get(bucket, 0.0) + coef
            window_count += 1
            loss_sum += loss
            consumed += 1
            if window_count == config.accumulation_steps:
                flush_window()
        flush_window()
        epoch_losses.append(loss_sum / consumed if consumed else float("nan"))

    if skipped:
        logger.warning("skipped %d instances with underfilled negative pools", skipped)
    return TrainResult(
        params=params,
        epoch_losses=epoch_losses,
        optimizer_steps=state.step,
        skipped_instances=skipped,
    )


def train(
    corpus: Corpus,
    retriever: Bm25Retriever,
    training_pairs: Sequence[tuple[str, str]],
    config: TrainConfig,
    ranker_config: RankerConfig | None = None,
    seeds: Sequence[int] = (0,),
) -> dict[int, TrainResult]:
    """Independent full runs, one per seed, over (query, positive) pairs."""
    if not seeds:
        raise TrainingError("no seeds given")
    collection = TrainingCollection(corpus=corpus, retriever=retriever)
    examples = [(text, positive, 0) for text, positive in training_pairs]
    return {
        seed: train_single([collection], examples, config, ranker_config, seed)
        for seed in seeds
    }


_CKPT_MAGIC = b"SRCK"
_CKPT_VERSION = 1


def checkpoint_bytes(params: RankerParams) -> bytes:
    """Serialize parameters: versioned header, hyperparameters, then raw
    little-endian float64 blocks with buckets in sorted order."""
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack("<I", _CKPT_VERSION)
    out += struct.pack(
        "<IIdqd",
        params.config.dim,
        params.config.hash_bits,
        params.config.init_scale,
        params.seed,
        params.bias,
    )
    out += np.asarray(params.head, dtype="<f8").tobytes()
    buckets = sorted(params.embeddings)
    out += struct.pack("<Q", len(buckets))
    for bucket in buckets:
        out += struct.pack("<Q", bucket)
        out += np.asarray(params.embeddings[bucket], dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(params: RankerParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> RankerParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise OptimizerError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise OptimizerError(f"{path}: unsupported checkpoint version {version}")
    dim, hash_bits, init_scale, seed, bias = struct.unpack_from("<IIdqd", data, 8)
    offset = 8 + struct.calcsize("<IIdqd")
    head = np.frombuffer(data, dtype="<f8", count=dim, offset=offset).copy()
    offset += dim * 8
    (n_buckets,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    embeddings: dict[int, np.ndarray] = {}
    for _ in range(n_buckets):
        (bucket,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        embeddings[bucket] = np.frombuffer(
            data, dtype="<f8", count=dim, offset=offset
        ).copy()
        offset += dim * 8
    config = RankerConfig(dim=dim, hash_bits=hash_bits, init_scale=init_scale)
    return RankerParams(config, seed, head, bias, embeddings)
