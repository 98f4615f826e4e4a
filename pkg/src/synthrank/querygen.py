"""Few-shot prompt construction, greedy query generation, and log-prob filtering.

A prompt shows three fixed document/query pairs and asks for a fourth query:

    Example 1:
    Document: ...
    Relevant Query: ...

    (twice more)

    Example 4:
    Document: <target document>
    Relevant Query:

Completions are requested greedily with at most 32 new tokens and are cut at
the first line break.  Each kept query records the log-probabilities of its
retained tokens; filtering keeps the top fraction by average token
log-probability.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

from .corpus import Corpus

logger = logging.getLogger(__name__)

MAX_NEW_TOKENS = 32
TOKEN_ENV_VAR = "SYNTHRANK_GEN_TOKEN"


class GenerationError(Exception):
    """Transport or protocol failure talking to the generation endpoint."""


def flatten_text(text: str) -> str:
    """Replace every line break with a single space."""
    return text.replace("\r\n", " ").replace("\n", " ").replace("\r", " ")


@dataclass(frozen=True)
class FewShotExample:
    document_text: str
    relevant_query: str

    def __post_init__(self) -> None:
        if not self.document_text or not self.relevant_query:
            raise ValueError("few-shot example needs non-empty document and query")


class PromptTemplate:
    """Exactly three in-context examples; rendering appends the target slot."""

    def __init__(self, examples: Sequence[FewShotExample]):
        if len(examples) != 3:
            raise ValueError(f"prompt template requires exactly 3 examples, got {len(examples)}")
        self.examples = tuple(examples)

    def render(self, target_doc_text: str) -> str:
        if not target_doc_text:
            raise ValueError("target document text is empty")
        parts = []
        for i, ex in enumerate(self.examples, start=1):
            parts.append(
                f"Example {i}:\n"
                f"Document: {flatten_text(ex.document_text)}\n"
                f"Relevant Query: {flatten_text(ex.relevant_query)}\n\n"
            )
        parts.append(
            f"Example 4:\nDocument: {flatten_text(target_doc_text)}\nRelevant Query:"
        )
        return "".join(parts)


def build_prompt(template: PromptTemplate, target_doc_text: str) -> str:
    return template.render(target_doc_text)


def read_prompt_examples(path) -> PromptTemplate:
    """Load the three few-shot pairs from JSONL with keys document_text and
    relevant_query."""
    examples = []
    with open(path, encoding="utf-8", errors="strict") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            examples.append(
                FewShotExample(record["document_text"], record["relevant_query"])
            )
    return PromptTemplate(examples)


@dataclass(frozen=True)
class GeneratedQuery:
    """A synthetic query tied to the document that prompted it."""

    text: str
    source_doc_id: str
    token_logprobs: tuple[float, ...]
    avg_logprob: float

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("generated query text is empty")
        if "\n" in self.text or "\r" in self.text:
            raise ValueError("generated query text must be a single line")
        if not self.source_doc_id:
            raise ValueError("generated query has no source document")
        if not self.token_logprobs:
            raise ValueError("generated query has no token log-probabilities")
        if any(lp > 0.0 for lp in self.token_logprobs):
            raise ValueError("token log-probabilities must be <= 0")
        expected = sum(self.token_logprobs) / len(self.token_logprobs)
        if abs(self.avg_logprob - expected) > 1e-12:
            raise ValueError("avg_logprob does not match the token log-probabilities")

    @classmethod
    def create(
        cls, text: str, source_doc_id: str, token_logprobs: Sequence[float]
    ) -> "GeneratedQuery":
        lps = tuple(float(lp) for lp in token_logprobs)
        return cls(
            text=text,
            source_doc_id=source_doc_id,
            token_logprobs=lps,
            avg_logprob=sum(lps) / len(lps) if lps else 0.0,
        )


@dataclass(frozen=True)
class GenerationResponse:
    tokens: tuple[str, ...]
    token_logprobs: tuple[float, ...]
    text: str


class GenerationClient(Protocol):
    def complete(self, prompt: str) -> GenerationResponse: ...


class HttpGenerationClient:
    """POSTs prompts as JSON to a completion endpoint.

    The request body is ``{"prompt", "max_new_tokens": 32, "decoding":
    "greedy", "logprobs": true}``; the response carries parallel ``tokens``
    and ``token_logprobs`` arrays plus the raw ``text``.  The bearer token is
    taken from ``SYNTHRANK_GEN_TOKEN`` unless given explicitly.
    """

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        retry_wait: float = 1.0,
        post=None,
    ):
        self.endpoint = endpoint
        self.token = token if token is not None else os.environ.get(TOKEN_ENV_VAR)
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.retry_wait = retry_wait
        if post is None:
            import requests

            self._post = requests.post
            self._transport_errors = (requests.RequestException,)
        else:
            self._post = post
            self._transport_errors = (OSError,)

    def complete(self, prompt: str) -> GenerationResponse:
        payload = {
            "prompt": prompt,
            "max_new_tokens": MAX_NEW_TOKENS,
            "decoding": "greedy",
            "logprobs": True,
        }
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.retry_wait * attempt)
            try:
                response = self._post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except self._transport_errors as exc:
                last_error = exc
                continue
            status = getattr(response, "status_code", 200)
            if status >= 500:
                last_error = GenerationError(f"endpoint returned {status}")
                continue
            if status >= 400:
                raise GenerationError(f"endpoint rejected request with {status}")
            body = response.json()
            return _parse_response(body)
        raise GenerationError(
            f"generation endpoint unreachable after {self.max_attempts} attempts: {last_error}"
        )


def _parse_response(body) -> GenerationResponse:
    try:
        tokens = tuple(body["tokens"])
        logprobs = tuple(float(x) for x in body["token_logprobs"])
        text = body["text"]
    except (KeyError, TypeError) as exc:
        raise GenerationError(f"malformed generation response: {exc}") from exc
    if len(tokens) != len(logprobs):
        raise GenerationError("tokens and token_logprobs lengths differ")
    return GenerationResponse(tokens=tokens, token_logprobs=logprobs, text=text)


def generate(
    client: GenerationClient, prompt: str, source_doc_id: str
) -> GeneratedQuery | None:
    """Run one completion and post-process it into a query.

    Keeps at most MAX_NEW_TOKENS tokens, stops at the first line break, and
    averages log-probabilities over the retained tokens only.  Returns None
    when nothing usable was produced.
    """
    response = client.complete(prompt)
    kept_parts: list[str] = []
    kept_lps: list[float] = []
    for token, lp in zip(response.tokens[:MAX_NEW_TOKENS], response.token_logprobs):
        if "\n" in token or "\r" in token:
            head = token.replace("\r", "\n").split("\n", 1)[0]
            if head:
                kept_parts.append(head)
                kept_lps.append(lp)
            break
        kept_parts.append(token)
        kept_lps.append(lp)
    text = "".join(kept_parts).strip()
    if not text or not kept_lps:
        return None
    return GeneratedQuery.create(text, source_doc_id, kept_lps)


def generate_queries(
    corpus: Corpus,
    template: PromptTemplate,
    client: GenerationClient,
    num_queries: int,
    seed: int,
) -> list[GeneratedQuery]:
    """Prompt over ``num_queries`` documents sampled uniformly without
    replacement (seeded); empty completions are dropped with a logged count."""
    docs = list(corpus)
    if num_queries < 1:
        raise ValueError(f"num_queries must be >= 1, got {num_queries}")
    if num_queries > len(docs):
        raise ValueError(
            f"cannot sample {num_queries} documents from a corpus of {len(docs)}"
        )
    rng = random.Random(seed)
    sampled = rng.sample(docs, num_queries)
    queries: list[GeneratedQuery] = []
    discarded = 0
    for doc in sampled:
        prompt = template.render(doc.full_text)
        query = generate(client, prompt, doc.doc_id)
        if query is None:
            discarded += 1
            continue
        queries.append(query)
    if discarded:
        logger.info("discarded %d empty completions", discarded)
    return queries


def filter_top_fraction(
    queries: Sequence[GeneratedQuery], fraction: float = 0.10
) -> list[GeneratedQuery]:
    """Keep the ceil(fraction * N) queries with the highest average token
    log-probability, preserving original order among the kept; ties at the
    cutoff go to the earlier-generated query."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not queries:
        return []
    n_keep = math.ceil(fraction * len(queries))
    by_quality = sorted(
        range(len(queries)), key=lambda i: (-queries[i].avg_logprob, i)
    )
    kept = sorted(by_quality[:n_keep])
    return [queries[i] for i in kept]


def write_generated_queries(queries: Sequence[GeneratedQuery], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(
                json.dumps(
                    {
                        "source_doc_id": q.source_doc_id,
                        "text": q.text,
                        "token_logprobs": list(q.token_logprobs),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_generated_queries(path) -> list[GeneratedQuery]:
    """Read the line-delimited offline query format; the average log-prob is
    recomputed from the stored per-token values."""
    queries: list[GeneratedQuery] = []
    with open(path, encoding="utf-8", errors="strict") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                query = GeneratedQuery.create(
                    record["text"],
                    record["source_doc_id"],
                    record["token_logprobs"],
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad generated-query record: {exc}") from exc
            queries.append(query)
    return queries


def write_checked_queries(
    queries: Sequence[GeneratedQuery], passed: Sequence[bool], path
) -> None:
    if len(queries) != len(passed):
        raise ValueError("queries and passed flags differ in length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q, flag in zip(queries, passed):
            fh.write(
                json.dumps(
                    {
                        "source_doc_id": q.source_doc_id,
                        "text": q.text,
                        "token_logprobs": list(q.token_logprobs),
                        "passed": bool(flag),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_checked_queries(path) -> list[tuple[GeneratedQuery, bool]]:
    out: list[tuple[GeneratedQuery, bool]] = []
    with open(path, encoding="utf-8", errors="strict") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                query = GeneratedQuery.create(
                    record["text"],
                    record["source_doc_id"],
                    record["token_logprobs"],
                )
                flag = bool(record["passed"])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad checked-query record: {exc}") from exc
            out.append((query, flag))
    return out
