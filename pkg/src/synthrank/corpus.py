"""Data model and file IO for document collections, queries, qrels, and runs.

Corpora are read from JSONL (one ``{"doc_id", "title", "body"}`` object per
line) or from three-column TSV (``doc_id<TAB>title<TAB>body``).  Runs and
relevance judgments use the usual TREC text formats.  All files are strict
UTF-8; undecodable bytes are a hard error rather than silently replaced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence


class CorpusError(Exception):
    """Malformed or inconsistent corpus, query, qrels, or run data."""


@dataclass(frozen=True)
class Document:
    """A single document; ``title`` is optional, ``body`` may be empty only
    when a title is present."""

    doc_id: str
    body: str
    title: str | None = None

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise CorpusError("document with empty doc_id")
        if not self.body and not self.title:
            raise CorpusError(f"document {self.doc_id!r} has neither title nor body")

    @property
    def full_text(self) -> str:
        """Title and body joined with a single space (body alone if untitled)."""
        if self.title is not None:
            return f"{self.title} {self.body}"
        return self.body


@dataclass(frozen=True)
class QueryRecord:
    """An evaluation query.

    Exactly one of ``text`` / ``alt_fields`` is populated.  ``alt_fields``
    carries multi-field topics (title / description / narrative); retrieval
    then uses the title while neural scoring uses the description.
    """

    query_id: str
    text: str | None = None
    alt_fields: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        if not self.query_id:
            raise CorpusError("query with empty query_id")
        if (self.text is None) == (self.alt_fields is None):
            raise CorpusError(
                f"query {self.query_id!r} must have exactly one of text or alt_fields"
            )
        if self.alt_fields is not None:
            if not self.alt_fields.get("title") or not self.alt_fields.get("description"):
                raise CorpusError(
                    f"query {self.query_id!r} alt_fields need non-empty title and description"
                )

    def bm25_text(self) -> str:
        """Text used for lexical retrieval."""
        if self.text is not None:
            return self.text
        return self.alt_fields["title"]  # type: ignore[index]

    def ranker_text(self) -> str:
        """Text used by the neural scorer."""
        if self.text is not None:
            return self.text
        return self.alt_fields["description"]  # type: ignore[index]


class Corpus:
    """Ordered, immutable document collection with unique ids."""

    def __init__(self, documents: Iterable[Document]):
        self._docs: list[Document] = []
        self._by_id: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self._by_id:
                raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
            self._by_id[doc.doc_id] = doc
            self._docs.append(doc)

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown doc_id {doc_id!r}") from None

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self._docs]

    @property
    def has_titles(self) -> bool:
        return any(d.title for d in self._docs)


def _open_strict(path):
    return open(path, encoding="utf-8", errors="strict", newline=None)


def ingest_corpus(path, format: str = "jsonl") -> Corpus:
    """Read a corpus file into memory, preserving file order.

    Raises :class:`CorpusError` with the offending line number for parse
    problems and with the offending id for duplicates.
    """
    if format not in ("jsonl", "tsv"):
        raise CorpusError(f"unknown corpus format {format!r}")
    docs: list[Document] = []
    try:
        with _open_strict(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if format == "jsonl":
                    docs.append(_parse_jsonl_doc(path, lineno, line))
                else:
                    docs.append(_parse_tsv_doc(path, lineno, line))
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8: {exc}") from exc
    if not docs:
        raise CorpusError(f"{path}: corpus file contains no documents")
    return Corpus(docs)


def _parse_jsonl_doc(path, lineno: int, line: str) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise CorpusError(f"{path}:{lineno}: expected a JSON object")
    doc_id = record.get("doc_id")
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError(f"{path}:{lineno}: missing or empty doc_id")
    title = record.get("title")
    if title is not None and not isinstance(title, str):
        raise CorpusError(f"{path}:{lineno}: title must be a string")
    body = record.get("body")
    if body is None:
        body = ""
    if not isinstance(body, str):
        raise CorpusError(f"{path}:{lineno}: body must be a string")
    if not title:
        title = None
    if not body and title is None:
        raise CorpusError(f"{path}:{lineno}: record has neither title nor body")
    return Document(doc_id=doc_id, body=body, title=title)


def _parse_tsv_doc(path, lineno: int, line: str) -> Document:
    parts = line.split("\t")
    if len(parts) != 3:
        raise CorpusError(
            f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}"
        )
    doc_id, title, body = parts
    if not doc_id:
        raise CorpusError(f"{path}:{lineno}: missing or empty doc_id")
    if not title and not body:
        raise CorpusError(f"{path}:{lineno}: record has neither title nor body")
    return Document(doc_id=doc_id, body=body, title=title or None)


def read_queries(path, format: str = "jsonl") -> list[QueryRecord]:
    """Read queries from JSONL ({"query_id", "text"} or {"query_id", "fields":
    {...}}) or from two-column TSV (``query_id<TAB>text``)."""
    if format not in ("jsonl", "tsv"):
        raise CorpusError(f"unknown query format {format!r}")
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    try:
        with _open_strict(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if format == "jsonl":
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                    query_id = record.get("query_id")
                    if not isinstance(query_id, str) or not query_id:
                        raise CorpusError(f"{path}:{lineno}: missing or empty query_id")
                    fields = record.get("fields")
                    text = record.get("text")
                    try:
                        query = QueryRecord(query_id=query_id, text=text, alt_fields=fields)
                    except CorpusError as exc:
                        raise CorpusError(f"{path}:{lineno}: {exc}") from exc
                else:
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise CorpusError(
                            f"{path}:{lineno}: expected 2 tab-separated columns, got {len(parts)}"
                        )
                    query = QueryRecord(query_id=parts[0], text=parts[1])
                if query.query_id in seen:
                    raise CorpusError(f"{path}:{lineno}: duplicate query_id {query.query_id!r}")
                seen.add(query.query_id)
                queries.append(query)
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8: {exc}") from exc
    return queries


@dataclass(frozen=True)
class QrelEntry:
    query_id: str
    doc_id: str
    grade: int

    def __post_init__(self) -> None:
        if self.grade < 0:
            raise CorpusError(
                f"negative grade for ({self.query_id!r}, {self.doc_id!r})"
            )


def read_qrels(path) -> dict[str, dict[str, int]]:
    """Read TREC qrels ("qid 0 docid grade") into a nested map."""
    qrels: dict[str, dict[str, int]] = {}
    try:
        with _open_strict(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise CorpusError(
                        f"{path}:{lineno}: expected 4 columns, got {len(parts)}"
                    )
                qid, _, doc_id, grade_str = parts
                try:
                    grade = int(grade_str)
                except ValueError as exc:
                    raise CorpusError(f"{path}:{lineno}: grade is not an integer") from exc
                try:
                    entry = QrelEntry(qid, doc_id, grade)
                except CorpusError as exc:
                    raise CorpusError(f"{path}:{lineno}: {exc}") from exc
                per_query = qrels.setdefault(qid, {})
                if doc_id in per_query:
                    raise CorpusError(
                        f"{path}:{lineno}: duplicate judgment for ({qid!r}, {doc_id!r})"
                    )
                per_query[doc_id] = entry.grade
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8: {exc}") from exc
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc_id} {qrels[qid][doc_id]}\n")


@dataclass(frozen=True)
class RunEntry:
    """One line of a TREC run."""

    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


def read_run(path) -> dict[str, list[RunEntry]]:
    """Read a six-column TREC run; per query, ranks must be contiguous from 1
    and scores non-increasing with rank."""
    grouped: dict[str, list[RunEntry]] = {}
    try:
        with _open_strict(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 6:
                    raise CorpusError(
                        f"{path}:{lineno}: expected 6 columns, got {len(parts)}"
                    )
                qid, _q0, doc_id, rank_str, score_str, tag = parts
                try:
                    rank = int(rank_str)
                    score = float(score_str)
                except ValueError as exc:
                    raise CorpusError(f"{path}:{lineno}: bad rank or score") from exc
                if rank < 1:
                    raise CorpusError(
                        f"{path}:{lineno}: rank must be >= 1, got {rank} for query {qid!r}"
                    )
                grouped.setdefault(qid, []).append(RunEntry(qid, doc_id, rank, score, tag))
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not valid UTF-8: {exc}") from exc
    for qid, entries in grouped.items():
        entries.sort(key=lambda e: e.rank)
        ranks = [e.rank for e in entries]
        if ranks != list(range(1, len(entries) + 1)):
            raise CorpusError(f"{path}: non-contiguous ranks for query {qid!r}")
        for earlier, later in zip(entries, entries[1:]):
            if later.score > earlier.score:
                raise CorpusError(
                    f"{path}: scores increase with rank for query {qid!r}"
                )
    return grouped


def write_run(
    runs: Mapping[str, Sequence[tuple[str, float]]], tag: str, path
) -> None:
    """Write ranked ``(doc_id, score)`` lists as a TREC run.

    Ranks are assigned from list position; scores must already be
    non-increasing.  Queries are emitted in sorted id order so output bytes
    are reproducible.
    """
    if not tag or any(ch.isspace() for ch in tag):
        raise CorpusError(f"run tag {tag!r} must be non-empty without whitespace")
    for qid, entries in runs.items():
        scores = [s for _, s in entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise CorpusError(f"scores increase with rank for query {qid!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(runs):
            for rank, (doc_id, score) in enumerate(runs[qid], start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")
