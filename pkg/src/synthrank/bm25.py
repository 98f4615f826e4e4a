"""Tokenization, inverted index, BM25 scoring, and two-stage retrieval.

Scoring follows the Lucene flavour of BM25: the idf is
``ln(1 + (N - df + 0.5) / (df + 0.5))`` (never negative) and the per-term
weight is ``idf * tf / (tf + k1 * (1 - b + b * dl / avgdl))`` without the
classic ``(k1 + 1)`` multiplier.  Defaults are k1 = 0.9 and b = 0.4.

Retrieval over titled corpora is two-stage: candidates come from a combined
title-plus-body index, then the candidate set is re-sorted by the sum of the
equally weighted title-field and body-field scores.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

from .corpus import Corpus, Document


class Bm25Error(Exception):
    """Indexing or retrieval misuse."""


# Unicode letters and digits; underscore is excluded so "a_b" splits in two.
_TOKEN_RE = re.compile(r"[^\W_]+")

# Small function-word list used only when a tokenizer opts in.
ENGLISH_STOPWORDS = frozenset(
    "a an and are as at be but by for if in into is it no not of on or such "
    "that the their then there these they this to was will with".split()
)


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric word tokens ("COVID-19" -> ["covid", "19"])."""
    return _TOKEN_RE.findall(text.lower())


def _s_stem(token: str) -> str:
    # Harman-style "s" stemmer: only strips common plural endings.
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith("es") and len(token) > 3:
        return token[:-2]
    if token.endswith("s") and not token.endswith("ss") and len(token) > 3:
        return token[:-1]
    return token


@dataclass(frozen=True)
class TokenizerConfig:
    """Optional normalization gates; both default off."""

    remove_stopwords: bool = False
    stem: bool = False

    def tokenize(self, text: str) -> list[str]:
        tokens = tokenize(text)
        if self.remove_stopwords:
            tokens = [t for t in tokens if t not in ENGLISH_STOPWORDS]
        if self.stem:
            tokens = [_s_stem(t) for t in tokens]
        return tokens


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self) -> None:
        if not (self.k1 > 0 and math.isfinite(self.k1)):
            raise Bm25Error(f"k1 must be positive, got {self.k1}")
        if not (0.0 <= self.b <= 1.0):
            raise Bm25Error(f"b must lie in [0, 1], got {self.b}")


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float


_FIELDS = ("combined", "title", "body")


class InvertedIndex:
    """Immutable postings over one field of a corpus.

    Postings lists hold ``(ordinal, tf)`` pairs sorted by document ordinal,
    which matches corpus file order.
    """

    def __init__(
        self,
        field: str,
        doc_ids: list[str],
        doc_lengths: list[int],
        postings: dict[str, list[tuple[int, int]]],
    ):
        self.field = field
        self.doc_ids = doc_ids
        self.doc_lengths = doc_lengths
        self.postings = postings
        self.n_docs = len(doc_ids)
        self.total_length = sum(doc_lengths)
        self.avg_doc_length = self.total_length / self.n_docs if self.n_docs else 0.0
        self._ordinals = {doc_id: i for i, doc_id in enumerate(doc_ids)}
        self._norm_cache: dict[tuple[float, float], list[float]] = {}

    @classmethod
    def build(
        cls,
        corpus: Corpus,
        field: str = "combined",
        tokenizer: Callable[[str], list[str]] = tokenize,
    ) -> "InvertedIndex":
        if field not in _FIELDS:
            raise Bm25Error(f"unknown field {field!r}")
        if len(corpus) == 0:
            raise Bm25Error("cannot index an empty corpus")
        doc_ids: list[str] = []
        doc_lengths: list[int] = []
        postings: dict[str, list[tuple[int, int]]] = {}
        for ordinal, doc in enumerate(corpus):
            text = _field_text(doc, field)
            tokens = tokenizer(text)
            doc_ids.append(doc.doc_id)
            doc_lengths.append(len(tokens))
            counts: dict[str, int] = {}
            for token in tokens:
                counts[token] = counts.get(token, 0) + 1
            for token, tf in counts.items():
                postings.setdefault(token, []).append((ordinal, tf))
        return cls(field, doc_ids, doc_lengths, postings)

    def df(self, term: str) -> int:
        plist = self.postings.get(term)
        return len(plist) if plist else 0

    def ordinal_of(self, doc_id: str) -> int:
        try:
            return self._ordinals[doc_id]
        except KeyError:
            raise Bm25Error(f"doc_id {doc_id!r} not in index") from None

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def _norms(self, params: Bm25Params) -> list[float]:
        key = (params.k1, params.b)
        norms = self._norm_cache.get(key)
        if norms is None:
            k1, b = params.k1, params.b
            avg = self.avg_doc_length
            if avg == 0.0:
                norms = [k1 for _ in self.doc_lengths]
            else:
                norms = [k1 * (1.0 - b + b * dl / avg) for dl in self.doc_lengths]
            self._norm_cache[key] = norms
        return norms


def _field_text(doc: Document, field: str) -> str:
    if field == "combined":
        return doc.full_text
    if field == "title":
        return doc.title or ""
    return doc.body


def bm25_score(
    index: InvertedIndex,
    query_tokens: Sequence[str],
    doc_id: str,
    params: Bm25Params = Bm25Params(),
) -> float:
    """Score one document; repeated query terms contribute once per repeat."""
    ordinal = index.ordinal_of(doc_id)
    norm = index._norms(params)[ordinal]
    score = 0.0
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        tf = _tf_lookup(plist, ordinal)
        if tf == 0:
            continue
        score += index.idf(token) * tf / (tf + norm)
    return score


def _tf_lookup(plist: list[tuple[int, int]], ordinal: int) -> int:
    lo, hi = 0, len(plist)
    while lo < hi:
        mid = (lo + hi) // 2
        if plist[mid][0] < ordinal:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(plist) and plist[lo][0] == ordinal:
        return plist[lo][1]
    return 0


def retrieve_top_k(
    index: InvertedIndex,
    query_tokens: Sequence[str],
    k: int,
    params: Bm25Params = Bm25Params(),
) -> list[ScoredDoc]:
    """Top-k matching documents, sorted by score descending then doc_id.

    Only documents sharing at least one term with the query are returned, so
    fewer than k results are possible.  An empty query yields an empty list.
    """
    if k < 1:
        raise Bm25Error(f"k must be >= 1, got {k}")
    if not query_tokens:
        return []
    norms = index._norms(params)
    acc: dict[int, float] = {}
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        idf = index.idf(token)
        for ordinal, tf in plist:
            acc[ordinal] = acc.get(ordinal, 0.0) + idf * tf / (tf + norms[ordinal])
    scored = [ScoredDoc(index.doc_ids[o], s) for o, s in acc.items()]
    scored.sort(key=lambda d: (-d.score, d.doc_id))
    return scored[:k]


def two_stage_retrieve(
    index_combined: InvertedIndex,
    index_title: InvertedIndex,
    index_body: InvertedIndex,
    query_tokens: Sequence[str],
    params: Bm25Params = Bm25Params(),
    stage1_k: int = 1000,
) -> list[ScoredDoc]:
    """Stage 1 takes top ``stage1_k`` from the combined index; stage 2
    re-sorts exactly that candidate set by title-field plus body-field score."""
    if index_title.total_length == 0:
        raise Bm25Error(
            "corpus has no titles; use single-stage retrieve_top_k instead"
        )
    stage1 = retrieve_top_k(index_combined, query_tokens, stage1_k, params)
    rescored = [
        ScoredDoc(
            cand.doc_id,
            bm25_score(index_title, query_tokens, cand.doc_id, params)
            + bm25_score(index_body, query_tokens, cand.doc_id, params),
        )
        for cand in stage1
    ]
    rescored.sort(key=lambda d: (-d.score, d.doc_id))
    return rescored


class Bm25Retriever:
    """Candidate generation over one corpus.

    Uses two-stage scoring whenever the corpus has titles (or as forced by
    ``two_stage``); plain combined-field retrieval otherwise.
    """

    def __init__(
        self,
        corpus: Corpus,
        params: Bm25Params | None = None,
        stage1_k: int = 1000,
        tokenizer: Callable[[str], list[str]] = tokenize,
        two_stage: bool | None = None,
    ):
        if stage1_k < 1:
            raise Bm25Error(f"stage1_k must be >= 1, got {stage1_k}")
        self.corpus = corpus
        self.params = params if params is not None else Bm25Params()
        self.stage1_k = stage1_k
        self.tokenizer = tokenizer
        use_two_stage = corpus.has_titles if two_stage is None else two_stage
        if use_two_stage and not corpus.has_titles:
            raise Bm25Error("two-stage retrieval requested but corpus has no titles")
        self.combined = InvertedIndex.build(corpus, "combined", tokenizer)
        if use_two_stage:
            self.title_index = InvertedIndex.build(corpus, "title", tokenizer)
            self.body_index = InvertedIndex.build(corpus, "body", tokenizer)
        else:
            self.title_index = None
            self.body_index = None

    @property
    def is_two_stage(self) -> bool:
        return self.title_index is not None

    def retrieve(self, query_tokens: Sequence[str], k: int) -> list[ScoredDoc]:
        if self.is_two_stage:
            ranked = two_stage_retrieve(
                self.combined,
                self.title_index,
                self.body_index,
                query_tokens,
                self.params,
                self.stage1_k,
            )
            return ranked[:k]
        return retrieve_top_k(self.combined, query_tokens, k, self.params)

    def retrieve_text(self, query_text: str, k: int) -> list[ScoredDoc]:
        return self.retrieve(self.tokenizer(query_text), k)


_INDEX_MAGIC = b"SRIX"
_INDEX_VERSION = 1


def save_index(index: InvertedIndex, path) -> None:
    """Serialize an index: versioned header, then little-endian doc table and
    term/postings blocks."""
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<I", _INDEX_VERSION))
        field_bytes = index.field.encode("utf-8")
        fh.write(struct.pack("<I", len(field_bytes)))
        fh.write(field_bytes)
        fh.write(struct.pack("<Q", index.n_docs))
        for doc_id, length in zip(index.doc_ids, index.doc_lengths):
            id_bytes = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<I", length))
        fh.write(struct.pack("<Q", len(index.postings)))
        for term in sorted(index.postings):
            term_bytes = term.encode("utf-8")
            fh.write(struct.pack("<I", len(term_bytes)))
            fh.write(term_bytes)
            plist = index.postings[term]
            fh.write(struct.pack("<I", len(plist)))
            for ordinal, tf in plist:
                fh.write(struct.pack("<II", ordinal, tf))


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _INDEX_MAGIC:
            raise Bm25Error(f"{path}: not an index file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _INDEX_VERSION:
            raise Bm25Error(f"{path}: unsupported index version {version}")
        (field_len,) = struct.unpack("<I", fh.read(4))
        field = fh.read(field_len).decode("utf-8")
        (n_docs,) = struct.unpack("<Q", fh.read(8))
        doc_ids: list[str] = []
        doc_lengths: list[int] = []
        for _ in range(n_docs):
            (id_len,) = struct.unpack("<I", fh.read(4))
            doc_ids.append(fh.read(id_len).decode("utf-8"))
            (length,) = struct.unpack("<I", fh.read(4))
            doc_lengths.append(length)
        (n_terms,) = struct.unpack("<Q", fh.read(8))
        postings: dict[str, list[tuple[int, int]]] = {}
        for _ in range(n_terms):
            (term_len,) = struct.unpack("<I", fh.read(4))
            term = fh.read(term_len).decode("utf-8")
            (n_postings,) = struct.unpack("<I", fh.read(4))
            plist = []
            for _ in range(n_postings):
                ordinal, tf = struct.unpack("<II", fh.read(8))
                plist.append((ordinal, tf))
            postings[term] = plist
    return InvertedIndex(field, doc_ids, doc_lengths, postings)
