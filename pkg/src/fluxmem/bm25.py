"""Okapi BM25 over the semantic layer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Mapping

from .embedding import tokenize
from .errors import UnknownDoc


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")


@dataclass
class CorpusStats:
    doc_count: int = 0
    doc_lengths: dict[Hashable, int] = field(default_factory=dict)
    avg_doc_length: float = 0.0
    term_doc_freq: dict[str, int] = field(default_factory=dict)
    term_freqs: dict[Hashable, Counter] = field(default_factory=dict)

    @classmethod
    def from_documents(cls, docs: Mapping[Hashable, str]) -> "CorpusStats":
        stats = cls()
        df: Counter = Counter()
        for doc_id, text in docs.items():
            tf = Counter(tokenize(text))
            stats.term_freqs[doc_id] = tf
            stats.doc_lengths[doc_id] = sum(tf.values())
            df.update(tf.keys())
        stats.doc_count = len(stats.doc_lengths)
        stats.term_doc_freq = dict(df)
        if stats.doc_count:
            stats.avg_doc_length = sum(stats.doc_lengths.values()) / stats.doc_count
        return stats

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self.doc_lengths


def idf(doc_freq: int, doc_count: int) -> float:
    return math.log((doc_count - doc_freq + 0.5) / (doc_freq + 0.5) + 1.0)


def bm25_score(
    query: str, doc_id: Hashable, stats: CorpusStats, params: Bm25Params = Bm25Params()
) -> float:
    """Score one document. Repeated query terms contribute once per occurrence."""
    if doc_id not in stats:
        raise UnknownDoc(f"document {doc_id!r} not in corpus")
    tf = stats.term_freqs[doc_id]
    dl = stats.doc_lengths[doc_id]
    avgdl = stats.avg_doc_length or 1.0
    norm = params.k1 * (1.0 - params.b + params.b * dl / avgdl)
    score = 0.0
    for term in tokenize(query):
        f = tf.get(term, 0)
        if not f:
            continue
        score += idf(stats.term_doc_freq[term], stats.doc_count) * f * (params.k1 + 1.0) / (f + norm)
    return score
