"""Stage-I retrieval: hybrid semantic scoring, episodic top-k, skill inheritance."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Protocol

import numpy as np

from .bm25 import Bm25Params, CorpusStats, bm25_score
from .embedding import HashEmbedder, cosine, tokenize
from .errors import LayerMismatch, NegativeInput
from .graph import ANCHOR, Edge, EdgeKind, Layer, MemoryGraph, MemoryNode


class Verifier(Protocol):
    def __call__(self, candidate: str, observation: str) -> int: ...


Embedder = Callable[[str], np.ndarray]


class JaccardVerifier:
    """Binary relevance: 1 iff token-set Jaccard overlap reaches ``threshold``."""

    deterministic = True

    def __init__(self, threshold: float = 0.1):
        self.threshold = threshold

    def __call__(self, candidate: str, observation: str) -> int:
        a, b = set(tokenize(candidate)), set(tokenize(observation))
        union = a | b
        if not union:
            return 0
        return int(len(a & b) / len(union) >= self.threshold)


@dataclass(frozen=True)
class RetrievalConfig:
    k_sem: int = 5
    k_epi: int = 3
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bm25: Bm25Params = field(default_factory=Bm25Params)
    expand_budget: int = 2
    squash_sparse: bool = True
    # Verify only the best n candidates by dense+sparse; None verifies all.
    verify_shortlist: int | None = None

    def __post_init__(self):
        if self.k_sem < 1 or self.k_epi < 1:
            raise ValueError("k_sem and k_epi must be positive")
        if self.expand_budget < 1:
            raise ValueError("expand_budget must be positive")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be three non-negative reals")
        if not any(w > 0 for w in self.weights):
            raise ValueError("at least one weight must be positive")
        if self.verify_shortlist is not None and self.verify_shortlist < 0:
            raise ValueError("verify_shortlist must be non-negative")


@dataclass(frozen=True)
class ScoreBreakdown:
    dense: float
    sparse_raw: float
    sparse_norm: float
    verifier: int
    total: float
    squashed: bool = True

    def to_dict(self) -> dict:
        return {
            "dense": self.dense,
            "sparse_raw": self.sparse_raw,
            "sparse_norm": self.sparse_norm,
            "verifier": self.verifier,
            "total": self.total,
        }


def normalize_sparse(raw: float) -> float:
    """Squash an unbounded BM25 score into [0, 1) via s / (s + 1)."""
    if raw < 0:
        raise NegativeInput(f"sparse score must be non-negative, got {raw}")
    return raw / (raw + 1.0)


def fuse(dense: float, sparse_raw: float, verifier: int, config: RetrievalConfig) -> ScoreBreakdown:
    sparse_norm = normalize_sparse(sparse_raw)
    w_d, w_s, w_v = config.weights
    sparse = sparse_norm if config.squash_sparse else sparse_raw
    total = w_d * dense + w_s * sparse + w_v * verifier
    return ScoreBreakdown(dense, sparse_raw, sparse_norm, int(verifier), total, config.squash_sparse)


def semantic_corpus(graph: MemoryGraph) -> CorpusStats:
    """BM25 statistics over the semantic layer, cached per graph revision."""
    cached = getattr(graph, "_bm25_cache", None)
    if cached is not None and cached[0] == graph.revision:
        return cached[1]
    docs = {i: graph.nodes[i].content for i in graph.layer_index[Layer.SEMANTIC]}
    stats = CorpusStats.from_documents(docs)
    graph._bm25_cache = (graph.revision, stats)
    return stats


def default_embedder(graph: MemoryGraph) -> HashEmbedder:
    return HashEmbedder(graph.dimension)


class Scorer:
    """Hybrid scorer bound to one observation.

    Verifier calls are memoized on (node id, node version, observation), so a
    node is verified at most once per scorer.
    """

    def __init__(
        self,
        graph: MemoryGraph,
        observation: str,
        config: RetrievalConfig,
        verifier: Verifier,
        embedder: Embedder | None = None,
        stats: CorpusStats | None = None,
    ):
        self.graph = graph
        self.observation = observation
        self.config = config
        self.verifier = verifier
        self.embedder = embedder or default_embedder(graph)
        self.query_vec = self.embedder(observation)
        self.stats = stats if stats is not None else semantic_corpus(graph)
        self._memo: dict[tuple[int, int, str], int] = {}

    def dense(self, node: MemoryNode) -> float:
        return cosine(node.embedding, self.query_vec)

    def sparse(self, node: MemoryNode) -> float:
        if node.id not in self.stats:
            return 0.0
        return bm25_score(self.observation, node.id, self.stats, self.config.bm25)

    def verify(self, node: MemoryNode) -> int:
        key = (node.id, node.version, self.observation)
        if key not in self._memo:
            self._memo[key] = int(bool(self.verifier(node.content, self.observation)))
        return self._memo[key]

    def score(self, node: MemoryNode) -> ScoreBreakdown:
        if node.layer is not Layer.SEMANTIC:
            raise LayerMismatch(f"node {node.id} is {node.layer.value}, expected semantic")
        return fuse(self.dense(node), self.sparse(node), self.verify(node), self.config)

    def score_all(self, node_ids: Iterable[int]) -> dict[int, ScoreBreakdown]:
        nodes = [self.graph.nodes[i] for i in node_ids]
        shortlist = self.config.verify_shortlist
        if shortlist is None:
            return {n.id: self.score(n) for n in nodes}
        pre = {n.id: fuse(self.dense(n), self.sparse(n), 0, self.config) for n in nodes}
        keep = {i for i, _ in heapq.nsmallest(shortlist, pre.items(), key=_rank_key)}
        return {
            n.id: fuse(pre[n.id].dense, pre[n.id].sparse_raw, self.verify(n), self.config)
            if n.id in keep
            else pre[n.id]
            for n in nodes
        }


def _rank_key(item: tuple[int, ScoreBreakdown]) -> tuple[float, int]:
    return (-item[1].total, item[0])


def hybrid_score(
    candidate: MemoryNode,
    observation: str,
    verifier: Verifier,
    config: RetrievalConfig,
    graph: MemoryGraph,
    embedder: Embedder | None = None,
) -> ScoreBreakdown:
    return Scorer(graph, observation, config, verifier, embedder).score(candidate)


def top_k(scores: dict[int, float], k: int) -> list[int]:
    """Highest score first, ascending id on ties."""
    return [i for i, _ in heapq.nsmallest(k, scores.items(), key=lambda kv: (-kv[1], kv[0]))]


class SemanticHits(NamedTuple):
    nodes: list[int]
    edges: list[Edge]
    scores: dict[int, ScoreBreakdown]


def retrieve_semantic(
    graph: MemoryGraph,
    observation: str,
    config: RetrievalConfig,
    verifier: Verifier,
    embedder: Embedder | None = None,
) -> SemanticHits:
    candidates = graph.layer_index[Layer.SEMANTIC]
    if not candidates:
        return SemanticHits([], [], {})
    scorer = Scorer(graph, observation, config, verifier, embedder)
    scored = scorer.score_all(candidates)
    chosen = top_k({i: s.total for i, s in scored.items()}, config.k_sem)
    edges = [Edge(ANCHOR, i, EdgeKind.ACTIVATION) for i in chosen]
    return SemanticHits(chosen, edges, {i: scored[i] for i in chosen})


def retrieve_episodic(
    graph: MemoryGraph,
    observation: str,
    config: RetrievalConfig,
    embedder: Embedder | None = None,
    exclude: Iterable[int] = (),
) -> list[int]:
    excluded = set(exclude)
    candidates = [i for i in graph.layer_index[Layer.EPISODIC] if i not in excluded]
    if not candidates:
        return []
    query_vec = (embedder or default_embedder(graph))(observation)
    sims = {i: cosine(graph.nodes[i].embedding, query_vec) for i in candidates}
    return top_k(sims, config.k_epi)


def inherit_procedural(graph: MemoryGraph, episodes: Iterable[int]) -> list[int]:
    skills: set[int] = set()
    for epi in episodes:
        node = graph.node(epi)
        if node.layer is not Layer.EPISODIC:
            raise LayerMismatch(f"node {epi} is {node.layer.value}, expected episodic")
        skills.update(graph.neighbors(epi, EdgeKind.DISTILL, "out"))
    return sorted(skills)
