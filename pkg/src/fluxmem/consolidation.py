"""Stage-III consolidation: commit episodes, cluster, induce and mature skills."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .context import (
    ActivatedSubgraph,
    ContextString,
    StepAnchor,
    parse_context,
    serialize_context,
    token_length,
)
from .embedding import cosine
from .errors import (
    AdapterError,
    ConsolidationAborted,
    DimensionMismatch,
    EmptyTrajectory,
    InductorUnavailable,
    SkillTooShort,
    UnknownNode,
)
from .graph import ANCHOR, Edge, EdgeKind, Layer, MemoryGraph, l2_normalize
from .refinement import Executor, Outcome
from .retrieval import Embedder, default_embedder

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    task_id: str
    steps: list[tuple[str, str]]
    outcome: Outcome = Outcome.SUCCESS
    used_nodes: list[int] = field(default_factory=list)
    query: str = ""


@dataclass
class EpisodeCluster:
    members: list[int]
    centroid: np.ndarray


@dataclass
class SkillRecord:
    node: int
    texts: list[str]
    embeddings: list[np.ndarray]
    source_cluster: EpisodeCluster

    @property
    def current_version(self) -> int:
        return len(self.texts) - 1

    @property
    def text(self) -> str:
        return self.texts[-1]


@dataclass(frozen=True)
class PemsReport:
    version: int
    eta: float
    ell: int
    delta: float
    score: float
    delta_score: float | None = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "eta": self.eta,
            "ell": self.ell,
            "delta": self.delta,
            "score": self.score,
            "delta_score": self.delta_score,
        }


@dataclass(frozen=True)
class ConsolidationConfig:
    cluster_threshold: float = 0.80
    epsilon: float = 0.002
    max_iters: int = 5
    rewrite_threshold: float = 0.15
    successful_only: bool = True

    def __post_init__(self):
        if not 0.0 < self.cluster_threshold < 1.0:
            raise ValueError("cluster_threshold must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass(frozen=True)
class Rerun:
    member: int
    success: bool
    context: ContextString


class Inductor(Protocol):
    def induce(self, texts: Sequence[str]) -> str: ...

    def rewrite(self, skill: str, reruns: Sequence[Rerun]) -> str: ...


class IntersectionInductor:
    """Reference inductor.

    ``induce`` keeps the multiset intersection of the members' whitespace
    tokens, in the order of the first (lowest-id) member. ``rewrite`` drops
    the skill token grounded in the fewest successful re-run contexts, or
    returns the skill unchanged when every token is grounded in all of them.
    """

    deterministic = True

    def induce(self, texts: Sequence[str]) -> str:
        if not texts:
            raise InductorUnavailable("nothing to induce from")
        remaining = Counter(texts[0].split())
        for text in texts[1:]:
            remaining &= Counter(text.split())
        kept = []
        for tok in texts[0].split():
            if remaining[tok] > 0:
                kept.append(tok)
                remaining[tok] -= 1
        return " ".join(kept)

    def rewrite(self, skill: str, reruns: Sequence[Rerun]) -> str:
        tokens = skill.split()
        grounds = []
        for r in reruns:
            if not r.success:
                continue
            parsed = parse_context(r.context.text)
            sections = dict(parsed.sections)
            sections.pop(Layer.PROCEDURAL, None)
            text = " ".join([parsed.query, parsed.observation] + [c for v in sections.values() for _, c in v])
            grounds.append(set(text.split()))
        if not grounds or len(tokens) <= 2:
            return skill
        counts = [sum(tok in g for g in grounds) for tok in tokens]
        low = min(counts)
        if low >= len(grounds):
            return skill
        # Last position among the least-grounded tokens goes first.
        drop = max(i for i, c in enumerate(counts) if c == low)
        return " ".join(tokens[:drop] + tokens[drop + 1 :])


# --- operations -------------------------------------------------------------


def commit_episode(graph: MemoryGraph, trajectory: Trajectory, embedder: Embedder | None = None) -> int:
    if not trajectory.steps:
        raise EmptyTrajectory(f"task {trajectory.task_id!r} has no steps")
    for node_id in trajectory.used_nodes:
        if node_id not in graph.nodes:
            raise UnknownNode(f"used node {node_id} not in graph")
    lines = [trajectory.query] if trajectory.query else []
    lines += [f"{obs} {act}".strip() for obs, act in trajectory.steps]
    content = "\n".join(lines)
    embedder = embedder or default_embedder(graph)
    meta = {
        "task_id": trajectory.task_id,
        "outcome": trajectory.outcome.value,
        "query": trajectory.query,
        "trajectory": json.dumps([list(s) for s in trajectory.steps]),
    }
    if trajectory.steps:
        meta["observation"] = trajectory.steps[-1][0]
    epi = graph.add_node(Layer.EPISODIC, content, embedder(content), meta)
    seen = set()
    for node_id in trajectory.used_nodes:
        if node_id in seen or graph.nodes[node_id].layer is not Layer.SEMANTIC:
            continue
        seen.add(node_id)
        graph.add_edge(node_id, epi, EdgeKind.GROUND)
    return epi


def _centroid(graph: MemoryGraph, members: list[int]) -> np.ndarray:
    mean = np.mean([graph.nodes[m].embedding for m in members], axis=0)
    return l2_normalize(mean)


def cluster_episodes(
    graph: MemoryGraph,
    theta: float,
    successful_only: bool = True,
    skip_distilled: bool = False,
) -> list[EpisodeCluster]:
    """Single-pass leader clustering in ascending id order.

    With ``skip_distilled`` episodes that already feed a skill are left out,
    so repeated consolidation only works on new experience.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    clusters: list[EpisodeCluster] = []
    for epi in graph.layer_index[Layer.EPISODIC]:
        node = graph.nodes[epi]
        if successful_only and node.meta.get("outcome", Outcome.SUCCESS.value) != Outcome.SUCCESS.value:
            continue
        if skip_distilled and graph.neighbors(epi, EdgeKind.DISTILL, "out"):
            continue
        for cluster in clusters:
            if cosine(node.embedding, cluster.centroid) >= theta:
                cluster.members.append(epi)
                cluster.centroid = _centroid(graph, cluster.members)
                break
        else:
            clusters.append(EpisodeCluster([epi], _centroid(graph, [epi])))
    return clusters


def induce_skill(
    graph: MemoryGraph,
    cluster: EpisodeCluster,
    inductor: Inductor,
    embedder: Embedder | None = None,
) -> SkillRecord:
    if not cluster.members:
        raise ValueError("cluster is empty")
    text = inductor.induce([graph.nodes[m].content for m in cluster.members])
    if token_length(text) < 2:
        raise SkillTooShort(f"induced skill has {token_length(text)} token(s)")
    embedder = embedder or default_embedder(graph)
    vec = embedder(text)
    node = graph.add_node(
        Layer.PROCEDURAL, text, vec, {"source": ",".join(map(str, cluster.members))}
    )
    for member in cluster.members:
        graph.add_edge(member, node, EdgeKind.DISTILL)
    return SkillRecord(node, [text], [graph.nodes[node].embedding], cluster)


def rerun_context(graph: MemoryGraph, episode: int, skill_node: int) -> tuple[StepAnchor, ContextString]:
    """Rebuild an episode's task context with the skill as its only guidance.

    The semantic section holds the facts that grounded the episode.
    """
    node = graph.nodes[episode]
    anchor = StepAnchor(
        node.meta.get("task_id", f"episode-{episode}"),
        0,
        node.meta.get("query") or node.content.split("\n", 1)[0] or "episode",
        node.meta.get("observation", ""),
    )
    sem = graph.neighbors(episode, EdgeKind.GROUND, "in")
    edges = [Edge(ANCHOR, i, EdgeKind.ACTIVATION) for i in sem + [skill_node]]
    sub = ActivatedSubgraph(anchor, sem, [], [skill_node], edges)
    return anchor, serialize_context(sub, graph)


def eta(graph: MemoryGraph, skill: SkillRecord, executor: Executor) -> tuple[float, list[Rerun]]:
    """Success rate of the skill's source episodes when re-run under it."""
    members = skill.source_cluster.members
    if not members:
        raise ValueError("skill has no source episodes")
    reruns = []
    for member in members:
        anchor, ctx = rerun_context(graph, member, skill.node)
        fb = executor(anchor, ctx)
        reruns.append(Rerun(member, fb.outcome is Outcome.SUCCESS, ctx))
    return sum(r.success for r in reruns) / len(members), reruns


def delta(current, previous) -> float:
    current = np.asarray(current)
    previous = np.asarray(previous)
    if current.shape != previous.shape:
        raise DimensionMismatch(f"delta of shapes {current.shape} and {previous.shape}")
    return min(1.0, max(0.0, (1.0 - cosine(current, previous)) / 2.0))


def pems(eta: float, ell: int, delta: float) -> float:
    """eta / ln(ell) * (1 - delta)."""
    if ell < 2:
        raise SkillTooShort(f"skill length {ell} < 2")
    return eta / math.log(ell) * (1.0 - delta)


@dataclass
class SkillHistory:
    record: SkillRecord
    reports: list[PemsReport] = field(default_factory=list)

    @property
    def final_score(self) -> float:
        return self.reports[-1].score


def _score(graph: MemoryGraph, skill: SkillRecord, executor: Executor, prev: PemsReport | None):
    rate, reruns = eta(graph, skill, executor)
    ell = token_length(skill.text)
    d = 0.0 if skill.current_version == 0 else delta(skill.embeddings[-1], skill.embeddings[-2])
    score = pems(rate, ell, d)
    change = None if prev is None else score - prev.score
    return PemsReport(skill.current_version, rate, ell, d, score, change), reruns


def consolidate_loop(
    graph: MemoryGraph,
    executor: Executor,
    inductor: Inductor,
    config: ConsolidationConfig = ConsolidationConfig(),
    embedder: Embedder | None = None,
) -> list[SkillHistory]:
    """Cluster, induce, then test-score-rewrite each skill until it settles.

    Only episodes not yet distilled into a skill are clustered.

    A skill stops once its score reaches ``rewrite_threshold``, once
    ``|dPEMS| < epsilon``, or after ``max_iters`` scoring passes. A rewrite
    that returns the same text adds no version; the next pass then rescores
    that version unchanged. Adapter failures raise
    :class:`ConsolidationAborted` carrying the reports gathered so far.
    """
    embedder = embedder or default_embedder(graph)
    histories: list[SkillHistory] = []
    try:
        _consolidate(graph, executor, inductor, config, embedder, histories)
    except AdapterError as exc:
        raise ConsolidationAborted(f"consolidation stopped: {exc}", histories) from exc
    return histories


def _consolidate(graph, executor, inductor, config, embedder, histories: list[SkillHistory]) -> None:
    clusters = cluster_episodes(
        graph, config.cluster_threshold, config.successful_only, skip_distilled=True
    )
    for cluster in clusters:
        try:
            record = induce_skill(graph, cluster, inductor, embedder)
        except SkillTooShort as exc:
            log.info("skipping cluster %s: %s", cluster.members, exc)
            continue
        histories.append(SkillHistory(record))

    for history in histories:
        skill = history.record
        prev = None
        for it in range(config.max_iters):
            report, reruns = _score(graph, skill, executor, prev)
            history.reports.append(report)
            prev = report
            if report.delta_score is not None and abs(report.delta_score) < config.epsilon:
                break
            if report.score >= config.rewrite_threshold or it == config.max_iters - 1:
                break
            new_text = inductor.rewrite(skill.text, reruns)
            if new_text != skill.text and token_length(new_text) >= 2:
                graph.rewrite_content(skill.node, new_text, embedder(new_text))
                skill.texts.append(new_text)
                skill.embeddings.append(graph.nodes[skill.node].embedding)


def mean_pems_series(histories: Sequence[SkillHistory]) -> list[float]:
    """Mean score per scoring pass; a settled skill keeps its final score."""
    if not histories:
        return []
    passes = max(len(h.reports) for h in histories)
    return [
        sum(h.reports[min(k, len(h.reports) - 1)].score for h in histories) / len(histories)
        for k in range(passes)
    ]


def reports_to_jsonl(histories: Sequence[SkillHistory]) -> str:
    lines = []
    for h in histories:
        for r in h.reports:
            lines.append(json.dumps({"skill": h.record.node, **r.to_dict()}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def plateau_table(series: Sequence[float]) -> str:
    rows = ["version\tscore"] + [f"{k}\t{s:.6f}" for k, s in enumerate(series)]
    return "\n".join(rows) + "\n"
