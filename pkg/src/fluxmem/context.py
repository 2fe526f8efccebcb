"""Activated step subgraph and its serialization into the agent context.

Context text layout (UTF-8, ``\\n`` line endings)::

    ### QUERY
    <query>
    ### OBSERVATION
    <observation>
    ### SEMANTIC
    [<id>] <content>
    ### EPISODIC
    [<id>] <content>
    ### PROCEDURAL
    [<id>] <content>

Every value is escaped onto a single line (``\\`` -> ``\\\\``, newline ->
``\\n``, carriage return -> ``\\r``). A bypassed subgraph emits only the
first two sections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .errors import StaleNodeRef
from .graph import ANCHOR, Edge, EdgeKind, Layer, MemoryGraph
from .retrieval import (
    Embedder,
    RetrievalConfig,
    ScoreBreakdown,
    Verifier,
    inherit_procedural,
    retrieve_episodic,
    retrieve_semantic,
)

HEADERS = {
    "query": "### QUERY",
    "observation": "### OBSERVATION",
    Layer.SEMANTIC: "### SEMANTIC",
    Layer.EPISODIC: "### EPISODIC",
    Layer.PROCEDURAL: "### PROCEDURAL",
}
_MEMORY_LAYERS = (Layer.SEMANTIC, Layer.EPISODIC, Layer.PROCEDURAL)


@dataclass(frozen=True)
class StepAnchor:
    task_id: str
    step: int
    query: str
    observation: str = ""

    @property
    def probe(self) -> str:
        """Text retrieval is scored against: the observation, else the query."""
        return self.observation or self.query

    def next(self, observation: str) -> "StepAnchor":
        return replace(self, step=self.step + 1, observation=observation)


@dataclass
class ActivatedSubgraph:
    anchor: StepAnchor
    sem: list[int] = field(default_factory=list)
    epi: list[int] = field(default_factory=list)
    proc: list[int] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)
    bypassed: bool = False
    scores: dict[int, ScoreBreakdown] = field(default_factory=dict)

    def layer_list(self, layer: Layer) -> list[int]:
        return {Layer.SEMANTIC: self.sem, Layer.EPISODIC: self.epi, Layer.PROCEDURAL: self.proc}[
            layer
        ]

    @property
    def activated(self) -> list[int]:
        return self.sem + self.epi + self.proc

    def is_empty(self) -> bool:
        """True when nothing from memory would reach the context."""
        return self.bypassed or not (self.sem or self.epi or self.proc)

    def copy(self) -> "ActivatedSubgraph":
        return ActivatedSubgraph(
            self.anchor,
            list(self.sem),
            list(self.epi),
            list(self.proc),
            list(self.edges),
            self.bypassed,
            dict(self.scores),
        )

    def edge_set(self) -> set[Edge]:
        return set(self.edges)


class ContextString(NamedTuple):
    text: str
    provenance: list[tuple[str, int]]


def escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def unescape(value: str) -> str:
    out, i = [], 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def form_initial_subgraph(
    graph: MemoryGraph,
    anchor: StepAnchor,
    config: RetrievalConfig,
    verifier: Verifier,
    embedder: Embedder | None = None,
) -> ActivatedSubgraph:
    if not anchor.query:
        raise ValueError("anchor query must be non-empty")
    probe = anchor.probe
    hits = retrieve_semantic(graph, probe, config, verifier, embedder)
    # An episode already committed for this very task is not "past experience".
    own = [
        i
        for i in graph.layer_index[Layer.EPISODIC]
        if graph.nodes[i].meta.get("task_id") == anchor.task_id
    ]
    epi = retrieve_episodic(graph, probe, config, embedder, exclude=own)
    proc = inherit_procedural(graph, epi)
    edges = list(hits.edges)
    edges += [Edge(ANCHOR, i, EdgeKind.ACTIVATION) for i in epi]
    edges += [Edge(ANCHOR, i, EdgeKind.ACTIVATION) for i in proc]
    proc_set = set(proc)
    for e in epi:
        edges += [
            Edge(e, p, EdgeKind.DISTILL)
            for p in graph.neighbors(e, EdgeKind.DISTILL, "out")
            if p in proc_set
        ]
    return ActivatedSubgraph(anchor, list(hits.nodes), epi, proc, edges, False, dict(hits.scores))


def _episode_text(graph: MemoryGraph, node_id: int, full_trajectory: bool) -> str:
    node = graph.nodes[node_id]
    if not full_trajectory or "trajectory" not in node.meta:
        return node.content
    steps = json.loads(node.meta["trajectory"])
    return " | ".join(f"step {i}: obs={o} act={a}" for i, (o, a) in enumerate(steps))


def serialize_context(
    subgraph: ActivatedSubgraph, graph: MemoryGraph, full_trajectory: bool = False
) -> ContextString:
    anchor = subgraph.anchor
    lines = [HEADERS["query"], escape(anchor.query), HEADERS["observation"], escape(anchor.observation)]
    provenance: list[tuple[str, int]] = []
    if not subgraph.bypassed:
        for layer in _MEMORY_LAYERS:
            lines.append(HEADERS[layer])
            for node_id in subgraph.layer_list(layer):
                if node_id not in graph.nodes:
                    raise StaleNodeRef(f"node {node_id} no longer exists")
                if layer is Layer.EPISODIC:
                    content = _episode_text(graph, node_id, full_trajectory)
                else:
                    content = graph.nodes[node_id].content
                lines.append(f"[{node_id}] {escape(content)}")
                provenance.append((layer.value, node_id))
    return ContextString("\n".join(lines) + "\n", provenance)


@dataclass
class ParsedContext:
    query: str
    observation: str
    sections: dict[Layer, list[tuple[int, str]]]

    def memory_text(self) -> str:
        return "\n".join(c for layer in _MEMORY_LAYERS for _, c in self.sections.get(layer, []))


def parse_context(text: str) -> ParsedContext:
    """Inverse of :func:`serialize_context` for the text part."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 4 or lines[0] != HEADERS["query"] or lines[2] != HEADERS["observation"]:
        raise ValueError("not a serialized context")
    sections: dict[Layer, list[tuple[int, str]]] = {}
    by_header = {HEADERS[layer]: layer for layer in _MEMORY_LAYERS}
    current: Layer | None = None
    for line in lines[4:]:
        if line in by_header:
            current = by_header[line]
            sections[current] = []
            continue
        if current is None or not line.startswith("["):
            raise ValueError(f"unexpected context line: {line[:40]!r}")
        close = line.index("] ")
        sections[current].append((int(line[1:close]), unescape(line[close + 2 :])))
    return ParsedContext(unescape(lines[1]), unescape(lines[3]), sections)


def token_length(text: str) -> int:
    """Whitespace token count."""
    return len(text.split())
