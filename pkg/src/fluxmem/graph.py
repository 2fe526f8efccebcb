"""Layer-typed heterogeneous memory graph.

Nodes live in one of three layers (semantic, episodic, procedural). Two
persistent edge kinds link them bottom-up: ``GROUND`` (semantic -> episodic)
and ``DISTILL`` (episodic -> procedural). ``ACTIVATION`` edges belong to a
single step's activated subgraph and are never stored here.

Every mutation is announced to registered listeners as ``(kind, payload)``
so an event log can mirror the graph without the graph knowing about files.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateEdge,
    EmptyContent,
    KindViolation,
    UnknownEdge,
    UnknownNode,
)

DEFAULT_DIMENSION = 256

# Source endpoint used for activation edges; the step anchor is not a graph node.
ANCHOR = -1


class Layer(str, Enum):
    SEMANTIC = "semantic"
    EPISODIC = "episodic"
    PROCEDURAL = "procedural"


class EdgeKind(str, Enum):
    GROUND = "ground"
    DISTILL = "distill"
    ACTIVATION = "activation"


class Direction(str, Enum):
    OUT = "out"
    IN = "in"


_EDGE_RULES = {
    EdgeKind.GROUND: (Layer.SEMANTIC, Layer.EPISODIC),
    EdgeKind.DISTILL: (Layer.EPISODIC, Layer.PROCEDURAL),
}


class Edge(NamedTuple):
    src: int
    dst: int
    kind: EdgeKind

    def sort_key(self) -> tuple[int, int, str]:
        return (self.src, self.dst, self.kind.value)


class Violation(NamedTuple):
    kind: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}({self.subject}): {self.message}"


def quantize(values, dimension: int | None = None) -> np.ndarray:
    """Coerce to a read-only float64 vector rounded to 9 significant digits.

    Stored embeddings are kept at the precision the snapshot format writes,
    so a save/load or log replay reproduces them bit for bit.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"embedding must be 1-D, got shape {arr.shape}")
    if dimension is not None and arr.shape[0] != dimension:
        raise DimensionMismatch(f"embedding has {arr.shape[0]} dims, graph expects {dimension}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    out = arr.copy()
    # Zeros are exact already; hash embeddings are mostly zeros.
    nz = np.flatnonzero(arr)
    out[nz] = [float(f"{x:.9g}") for x in arr[nz].tolist()]
    out.setflags(write=False)
    return out


@dataclass(eq=False)
class MemoryNode:
    id: int
    layer: Layer
    content: str
    embedding: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)
    version: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryNode):
            return NotImplemented
        return (
            self.id == other.id
            and self.layer == other.layer
            and self.content == other.content
            and self.meta == other.meta
            and self.version == other.version
            and np.array_equal(self.embedding, other.embedding)
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "layer": self.layer.value,
            "content": self.content,
            "embedding": self.embedding.tolist(),
            "meta": dict(self.meta),
            "version": self.version,
        }


Listener = Callable[[str, dict], None]


class MemoryGraph:
    """The persistent memory graph.

    Mutations take an internal lock, so one writer at a time; reads are
    lock-free and must not run concurrently with a writer.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.nodes: dict[int, MemoryNode] = {}
        self.edges: set[Edge] = set()
        self.layer_index: dict[Layer, list[int]] = {layer: [] for layer in Layer}
        self.next_id = 0
        self.revision = 0
        self._out: dict[tuple[int, EdgeKind], set[int]] = {}
        self._in: dict[tuple[int, EdgeKind], set[int]] = {}
        self._listeners: list[Listener] = []
        self._lock = threading.RLock()

    # -- listeners ---------------------------------------------------------

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def unsubscribe(self, listener: Listener) -> None:
        self._listeners.remove(listener)

    def _emit(self, kind: str, payload: dict) -> None:
        self.revision += 1
        for listener in self._listeners:
            listener(kind, payload)

    # -- mutation ----------------------------------------------------------

    def add_node(
        self,
        layer: Layer,
        content: str,
        embedding,
        meta: dict[str, str] | None = None,
    ) -> int:
        layer = Layer(layer)
        vec = quantize(embedding, self.dimension)
        if layer is not Layer.EPISODIC and not content:
            raise EmptyContent(f"{layer.value} nodes need non-empty content")
        meta = {str(k): str(v) for k, v in (meta or {}).items()}
        with self._lock:
            node_id = self.next_id
            self.nodes[node_id] = MemoryNode(node_id, layer, content, vec, meta, 0)
            self.layer_index[layer].append(node_id)
            self.next_id += 1
            self._emit(
                "AddNode",
                {
                    "id": node_id,
                    "layer": layer.value,
                    "content": content,
                    "embedding": vec.tolist(),
                    "meta": dict(meta),
                },
            )
        return node_id

    def add_edge(self, src: int, dst: int, kind: EdgeKind) -> None:
        kind = EdgeKind(kind)
        a, b = self._require(src), self._require(dst)
        self._check_kind(a, b, kind)
        edge = Edge(src, dst, kind)
        with self._lock:
            if edge in self.edges:
                raise DuplicateEdge(f"{kind.value} edge {src}->{dst} already present")
            self._link(edge)
            self._emit("AddEdge", {"src": src, "dst": dst, "kind": kind.value})

    def remove_edge(self, src: int, dst: int, kind: EdgeKind) -> None:
        edge = Edge(src, dst, EdgeKind(kind))
        with self._lock:
            if edge not in self.edges:
                raise UnknownEdge(f"no {edge.kind.value} edge {src}->{dst}")
            self._unlink(edge)
            self._emit("RemoveEdge", {"src": src, "dst": dst, "kind": edge.kind.value})

    def remove_node(self, node_id: int) -> None:
        node = self._require(node_id)
        with self._lock:
            # Incident edges go first, each as its own event, so replay stays op-for-op.
            for edge in sorted(self.incident_edges(node_id), key=Edge.sort_key):
                self._unlink(edge)
                self._emit(
                    "RemoveEdge", {"src": edge.src, "dst": edge.dst, "kind": edge.kind.value}
                )
            del self.nodes[node_id]
            self.layer_index[node.layer].remove(node_id)
            self._emit("RemoveNode", {"id": node_id})

    def rewrite_content(self, node_id: int, content: str, embedding) -> int:
        """Replace a node's content in place; returns the new version."""
        node = self._require(node_id)
        if node.layer is not Layer.EPISODIC and not content:
            raise EmptyContent(f"{node.layer.value} nodes need non-empty content")
        vec = quantize(embedding, self.dimension)
        with self._lock:
            node.content = content
            node.embedding = vec
            node.version += 1
            self._emit(
                "RewriteContent",
                {"id": node_id, "content": content, "embedding": vec.tolist()},
            )
        return node.version

    # -- queries -----------------------------------------------------------

    def node(self, node_id: int) -> MemoryNode:
        return self._require(node_id)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def layer(self, layer: Layer) -> list[int]:
        return list(self.layer_index[Layer(layer)])

    def neighbors(
        self, node_id: int, kind: EdgeKind, direction: Direction | str = Direction.OUT
    ) -> list[int]:
        self._require(node_id)
        index = self._out if Direction(direction) is Direction.OUT else self._in
        return sorted(index.get((node_id, EdgeKind(kind)), ()))

    def incident_edges(self, node_id: int) -> list[Edge]:
        out = []
        for kind in (EdgeKind.GROUND, EdgeKind.DISTILL):
            out.extend(Edge(node_id, d, kind) for d in self._out.get((node_id, kind), ()))
            out.extend(Edge(s, node_id, kind) for s in self._in.get((node_id, kind), ()))
        return out

    def edges_of_kind(self, kind: EdgeKind) -> list[Edge]:
        kind = EdgeKind(kind)
        return sorted((e for e in self.edges if e.kind is kind), key=Edge.sort_key)

    def validate(self) -> list[Violation]:
        """Report every broken invariant; never raises."""
        found: list[Violation] = []
        ids = sorted(self.nodes)
        shaped = []
        for node_id in ids:
            node = self.nodes[node_id]
            subject = f"node {node_id}"
            if node.id != node_id:
                found.append(Violation("IdMismatch", subject, f"record carries id {node.id}"))
            if node_id >= self.next_id or node_id < 0:
                found.append(Violation("IdOrder", subject, f"id not below next_id {self.next_id}"))
            emb = np.asarray(node.embedding)
            if emb.ndim != 1 or emb.shape[0] != self.dimension:
                found.append(Violation("DimensionMismatch", subject, f"shape {emb.shape}"))
            else:
                shaped.append((node_id, emb))
            if node.layer is not Layer.EPISODIC and not node.content:
                found.append(Violation("EmptyContent", subject, f"{node.layer.value} node"))
            if node.version < 0:
                found.append(Violation("BadVersion", subject, str(node.version)))
        if shaped:
            # One vectorized pass for the numeric checks.
            matrix = np.stack([emb for _, emb in shaped]).astype(np.float64)
            finite = np.all(np.isfinite(matrix), axis=1)
            norms = np.linalg.norm(np.where(finite[:, None], matrix, 0.0), axis=1)
            for (node_id, _), ok, norm in zip(shaped, finite.tolist(), norms.tolist()):
                if not ok:
                    found.append(Violation("NonFinite", f"node {node_id}", "embedding has non-finite values"))
                elif norm != 0.0 and abs(norm - 1.0) > 1e-6:
                    found.append(Violation("NotNormalized", f"node {node_id}", f"norm {norm:.9g}"))
        for edge in sorted(self.edges, key=Edge.sort_key):
            subject = f"edge {edge.src}->{edge.dst} {edge.kind.value}"
            src, dst = self.nodes.get(edge.src), self.nodes.get(edge.dst)
            if src is None or dst is None:
                found.append(Violation("DanglingEdge", subject, "endpoint missing"))
                continue
            rule = _EDGE_RULES.get(edge.kind)
            if rule is None:
                found.append(Violation("KindViolation", subject, "kind not allowed in graph"))
            elif (src.layer, dst.layer) != rule:
                found.append(
                    Violation(
                        "KindViolation",
                        subject,
                        f"{src.layer.value}->{dst.layer.value} not allowed",
                    )
                )
        for layer in Layer:
            expected = sorted(i for i, n in self.nodes.items() if n.layer is layer)
            if self.layer_index.get(layer) != expected:
                found.append(Violation("LayerIndex", layer.value, "index out of sync"))
        return found

    # -- equality / copies -------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryGraph):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.next_id == other.next_id
            and self.edges == other.edges
            and self.nodes.keys() == other.nodes.keys()
            and all(self.nodes[k] == other.nodes[k] for k in self.nodes)
        )

    __hash__ = None  # type: ignore[assignment]

    def copy(self) -> "MemoryGraph":
        """Deep copy without listeners."""
        clone = MemoryGraph(self.dimension)
        for node_id, node in self.nodes.items():
            clone.nodes[node_id] = MemoryNode(
                node.id, node.layer, node.content, node.embedding, dict(node.meta), node.version
            )
        clone.layer_index = {layer: list(ids) for layer, ids in self.layer_index.items()}
        for edge in self.edges:
            clone._link(edge)
        clone.next_id = self.next_id
        return clone

    @classmethod
    def from_records(
        cls,
        dimension: int,
        nodes: Iterable[dict],
        edges: Iterable[tuple[int, int, str]],
        next_id: int,
    ) -> "MemoryGraph":
        """Build a graph from raw records without running the typing checks.

        Used by the loaders, which call :meth:`validate` afterwards so that a
        tampered file is reported rather than silently repaired.
        """
        graph = cls(dimension)
        for rec in nodes:
            layer = Layer(rec["layer"])
            emb = np.asarray(rec["embedding"], dtype=np.float64)
            emb.setflags(write=False)
            node = MemoryNode(
                int(rec["id"]),
                layer,
                rec["content"],
                emb,
                {str(k): str(v) for k, v in rec.get("meta", {}).items()},
                int(rec.get("version", 0)),
            )
            graph.nodes[node.id] = node
            graph.layer_index[layer].append(node.id)
        for layer in Layer:
            graph.layer_index[layer].sort()
        for src, dst, kind in edges:
            graph._link(Edge(int(src), int(dst), EdgeKind(kind)))
        graph.next_id = int(next_id)
        return graph

    # -- internals ---------------------------------------------------------

    def _require(self, node_id: int) -> MemoryNode:
        try:
            return self.nodes[node_id]
        except (KeyError, TypeError):
            raise UnknownNode(f"no node {node_id!r}") from None

    @staticmethod
    def _check_kind(src: MemoryNode, dst: MemoryNode, kind: EdgeKind) -> None:
        rule = _EDGE_RULES.get(kind)
        if rule is None:
            raise KindViolation("activation edges are step-scoped and not stored in the graph")
        if (src.layer, dst.layer) != rule:
            raise KindViolation(
                f"{kind.value} edges go {rule[0].value}->{rule[1].value}, "
                f"got {src.layer.value}->{dst.layer.value}"
            )

    def _link(self, edge: Edge) -> None:
        self.edges.add(edge)
        self._out.setdefault((edge.src, edge.kind), set()).add(edge.dst)
        self._in.setdefault((edge.dst, edge.kind), set()).add(edge.src)

    def _unlink(self, edge: Edge) -> None:
        self.edges.discard(edge)
        self._out.get((edge.src, edge.kind), set()).discard(edge.dst)
        self._in.get((edge.dst, edge.kind), set()).discard(edge.src)


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not math.isfinite(norm):
        return np.zeros_like(vec, dtype=np.float64)
    return vec / norm
