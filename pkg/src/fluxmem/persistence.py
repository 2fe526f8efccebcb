"""Snapshots, the append-only event log, replay and DOT export.

Two file formats:

* ``*.fxm.json`` holds the canonical snapshot with sorted keys, compact separators,
  embeddings written with ``%.9g``. Identical graphs give identical bytes.
* ``*.fxm.log`` holds one JSON object per line, ``{"seq", "kind", "payload"}``,
  with ``seq`` gap-free from 1.

A :class:`Store` directory holds both. The log is never truncated, so
replaying it alone rebuilds the graph; the snapshot only saves the replay.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    FormatVersionMismatch,
    LogParseError,
    PersistenceError,
    SeqGap,
    StoreLocked,
    ValidateFailed,
)
from .graph import DEFAULT_DIMENSION, Edge, EdgeKind, Layer, MemoryGraph

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EVENT_KINDS = ("AddNode", "RemoveNode", "AddEdge", "RemoveEdge", "RewriteContent")
SNAPSHOT_NAME = "graph.fxm.json"
LOG_NAME = "graph.fxm.log"
LOCK_NAME = ".lock"


@dataclass(frozen=True)
class EventRecord:
    seq: int
    kind: str
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )


class EventLog:
    """Exclusive append-only writer; every append is flushed before returning."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.last_seq = 0
        if self.path.exists():
            for _, record in iter_events(self.path):
                self.last_seq = record.seq
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: EventRecord) -> None:
        if record.kind not in EVENT_KINDS:
            raise PersistenceError(f"unknown event kind {record.kind!r}")
        if record.seq != self.last_seq + 1:
            raise SeqGap(f"expected seq {self.last_seq + 1}, got {record.seq}")
        self._fh.write(record.to_line() + "\n")
        self._fh.flush()
        self.last_seq = record.seq

    def listener(self, kind: str, payload: dict) -> None:
        """Graph listener: log each mutation as the next event."""
        self.append(EventRecord(self.last_seq + 1, kind, payload))

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_event(log_: EventLog, record: EventRecord) -> None:
    log_.append(record)


def iter_events(path: str | os.PathLike):
    """Yield ``(line_no, EventRecord)`` with seq and shape checks."""
    expected = 1
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = EventRecord(int(obj["seq"]), str(obj["kind"]), dict(obj["payload"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise LogParseError(line_no, str(exc)) from None
            if record.kind not in EVENT_KINDS:
                raise LogParseError(line_no, f"unknown event kind {record.kind!r}")
            if record.seq != expected:
                raise SeqGap(f"line {line_no}: expected seq {expected}, got {record.seq}")
            expected += 1
            yield line_no, record


def apply_event(graph: MemoryGraph, record: EventRecord) -> None:
    p = record.payload
    if record.kind == "AddNode":
        if p["id"] != graph.next_id:
            raise PersistenceError(f"AddNode id {p['id']} but next id is {graph.next_id}")
        graph.add_node(Layer(p["layer"]), p["content"], p["embedding"], p.get("meta"))
    elif record.kind == "RemoveNode":
        graph.remove_node(p["id"])
    elif record.kind == "AddEdge":
        graph.add_edge(p["src"], p["dst"], EdgeKind(p["kind"]))
    elif record.kind == "RemoveEdge":
        graph.remove_edge(p["src"], p["dst"], EdgeKind(p["kind"]))
    elif record.kind == "RewriteContent":
        graph.rewrite_content(p["id"], p["content"], p["embedding"])


def _infer_dimension(path: Path) -> int:
    for _, record in iter_events(path):
        if record.kind == "AddNode":
            return len(record.payload["embedding"])
    return DEFAULT_DIMENSION


def replay(
    path: str | os.PathLike,
    dimension: int | None = None,
    base: MemoryGraph | None = None,
    after_seq: int = 0,
) -> MemoryGraph:
    """Rebuild a graph by applying logged events in order.

    With ``base`` the events with ``seq > after_seq`` are applied on top of
    it (used to catch a snapshot up with the log tail).
    """
    path = Path(path)
    if base is None:
        base = MemoryGraph(dimension or _infer_dimension(path))
    for line_no, record in iter_events(path):
        if record.seq <= after_seq:
            continue
        try:
            apply_event(base, record)
        except (PersistenceError, ValueError, KeyError) as exc:
            raise LogParseError(line_no, f"cannot apply {record.kind}: {exc}") from None
    return base


# --- snapshots ---------------------------------------------------------------


def _format_vector(values) -> str:
    return "[" + ",".join(format(float(x) + 0.0, ".9g") for x in values) + "]"


def snapshot_text(graph: MemoryGraph, last_event_seq: int = 0) -> str:
    """Canonical JSON text of a graph.

    Embeddings are spliced in as ``%.9g`` literals after the rest of the
    document is dumped with sorted keys, so the byte layout is fixed.
    """
    nodes, vectors = [], {}
    for node_id in sorted(graph.nodes):
        record = graph.nodes[node_id].to_record()
        marker = f"@emb{node_id}@"
        # Keyed on the property name: quotes inside content are always escaped.
        vectors[f'"embedding":"{marker}"'] = '"embedding":' + _format_vector(record["embedding"])
        record["embedding"] = marker
        nodes.append(record)
    doc = {
        "format_version": FORMAT_VERSION,
        "dimension": graph.dimension,
        "next_id": graph.next_id,
        "last_event_seq": last_event_seq,
        "nodes": nodes,
        "edges": [[e.src, e.dst, e.kind.value] for e in sorted(graph.edges, key=Edge.sort_key)],
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    for marker, vec in vectors.items():
        text = text.replace(marker, vec, 1)
    return text + "\n"


def save_snapshot(graph: MemoryGraph, path: str | os.PathLike, last_event_seq: int = 0) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(snapshot_text(graph, last_event_seq), encoding="utf-8")
    os.replace(tmp, path)


def read_snapshot(path: str | os.PathLike) -> tuple[MemoryGraph, int]:
    """Load a snapshot; returns the graph and the last event seq it covers."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LogParseError(exc.lineno, exc.msg) from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"snapshot format {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    try:
        graph = MemoryGraph.from_records(
            int(doc["dimension"]), doc["nodes"], doc["edges"], int(doc["next_id"])
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ValidateFailed([f"malformed record: {exc}"]) from None
    problems = graph.validate()
    if problems:
        raise ValidateFailed(problems)
    return graph, int(doc.get("last_event_seq", 0))


def load_snapshot(path: str | os.PathLike) -> MemoryGraph:
    return read_snapshot(path)[0]


# --- DOT ---------------------------------------------------------------------

_LAYER_COLORS = {
    Layer.SEMANTIC: "lightblue",
    Layer.EPISODIC: "khaki",
    Layer.PROCEDURAL: "palegreen",
}


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(graph: MemoryGraph, max_label: int = 40) -> str:
    lines = ["digraph fluxmem {", "  node [shape=box, style=filled];"]
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        snippet = node.content if len(node.content) <= max_label else node.content[:max_label] + "..."
        label = f"[{node_id}] {node.layer.value}\n{snippet}"
        lines.append(
            f"  n{node_id} [label={_dot_quote(label)}, fillcolor={_LAYER_COLORS[node.layer]}];"
        )
    for edge in sorted(graph.edges, key=Edge.sort_key):
        lines.append(f"  n{edge.src} -> n{edge.dst} [label={_dot_quote(edge.kind.value)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- store -------------------------------------------------------------------


class Store:
    """A store directory: snapshot, event log and an advisory lock.

    Opening takes the lock, loads the snapshot and replays any log tail it
    does not cover, then attaches the log as a graph listener. ``close``
    writes a fresh snapshot and releases the lock.
    """

    def __init__(self, root: str | os.PathLike, dimension: int = DEFAULT_DIMENSION):
        self.root = Path(root)
        self.dimension = dimension
        self.graph: MemoryGraph | None = None
        self.log: EventLog | None = None
        self._lock_fh = None

    @property
    def snapshot_path(self) -> Path:
        return self.root / SNAPSHOT_NAME

    @property
    def log_path(self) -> Path:
        return self.root / LOG_NAME

    def open(self) -> MemoryGraph:
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(self.root / LOCK_NAME, "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            self._lock_fh = None
            raise StoreLocked(f"store {self.root} is in use by another process") from None
        covered = 0
        if self.snapshot_path.exists():
            graph, covered = read_snapshot(self.snapshot_path)
        else:
            graph = MemoryGraph(self.dimension)
        if self.log_path.exists():
            graph = replay(self.log_path, base=graph, after_seq=covered)
        self.log = EventLog(self.log_path)
        graph.subscribe(self.log.listener)
        self.graph = graph
        log.debug("opened store %s at seq %d", self.root, self.log.last_seq)
        return graph

    def checkpoint(self) -> None:
        if self.graph is None or self.log is None:
            raise PersistenceError("store is not open")
        save_snapshot(self.graph, self.snapshot_path, self.log.last_seq)

    def close(self, checkpoint: bool = True) -> None:
        try:
            if checkpoint and self.graph is not None:
                self.checkpoint()
        finally:
            if self.graph is not None and self.log is not None:
                self.graph.unsubscribe(self.log.listener)
            if self.log is not None:
                self.log.close()
            if self._lock_fh is not None:
                fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
                self._lock_fh.close()
            self.graph = self.log = self._lock_fh = None

    def __enter__(self) -> "Store":
        self.open()
        return self

    def __exit__(self, exc_type, *exc):
        self.close()
