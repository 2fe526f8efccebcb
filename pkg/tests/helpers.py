"""Random graph sessions and brute-force oracles shared by several test modules."""

from __future__ import annotations

import math
import random

import numpy as np

from fluxmem.errors import (
    DimensionMismatch,
    DuplicateEdge,
    EmptyContent,
    KindViolation,
    UnknownEdge,
    UnknownNode,
)
from fluxmem.graph import EdgeKind, Layer, MemoryGraph

WORDS = "red blue green fox dog cat mat sun moon tree river stone bird fish road city".split()
LAYERS = (Layer.SEMANTIC, Layer.EPISODIC, Layer.PROCEDURAL)
RULES = {EdgeKind.GROUND: (Layer.SEMANTIC, Layer.EPISODIC), EdgeKind.DISTILL: (Layer.EPISODIC, Layer.PROCEDURAL)}


def random_text(rng: random.Random, lo: int = 1, hi: int = 6) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def random_vector(rng: random.Random, dim: int) -> np.ndarray:
    v = np.array([rng.gauss(0.0, 1.0) for _ in range(dim)])
    return v / np.linalg.norm(v)


def _legal_edge(graph: MemoryGraph, rng: random.Random):
    kind = rng.choice((EdgeKind.GROUND, EdgeKind.DISTILL))
    src_layer, dst_layer = RULES[kind]
    srcs, dsts = graph.layer_index[src_layer], graph.layer_index[dst_layer]
    if not srcs or not dsts:
        return None
    for _ in range(5):
        src, dst = rng.choice(srcs), rng.choice(dsts)
        if dst not in graph.neighbors(src, kind, "out"):
            return src, dst, kind
    return None


def random_legal_op(graph: MemoryGraph, rng: random.Random) -> str:
    """Apply one random legal mutation through the public API; returns its name."""
    roll = rng.random()
    if roll < 0.4 or not graph.nodes:
        layer = rng.choice(LAYERS)
        text = random_text(rng, 0 if layer is Layer.EPISODIC else 1)
        graph.add_node(layer, text, random_vector(rng, graph.dimension), {"n": str(rng.randint(0, 9))})
        return "add_node"
    if roll < 0.7:
        edge = _legal_edge(graph, rng)
        if edge is not None:
            graph.add_edge(*edge)
            return "add_edge"
        return random_legal_op(graph, rng)
    if roll < 0.8 and graph.edges:
        e = rng.choice(sorted(graph.edges, key=lambda e: e.sort_key()))
        graph.remove_edge(e.src, e.dst, e.kind)
        return "remove_edge"
    if roll < 0.9:
        node_id = rng.choice(sorted(graph.nodes))
        layer = graph.nodes[node_id].layer
        graph.rewrite_content(
            node_id, random_text(rng, 0 if layer is Layer.EPISODIC else 1), random_vector(rng, graph.dimension)
        )
        return "rewrite_content"
    graph.remove_node(rng.choice(sorted(graph.nodes)))
    return "remove_node"


def random_illegal_op(graph: MemoryGraph, rng: random.Random):
    """Return ``(expected_error, thunk)`` for one illegal mutation attempt."""
    dim = graph.dimension
    missing = graph.next_id + rng.randint(0, 50)
    by_layer = {layer: graph.layer_index[layer] for layer in LAYERS}
    options = [
        (EmptyContent, lambda: graph.add_node(rng.choice((Layer.SEMANTIC, Layer.PROCEDURAL)), "", random_vector(rng, dim))),
        (DimensionMismatch, lambda: graph.add_node(Layer.SEMANTIC, "x", random_vector(rng, dim + 1))),
        (UnknownNode, lambda: graph.remove_node(missing)),
        (UnknownNode, lambda: graph.rewrite_content(missing, "x", random_vector(rng, dim))),
    ]
    if graph.nodes:
        some = rng.choice(sorted(graph.nodes))
        options.append((UnknownNode, lambda: graph.add_edge(some, missing, EdgeKind.GROUND)))
        options.append((KindViolation, lambda: graph.add_edge(some, some, EdgeKind.ACTIVATION)))
        options.append((UnknownEdge, lambda: graph.remove_edge(some, missing, EdgeKind.DISTILL)))
    if by_layer[Layer.SEMANTIC] and by_layer[Layer.PROCEDURAL]:
        s, p = rng.choice(by_layer[Layer.SEMANTIC]), rng.choice(by_layer[Layer.PROCEDURAL])
        options.append((KindViolation, lambda: graph.add_edge(s, p, EdgeKind.GROUND)))
        options.append((KindViolation, lambda: graph.add_edge(p, s, EdgeKind.DISTILL)))
    if by_layer[Layer.SEMANTIC]:
        s = rng.choice(by_layer[Layer.SEMANTIC])
        options.append((EmptyContent, lambda: graph.rewrite_content(s, "", random_vector(rng, dim))))
    if graph.edges:
        e = rng.choice(sorted(graph.edges, key=lambda e: e.sort_key()))
        options.append((DuplicateEdge, lambda: graph.add_edge(e.src, e.dst, e.kind)))
    return rng.choice(options)


def random_graph(rng: random.Random, n_ops: int, dim: int = 16) -> MemoryGraph:
    graph = MemoryGraph(dim)
    for _ in range(n_ops):
        random_legal_op(graph, rng)
    return graph


# --- brute-force retrieval oracles ---------------------------------------------


def brute_cosine(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b)) / (na * nb)))


def brute_rank(scores: dict[int, float], k: int) -> list[int]:
    """Full sort: score descending, id ascending."""
    return [i for i, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))][:k]


def independent_bm25(query: str, doc_id: int, docs: dict[int, str], k1: float = 1.2, b: float = 0.75) -> float:
    from collections import Counter

    from fluxmem.embedding import tokenize

    toks = {i: tokenize(t) for i, t in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    tf = Counter(toks[doc_id])
    dl = len(toks[doc_id])
    total = 0.0
    for term in tokenize(query):
        df = sum(1 for t in toks.values() if term in t)
        if not tf[term]:
            continue
        w = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        total += w * tf[term] * (k1 + 1) / (tf[term] + k1 * (1 - b + b * dl / avgdl))
    return total


def random_memory(seed: int, n_nodes: int, dim: int = 256) -> tuple[MemoryGraph, random.Random]:
    """Random three-layer graph with hash embeddings and random ground/distill edges."""
    from fluxmem.embedding import embed

    rng = random.Random(seed)
    graph = MemoryGraph(dim)
    for _ in range(n_nodes):
        layer = rng.choices(LAYERS, weights=(5, 3, 1))[0]
        text = random_text(rng, 1, 8)
        graph.add_node(layer, text, embed(text, dim))
    for _ in range(n_nodes):
        edge = _legal_edge(graph, rng)
        if edge is not None:
            graph.add_edge(*edge)
    return graph, rng


def check_retrieval_oracles(seed: int, n_nodes: int) -> None:
    """Assert the three Stage-I ops equal brute-force scans on a random graph."""
    from fluxmem.embedding import HashEmbedder, cosine
    from fluxmem.retrieval import (
        JaccardVerifier,
        RetrievalConfig,
        hybrid_score,
        inherit_procedural,
        retrieve_episodic,
        retrieve_semantic,
    )

    graph, rng = random_memory(seed, n_nodes)
    embedder = HashEmbedder(graph.dimension)
    verifier = JaccardVerifier()
    config = RetrievalConfig(k_sem=rng.randint(1, 8), k_epi=rng.randint(1, 6))
    obs = random_text(rng, 1, 4)

    sem = graph.layer_index[Layer.SEMANTIC]
    totals = {i: hybrid_score(graph.nodes[i], obs, verifier, config, graph, embedder).total for i in sem}
    hits = retrieve_semantic(graph, obs, config, verifier, embedder)
    assert hits.nodes == brute_rank(totals, config.k_sem)

    # Spot-check the fused components against independent formulas.
    docs = {j: graph.nodes[j].content for j in sem}
    for i in sem[:3]:
        b = hybrid_score(graph.nodes[i], obs, verifier, config, graph, embedder)
        assert abs(b.dense - brute_cosine(graph.nodes[i].embedding, embedder(obs))) < 1e-9
        assert abs(b.sparse_raw - independent_bm25(obs, i, docs)) < 1e-9
        a, o = set(graph.nodes[i].content.split()), set(obs.split())
        assert b.verifier == int(len(a & o) / len(a | o) >= 0.1)

    epi = graph.layer_index[Layer.EPISODIC]
    q = embedder(obs)
    sims = {i: cosine(graph.nodes[i].embedding, q) for i in epi}
    for i in epi:
        assert abs(sims[i] - brute_cosine(graph.nodes[i].embedding, q)) < 1e-12
    assert retrieve_episodic(graph, obs, config, embedder) == brute_rank(sims, config.k_epi)

    chosen = rng.sample(epi, min(len(epi), rng.randint(0, 5))) if epi else []
    expected = sorted({e.dst for e in graph.edges if e.kind is EdgeKind.DISTILL and e.src in set(chosen)})
    assert inherit_procedural(graph, chosen) == expected


def _stage_one(seed: int, n_nodes: int):
    from fluxmem.context import StepAnchor, form_initial_subgraph
    from fluxmem.embedding import HashEmbedder
    from fluxmem.retrieval import JaccardVerifier, RetrievalConfig

    graph, rng = random_memory(seed, n_nodes)
    embedder = HashEmbedder(graph.dimension)
    cfg = RetrievalConfig(k_sem=rng.randint(1, 5), k_epi=rng.randint(1, 3), expand_budget=rng.randint(1, 4))
    anchor = StepAnchor(f"t{seed}", 0, random_text(rng, 1, 4), random_text(rng, 1, 3))
    sub = form_initial_subgraph(graph, anchor, cfg, JaccardVerifier(), embedder)
    return graph, rng, embedder, cfg, sub


def check_expand_prune_inverse(seed: int, n_nodes: int = 60) -> bool:
    """Returns whether the expand actually added anything."""
    from fluxmem.refinement import expand_links, prune_links
    from fluxmem.retrieval import JaccardVerifier

    graph, rng, embedder, cfg, sub = _stage_one(seed, n_nodes)
    hints = tuple(random_text(rng, 0, 2).split())
    expanded = expand_links(sub, graph, cfg.expand_budget, JaccardVerifier(), cfg, embedder, hints)
    added = [i for i in expanded.activated if i not in set(sub.activated)]
    if not added:
        assert expanded.edge_set() == sub.edge_set()
        return False
    pruned = prune_links(expanded, tuple(added))
    assert pruned.edge_set() == sub.edge_set()
    assert (pruned.sem, pruned.epi, pruned.proc) == (sub.sem, sub.epi, sub.proc)
    return True


def check_reshape_preserves_edges(seed: int, n_nodes: int = 60) -> bool:
    from collections import Counter

    from fluxmem.refinement import Granularity, halving_reshaper, reshape_unit

    graph, rng, embedder, cfg, sub = _stage_one(seed, n_nodes)
    if not sub.activated:
        return False
    target = rng.choice(sub.activated)
    persistent = Counter(graph.incident_edges(target))
    step = Counter(e for e in sub.edges if target in (e.src, e.dst))
    version = graph.nodes[target].version
    direction = rng.choice(list(Granularity))
    out = reshape_unit(sub, graph, target, direction, halving_reshaper, embedder)
    assert Counter(graph.incident_edges(target)) == persistent
    assert Counter(e for e in out.edges if target in (e.src, e.dst)) == step
    assert graph.nodes[target].version == version + 1
    return True


def check_pems_grid(n: int = 20) -> None:
    """Monotonicity of PEMS over an n*n*n grid, plus the scalar examples."""
    import math

    import numpy as np

    from fluxmem.consolidation import pems

    assert pems(0.0, 7, 0.3) == 0.0
    assert pems(1.0, 7, 1.0) == 0.0
    assert abs(pems(0.92, 100, 0.0) - 0.92 / math.log(100)) < 1e-9
    # 30-digit decimal evaluation of 0.92 / ln(100)
    assert abs(pems(0.92, 100, 0.0) - 0.199775461675495840) < 1e-9
    etas = np.linspace(0.05, 1.0, n)
    ells = np.unique(np.geomspace(2, 10_000, n).astype(int))
    deltas = np.linspace(0.0, 0.95, n)
    grid = np.array([[[pems(e, int(l), d) for d in deltas] for l in ells] for e in etas])
    assert np.all(np.diff(grid, axis=0) > 0)
    assert np.all(np.diff(grid, axis=1) < 0)
    assert np.all(np.diff(grid, axis=2) < 0)


def check_persistence_dual_path(seed: int, root, n_ops: int = 500, dim: int = 16) -> None:
    """Replay of a session's log equals a snapshot of its live graph."""
    from pathlib import Path

    from fluxmem.graph import MemoryGraph
    from fluxmem.persistence import EventLog, load_snapshot, replay, save_snapshot, snapshot_text

    rng = random.Random(seed)
    root = Path(root)
    log_path = root / f"s{seed}.fxm.log"
    snap_path = root / f"s{seed}.fxm.json"
    graph = MemoryGraph(dim)
    with EventLog(log_path) as log:
        graph.subscribe(log.listener)
        for _ in range(n_ops):
            random_legal_op(graph, rng)
    save_snapshot(graph, snap_path, log.last_seq)
    first = snap_path.read_bytes()
    replayed = replay(log_path, dim)
    loaded = load_snapshot(snap_path)
    assert replayed == loaded == graph
    save_snapshot(loaded, snap_path, log.last_seq)
    assert snap_path.read_bytes() == first
    assert snapshot_text(replayed, log.last_seq).encode() == first


class ScriptedServer:
    """Local HTTP server replying with a fixed script of (status, body) pairs.

    Once the script runs out the last entry repeats. Every request is
    recorded as ``(path, headers, json_body)``.
    """

    def __init__(self, script):
        import http.server
        import json
        import threading

        self.script = list(script)
        self.requests = []
        server = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"null")
                server.requests.append((self.path, dict(self.headers), body))
                status, payload = server.script.pop(0) if len(server.script) > 1 else server.script[0]
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def chat_reply(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def embed_reply(vectors) -> dict:
    return {"data": [{"index": i, "embedding": list(v)} for i, v in enumerate(vectors)]}


def fuzz_session(seed: int, n_legal: int, n_illegal: int, dim: int = 16) -> None:
    """Legal ops keep validate() empty after every step; illegal ones are
    rejected with the expected error and leave the graph untouched."""
    rng = random.Random(seed)
    g = MemoryGraph(dim)
    for _ in range(n_legal):
        random_legal_op(g, rng)
        problems = g.validate()
        assert problems == [], problems
    for _ in range(n_illegal):
        expected, attempt = random_illegal_op(g, rng)
        before = g.copy()
        try:
            attempt()
        except expected:
            pass
        else:
            raise AssertionError(f"illegal op accepted, expected {expected.__name__}")
        assert g == before
