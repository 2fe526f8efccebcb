"""Command-line entry point.

Each invocation opens one store directory under an advisory lock, does one
job and exits. Exit codes: 0 success, 1 usage or input error, 2 task
failure, 3 adapter error. With ``--format json`` the primary output is
line-delimited JSON only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapters import AdapterSuite, RemoteConfig, reference_suite, remote_suite
from .bm25 import Bm25Params
from .consolidation import (
    ConsolidationConfig,
    Trajectory,
    commit_episode,
    consolidate_loop,
    reports_to_jsonl,
)
from .context import StepAnchor, form_initial_subgraph, serialize_context
from .embedding import HashEmbedder
from .errors import AdapterError, FluxMemError, LogParseError
from .graph import EdgeKind, Layer, MemoryGraph
from .persistence import Store, snapshot_text, to_dot
from .refinement import Outcome, RefinementConfig, refine_loop
from .retrieval import RetrievalConfig

log = logging.getLogger("fluxmem")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TASK_FAILED = 2
EXIT_ADAPTER = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class CliConfig:
    store: Path
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    consolidation: ConsolidationConfig = field(default_factory=ConsolidationConfig)
    adapter: str = "reference"
    seed: int = 0
    remote: RemoteConfig | None = None
    format: str = "human"

    def suite(self) -> AdapterSuite:
        if self.adapter == "remote":
            if self.remote is None:
                raise UsageError("--adapter remote needs a \"remote\" section in --config")
            return remote_suite(self.remote)
        return reference_suite(self.seed)


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise UsageError(f"config section {name!r} must be an object")
    return value


def load_config(args: argparse.Namespace) -> CliConfig:
    """Merge the optional JSON config file with command-line overrides."""
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    try:
        ret = dict(_section(data, "retrieval"))
        if "bm25" in ret:
            ret["bm25"] = Bm25Params(**ret["bm25"])
        if "weights" in ret:
            ret["weights"] = tuple(ret["weights"])
        retrieval = RetrievalConfig(**ret)
        refinement = RefinementConfig(**_section(data, "refinement"))
        consolidation = ConsolidationConfig(**_section(data, "consolidation"))
        if args.k_sem is not None:
            retrieval = replace(retrieval, k_sem=args.k_sem)
        if args.k_epi is not None:
            retrieval = replace(retrieval, k_epi=args.k_epi)
        if args.max_rounds is not None:
            refinement = replace(refinement, max_rounds=args.max_rounds)
        if args.epsilon is not None:
            consolidation = replace(consolidation, epsilon=args.epsilon)
        if args.theta is not None:
            consolidation = replace(consolidation, cluster_threshold=args.theta)
        remote = data.get("remote")
        if isinstance(remote, str):
            remote = RemoteConfig.from_file(remote)
        elif isinstance(remote, dict):
            remote = RemoteConfig(**remote)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    adapter = args.adapter or data.get("adapter", "reference")
    if adapter not in ("reference", "remote"):
        raise UsageError(f"unknown adapter {adapter!r}")
    return CliConfig(
        store=Path(args.store or data.get("store", "fluxmem-store")),
        retrieval=retrieval,
        refinement=refinement,
        consolidation=consolidation,
        adapter=adapter,
        seed=args.seed if args.seed is not None else int(data.get("seed", 0)),
        remote=remote,
        format=args.format or data.get("format", "human"),
    )


class Output:
    def __init__(self, fmt: str, stream=None):
        self.json = fmt == "json"
        self.stream = stream or sys.stdout

    def record(self, obj: dict) -> None:
        if self.json:
            self.stream.write(json.dumps(obj, sort_keys=True) + "\n")

    def text(self, line: str = "") -> None:
        if not self.json:
            self.stream.write(line + "\n")


# --- commands ---------------------------------------------------------------


def cmd_ingest(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    suite = cfg.suite()
    path = Path(args.corpus)
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read corpus: {exc}") from None
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            text = obj["text"]
            if not isinstance(text, str) or not text:
                raise ValueError("text must be a non-empty string")
        except (ValueError, KeyError, TypeError) as exc:
            raise LogParseError(line_no, f"{path}: {exc}") from None
        meta = {"source_id": str(obj["id"])} if "id" in obj else {}
        records.append((text, meta))
    # Parse everything first so a bad line leaves the store untouched.
    ids = [graph.add_node(Layer.SEMANTIC, text, suite.embedder(text), meta) for text, meta in records]
    out.record({"ingested": len(ids), "ids": ids})
    out.text(f"ingested {len(ids)} semantic node(s)")
    return EXIT_OK


def _anchor_for(cfg: CliConfig, suite: AdapterSuite, args) -> StepAnchor:
    world_task = None
    world = getattr(suite.executor, "world", None)
    if args.task and world is not None:
        world_task = world.task(args.task)
    if world_task is not None:
        return world_task.anchor()
    if not args.query:
        raise UsageError("run-task needs a query (or --task naming a sim task)")
    observation = args.observation or ""
    task_id = args.task or "cli-" + hashlib.sha1(
        f"{args.query}\n{observation}".encode()
    ).hexdigest()[:12]
    return StepAnchor(task_id, 0, args.query, observation)


def cmd_run_task(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    suite = cfg.suite()
    anchor = _anchor_for(cfg, suite, args)
    result = refine_loop(
        graph,
        anchor,
        suite.executor,
        cfg.refinement,
        cfg.retrieval,
        suite.verifier,
        suite.attributor,
        suite.reshaper,
        suite.embedder,
        bypass_first=args.bypass_first,
    )
    if out.json:
        out.stream.write(result.trace.to_jsonl())
    else:
        for r in result.trace.rounds:
            action = type(r.action).__name__ if r.action is not None else "-"
            out.text(f"round {r.round}: {r.feedback.outcome.value}  edit={action}")
        out.text(f"outcome: {result.outcome.value} after {result.trace.edit_rounds} edit round(s)")
    if result.outcome is Outcome.SUCCESS:
        traj = Trajectory(
            anchor.task_id,
            [(anchor.observation, result.feedback.action)],
            Outcome.SUCCESS,
            list(result.subgraph.sem),
            anchor.query,
        )
        epi = commit_episode(graph, traj, suite.embedder)
        out.text(f"committed episode {epi}")
        return EXIT_OK
    return EXIT_TASK_FAILED


def _report_rows(histories) -> list[tuple]:
    return [(h.record.node, r) for h in histories for r in h.reports]


def cmd_consolidate(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    suite = cfg.suite()
    target = graph.copy() if args.dry_run else graph
    histories = consolidate_loop(
        target, suite.executor, suite.inductor, cfg.consolidation, suite.embedder
    )
    if out.json:
        out.stream.write(reports_to_jsonl(histories))
        return EXIT_OK
    out.text("skill\tversion\teta\tell\tdelta\tpems\tdelta_pems")
    for node, r in _report_rows(histories):
        change = "-" if r.delta_score is None else f"{r.delta_score:+.6f}"
        out.text(
            f"{node}\t{r.version}\t{r.eta:.4f}\t{r.ell}\t{r.delta:.6f}\t{r.score:.6f}\t{change}"
        )
    if args.dry_run:
        out.text("(dry run: store not modified)")
    return EXIT_OK


def cmd_query(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    suite = cfg.suite()
    anchor = StepAnchor("cli-query", 0, args.text)
    sub = form_initial_subgraph(graph, anchor, cfg.retrieval, suite.verifier, suite.embedder)
    for layer in Layer:
        for node_id in sub.layer_list(layer):
            rec = {"layer": layer.value, "id": node_id, "content": graph.nodes[node_id].content}
            if node_id in sub.scores:
                rec["score"] = sub.scores[node_id].to_dict()
            out.record(rec)
    if not out.json:
        out.stream.write(serialize_context(sub, graph).text)
        if sub.scores:
            out.text("")
            out.text("id\tdense\tsparse\tverifier\ttotal")
            for node_id in sub.sem:
                s = sub.scores[node_id]
                out.text(
                    f"{node_id}\t{s.dense:.6f}\t{s.sparse_norm:.6f}\t{s.verifier}\t{s.total:.6f}"
                )
    return EXIT_OK


def graph_stats(graph: MemoryGraph) -> dict:
    return {
        "nodes": {layer.value: len(graph.layer_index[layer]) for layer in Layer},
        "edges": {
            kind.value: len(graph.edges_of_kind(kind))
            for kind in (EdgeKind.GROUND, EdgeKind.DISTILL)
        },
        "next_id": graph.next_id,
    }


def cmd_stats(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    stats = graph_stats(graph)
    out.record(stats)
    for layer, n in stats["nodes"].items():
        out.text(f"{layer} nodes\t{n}")
    for kind, n in stats["edges"].items():
        out.text(f"{kind} edges\t{n}")
    return EXIT_OK


def cmd_export(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    text = to_dot(graph) if args.kind == "dot" else snapshot_text(graph, args.last_event_seq)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        out.record({"exported": args.kind, "path": args.output})
        out.text(f"wrote {args.output}")
    elif out.json and args.kind == "dot":
        out.record({"dot": text})
    else:
        out.stream.write(text)
    return EXIT_OK


def cmd_sim(graph: MemoryGraph, cfg: CliConfig, args, out: Output) -> int:
    from .sim import SIM_CONSOLIDATION, generate_world, run_benchmark

    if graph.nodes:
        raise UsageError(f"sim needs an empty store, {cfg.store} already has nodes")
    world = generate_world(cfg.seed, args.n_topics, args.n_facts, args.n_tasks)
    embedder = HashEmbedder(graph.dimension)
    for doc in world.fact_documents():
        graph.add_node(Layer.SEMANTIC, doc, embedder(doc), {"source": "sim"})
    consolidation = replace(
        SIM_CONSOLIDATION,
        epsilon=cfg.consolidation.epsilon,
        cluster_threshold=cfg.consolidation.cluster_threshold,
        max_iters=cfg.consolidation.max_iters,
    )
    result = run_benchmark(
        world, range(args.max_t + 1), cfg.retrieval, consolidation, graph=graph
    )
    results = Path(args.out)
    results.mkdir(parents=True, exist_ok=True)
    (results / "world.json").write_text(world.to_json() + "\n", encoding="utf-8")
    (results / "benchmark.jsonl").write_text(result.to_jsonl(), encoding="utf-8")
    (results / "benchmark.txt").write_text(result.table(), encoding="utf-8")
    (results / "traces.jsonl").write_text(
        "".join(t.to_jsonl() for t in result.traces), encoding="utf-8"
    )
    (results / "pems.jsonl").write_text(reports_to_jsonl(result.histories), encoding="utf-8")
    if out.json:
        out.stream.write(result.to_jsonl())
    else:
        out.stream.write(result.table())
        out.text(f"results in {results}, store in {cfg.store}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "run-task": cmd_run_task,
    "consolidate": cmd_consolidate,
    "query": cmd_query,
    "stats": cmd_stats,
    "export": cmd_export,
    "sim": cmd_sim,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", help="store directory (default: fluxmem-store)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--adapter", choices=("reference", "remote"))
    common.add_argument("--seed", type=int)
    common.add_argument("--k-sem", type=int)
    common.add_argument("--k-epi", type=int)
    common.add_argument("--max-rounds", type=int)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--theta", type=float)
    common.add_argument("--format", choices=("human", "json"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fluxmem", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="add semantic nodes from a JSONL corpus")
    p.add_argument("corpus", help='line-delimited JSON with {"id"?, "text"}')

    p = sub.add_parser("run-task", parents=[common], help="retrieve, refine and execute one task")
    p.add_argument("query", nargs="?")
    p.add_argument("--observation", default="")
    p.add_argument("--task", help="task id; with the reference adapter, a sim task id")
    p.add_argument("--bypass-first", action="store_true")

    p = sub.add_parser("consolidate", parents=[common], help="induce and mature skills")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("query", parents=[common], help="show the Stage-I subgraph for a text")
    p.add_argument("text")

    sub.add_parser("stats", parents=[common], help="node and edge counts")

    p = sub.add_parser("export", parents=[common], help="write DOT or canonical JSON")
    p.add_argument("kind", choices=("dot", "json"))
    p.add_argument("-o", "--output")

    p = sub.add_parser("sim", parents=[common], help="run the seeded synthetic benchmark")
    p.add_argument("--out", default="fluxmem-sim", help="directory for result files")
    p.add_argument("--n-topics", type=int, default=3)
    p.add_argument("--n-facts", type=int, default=60)
    p.add_argument("--n-tasks", type=int, default=200)
    p.add_argument("--max-t", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
    except UsageError as exc:
        print(f"fluxmem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Output(cfg.format)
    dry = getattr(args, "dry_run", False)
    store = Store(cfg.store)
    try:
        graph = store.open()
    except FluxMemError as exc:
        print(f"fluxmem: {exc}", file=sys.stderr)
        return EXIT_USAGE
    # Lets `export json` match the checkpoint this invocation will write.
    args.last_event_seq = store.log.last_seq
    status = EXIT_USAGE
    try:
        status = COMMANDS[args.command](graph, cfg, args, out)
    except AdapterError as exc:
        print(f"fluxmem: adapter error: {exc}", file=sys.stderr)
        status = EXIT_ADAPTER
    except (UsageError, FluxMemError, OSError) as exc:
        print(f"fluxmem: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    finally:
        store.close(checkpoint=not dry)
    return status


if __name__ == "__main__":
    sys.exit(main())
