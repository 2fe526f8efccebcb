"""Stage-II refinement: execute, read feedback, attribute, edit, repeat."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol, Union

from .context import (
    ActivatedSubgraph,
    ContextString,
    StepAnchor,
    form_initial_subgraph,
    serialize_context,
)
from .errors import AdapterError, EmptySubgraph, RefinementAborted, UnknownTarget
from .graph import ANCHOR, Edge, EdgeKind, Layer, MemoryGraph
from .retrieval import (
    Embedder,
    RetrievalConfig,
    ScoreBreakdown,
    Scorer,
    Verifier,
    default_embedder,
    top_k,
)


class Outcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class Granularity(str, Enum):
    REFINE = "refine"
    ABSTRACT = "abstract"


# --- feedback ---------------------------------------------------------------


@dataclass(frozen=True)
class UnderConnection:
    hints: tuple[str, ...] = ()


@dataclass(frozen=True)
class OverConnection:
    distractors: tuple[int, ...] | None = None


@dataclass(frozen=True)
class GranularityMismatch:
    direction: Granularity
    target: int


@dataclass(frozen=True)
class Unattributed:
    text: str = ""


Cause = Union[UnderConnection, OverConnection, GranularityMismatch, Unattributed]


@dataclass(frozen=True)
class Feedback:
    outcome: Outcome
    cause: Cause | None = None
    # What the executor did this round; recorded in the committed trajectory.
    action: str = ""

    def __post_init__(self):
        if self.outcome is Outcome.SUCCESS and self.cause is not None:
            raise ValueError("a successful outcome carries no cause")

    @classmethod
    def success(cls, action: str = "") -> "Feedback":
        return cls(Outcome.SUCCESS, None, action)

    @classmethod
    def failure(cls, cause: Cause, action: str = "") -> "Feedback":
        return cls(Outcome.FAILURE, cause, action)

    def to_dict(self) -> dict:
        out: dict = {"outcome": self.outcome.value}
        if self.action:
            out["action"] = self.action
        cause = self.cause
        if isinstance(cause, UnderConnection):
            out["cause"] = {"type": "under_connection", "hints": list(cause.hints)}
        elif isinstance(cause, OverConnection):
            ids = None if cause.distractors is None else list(cause.distractors)
            out["cause"] = {"type": "over_connection", "distractors": ids}
        elif isinstance(cause, GranularityMismatch):
            out["cause"] = {
                "type": "granularity_mismatch",
                "direction": cause.direction.value,
                "target": cause.target,
            }
        elif isinstance(cause, Unattributed):
            out["cause"] = {"type": "unattributed", "text": cause.text}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Feedback":
        outcome = Outcome(data["outcome"])
        action = data.get("action", "")
        if outcome is Outcome.SUCCESS:
            return cls(outcome, None, action)
        raw = data.get("cause") or {"type": "unattributed"}
        kind = raw.get("type")
        if kind == "under_connection":
            cause: Cause = UnderConnection(tuple(str(h) for h in raw.get("hints", ())))
        elif kind == "over_connection":
            ids = raw.get("distractors")
            cause = OverConnection(None if ids is None else tuple(int(i) for i in ids))
        elif kind == "granularity_mismatch":
            cause = GranularityMismatch(Granularity(raw["direction"]), int(raw["target"]))
        else:
            cause = Unattributed(str(raw.get("text", "")))
        return cls(outcome, cause, action)


# --- edit actions -----------------------------------------------------------


@dataclass(frozen=True)
class Expand:
    hints: tuple[str, ...] = ()
    added: tuple[int, ...] = ()


@dataclass(frozen=True)
class Prune:
    distractors: tuple[int, ...] | None = None
    removed: tuple[Edge, ...] = ()


@dataclass(frozen=True)
class Reshape:
    target: int
    direction: Granularity = Granularity.REFINE
    new_content: str | None = None


@dataclass(frozen=True)
class Bypass:
    pass


EditAction = Union[Expand, Prune, Reshape, Bypass]


def action_to_dict(action: EditAction | None) -> dict | None:
    if action is None:
        return None
    if isinstance(action, Expand):
        return {"type": "expand", "hints": list(action.hints), "added": list(action.added)}
    if isinstance(action, Prune):
        return {
            "type": "prune",
            "distractors": None if action.distractors is None else list(action.distractors),
            "removed": [[e.src, e.dst, e.kind.value] for e in action.removed],
        }
    if isinstance(action, Reshape):
        return {
            "type": "reshape",
            "target": action.target,
            "direction": action.direction.value,
            "new_content": action.new_content,
        }
    return {"type": "bypass"}


class Attributor(Protocol):
    def __call__(self, feedback: Feedback, subgraph: ActivatedSubgraph) -> EditAction: ...


class Reshaper(Protocol):
    def __call__(self, content: str, direction: Granularity) -> str: ...


class Executor(Protocol):
    def __call__(self, anchor: StepAnchor, context: ContextString) -> Feedback: ...


def attribute(feedback: Feedback, subgraph: ActivatedSubgraph) -> EditAction:
    """Reference attribution table mapping a failure cause to one edit."""
    if feedback.outcome is not Outcome.FAILURE:
        raise ValueError("only failures are attributed")
    cause = feedback.cause
    if isinstance(cause, UnderConnection):
        return Expand(hints=cause.hints)
    if isinstance(cause, OverConnection):
        return Prune(distractors=cause.distractors)
    if isinstance(cause, GranularityMismatch):
        return Reshape(cause.target, cause.direction)
    return Bypass() if not subgraph.is_empty() else Expand()


def halving_reshaper(content: str, direction: Granularity) -> str:
    """Reference reshaper.

    Abstract keeps the first half of the tokens. Refine spells the tokens
    out as an explicit step sequence ("first a then b ...").
    """
    tokens = content.split()
    if not tokens:
        return content
    if Granularity(direction) is Granularity.ABSTRACT:
        return " ".join(tokens[: max(1, len(tokens) // 2)])
    return "first " + " then ".join(tokens)


# --- edits ------------------------------------------------------------------


def expand_links(
    subgraph: ActivatedSubgraph,
    graph: MemoryGraph,
    budget: int,
    verifier: Verifier,
    config: RetrievalConfig,
    embedder: Embedder | None = None,
    hints: tuple[str, ...] = (),
) -> ActivatedSubgraph:
    """Activate the ``budget`` best unactivated semantic/procedural nodes.

    Semantic candidates get the full hybrid score against observation plus
    hint terms; procedural candidates are ranked on the dense term alone.
    Expanding a bypassed subgraph restores it first.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    out = subgraph.copy()
    out.bypassed = False
    probe = " ".join([subgraph.anchor.probe, *hints]).strip()
    scorer = Scorer(graph, probe, config, verifier, embedder)
    active = set(out.activated)
    sem_cands = [i for i in graph.layer_index[Layer.SEMANTIC] if i not in active]
    proc_cands = [i for i in graph.layer_index[Layer.PROCEDURAL] if i not in active]
    scores = scorer.score_all(sem_cands)
    w_dense = config.weights[0] or 1.0
    for i in proc_cands:
        dense = scorer.dense(graph.nodes[i])
        scores[i] = ScoreBreakdown(dense, 0.0, 0.0, 0, w_dense * dense, config.squash_sparse)
    for node_id in top_k({i: s.total for i, s in scores.items()}, budget):
        out.layer_list(graph.nodes[node_id].layer).append(node_id)
        out.edges.append(Edge(ANCHOR, node_id, EdgeKind.ACTIVATION))
        out.scores[node_id] = scores[node_id]
    return out


def prune_links(
    subgraph: ActivatedSubgraph, distractors: tuple[int, ...] | None = None
) -> ActivatedSubgraph:
    """Drop distractor nodes and every step edge touching them.

    Without explicit distractors the lowest-scoring activated semantic node
    is dropped (ascending id on ties).
    """
    if distractors is not None:
        victims = {d for d in distractors if d in set(subgraph.activated)}
    elif subgraph.sem:
        def stored(i: int) -> float:
            s = subgraph.scores.get(i)
            return s.total if s is not None else 0.0

        victims = {min(subgraph.sem, key=lambda i: (stored(i), i))}
    else:
        victims = set()
    if not victims:
        raise EmptySubgraph("nothing to prune")
    out = subgraph.copy()
    out.sem = [i for i in out.sem if i not in victims]
    out.epi = [i for i in out.epi if i not in victims]
    out.proc = [i for i in out.proc if i not in victims]
    out.edges = [e for e in out.edges if e.src not in victims and e.dst not in victims]
    for v in victims:
        out.scores.pop(v, None)
    return out


def reshape_unit(
    subgraph: ActivatedSubgraph,
    graph: MemoryGraph,
    target: int,
    direction: Granularity,
    reshaper: Reshaper,
    embedder: Embedder | None = None,
) -> ActivatedSubgraph:
    """Rewrite ``target``'s content in the persistent graph; links stay as they are."""
    if target not in set(subgraph.activated):
        raise UnknownTarget(f"node {target} is not activated")
    if target not in graph.nodes:
        raise UnknownTarget(f"node {target} no longer exists")
    node = graph.nodes[target]
    new_content = reshaper(node.content, Granularity(direction))
    embedder = embedder or default_embedder(graph)
    graph.rewrite_content(target, new_content, embedder(new_content))
    return subgraph.copy()


def bypass(subgraph: ActivatedSubgraph) -> ActivatedSubgraph:
    out = subgraph.copy()
    out.bypassed = True
    return out


def restore(subgraph: ActivatedSubgraph) -> ActivatedSubgraph:
    out = subgraph.copy()
    out.bypassed = False
    return out


# --- loop -------------------------------------------------------------------


@dataclass(frozen=True)
class RefinementConfig:
    max_rounds: int = 5

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


@dataclass(frozen=True)
class TraceRound:
    round: int
    feedback: Feedback
    action: EditAction | None
    context: ContextString

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "feedback": self.feedback.to_dict(),
            "action": action_to_dict(self.action),
            "context": self.context.text,
            "provenance": [[tag, i] for tag, i in self.context.provenance],
        }


@dataclass
class RefinementTrace:
    task_id: str = ""
    rounds: list[TraceRound] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rounds)

    @property
    def edit_rounds(self) -> int:
        return sum(1 for r in self.rounds if r.action is not None)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"task_id": self.task_id, **r.to_dict()}, sort_keys=True) + "\n"
            for r in self.rounds
        )


@dataclass
class RefinementResult:
    subgraph: ActivatedSubgraph
    trace: RefinementTrace
    outcome: Outcome
    feedback: Feedback


@dataclass
class EditContext:
    """Everything the edit operations need besides the subgraph itself."""

    graph: MemoryGraph
    retrieval: RetrievalConfig
    verifier: Verifier
    reshaper: Reshaper
    embedder: Embedder


def apply_edit(
    action: EditAction, subgraph: ActivatedSubgraph, env: EditContext
) -> tuple[ActivatedSubgraph, EditAction]:
    """Apply one planned edit; returns the new subgraph and the realized action."""
    if isinstance(action, Expand):
        out = expand_links(
            subgraph,
            env.graph,
            env.retrieval.expand_budget,
            env.verifier,
            env.retrieval,
            env.embedder,
            action.hints,
        )
        before = set(subgraph.activated)
        return out, replace(action, added=tuple(i for i in out.activated if i not in before))
    if isinstance(action, Prune):
        try:
            out = prune_links(subgraph, action.distractors)
        except EmptySubgraph:
            return subgraph.copy(), replace(action, removed=())
        kept = out.edge_set()
        removed = tuple(sorted((e for e in subgraph.edges if e not in kept), key=Edge.sort_key))
        return out, replace(action, removed=removed)
    if isinstance(action, Reshape):
        out = reshape_unit(
            subgraph, env.graph, action.target, action.direction, env.reshaper, env.embedder
        )
        return out, replace(action, new_content=env.graph.nodes[action.target].content)
    if isinstance(action, Bypass):
        return bypass(subgraph), action
    raise TypeError(f"unknown edit action {action!r}")


def refine_loop(
    graph: MemoryGraph,
    anchor: StepAnchor,
    executor: Executor,
    config: RefinementConfig,
    retrieval: RetrievalConfig,
    verifier: Verifier,
    attributor: Attributor = attribute,
    reshaper: Reshaper = halving_reshaper,
    embedder: Embedder | None = None,
    bypass_first: bool = False,
) -> RefinementResult:
    """Run Stage I then at most ``config.max_rounds`` edit rounds.

    Stops at the first success. Adapter failures raise
    :class:`RefinementAborted` carrying the rounds finished so far.
    """
    embedder = embedder or default_embedder(graph)
    env = EditContext(graph, retrieval, verifier, reshaper, embedder)
    trace = RefinementTrace(anchor.task_id)
    try:
        subgraph = form_initial_subgraph(graph, anchor, retrieval, verifier, embedder)
    except AdapterError as exc:
        raise RefinementAborted(f"stage I failed: {exc}", trace) from exc
    if bypass_first:
        subgraph = bypass(subgraph)
    round_no = 0
    while True:
        try:
            context = serialize_context(subgraph, graph)
            feedback = executor(anchor, context)
            if feedback.outcome is Outcome.SUCCESS or round_no >= config.max_rounds:
                trace.rounds.append(TraceRound(round_no, feedback, None, context))
                return RefinementResult(subgraph, trace, feedback.outcome, feedback)
            planned = attributor(feedback, subgraph)
            subgraph, realized = apply_edit(planned, subgraph, env)
        except AdapterError as exc:
            raise RefinementAborted(f"round {round_no}: {exc}", trace) from exc
        trace.rounds.append(TraceRound(round_no, feedback, realized, context))
        round_no += 1


ExecutorFn = Callable[[StepAnchor, ContextString], Feedback]
