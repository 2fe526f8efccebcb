"""Seeded synthetic world with known ground truth.

Facts are ``"fact_<i> <keyword> <shared> <shared>"`` documents grouped into
topics with disjoint vocabularies. Each task plants exactly one kind of
Stage-II flaw (or none), so the success rate at every refinement budget T can
be counted by hand:

* ``direct``: Stage-I retrieval already suffices.
* ``expand``: the observation names a shared word the required fact lacks,
  so Stage I fills the context with decoys; one Expand with the fact's words
  as hints fixes it.
* ``prune``: the task tolerates no distractors; one Prune fixes it.
* ``reshape``: the required fact is a coarse "trap" that must be reshaped.

For consolidation each topic carries a method word (the skill token every
task needs) and a few filler words that its actions emit but no context
grounds, which the reference rewriter strips one per pass.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable

from .consolidation import (
    ConsolidationConfig,
    IntersectionInductor,
    SkillHistory,
    Trajectory,
    commit_episode,
    consolidate_loop,
    mean_pems_series,
)
from .context import ContextString, StepAnchor, parse_context
from .embedding import HashEmbedder, tokenize
from .graph import DEFAULT_DIMENSION, Layer, MemoryGraph
from .refinement import (
    Feedback,
    Granularity,
    GranularityMismatch,
    Outcome,
    OverConnection,
    RefinementConfig,
    RefinementTrace,
    Unattributed,
    UnderConnection,
    attribute,
    halving_reshaper,
    refine_loop,
)
from .retrieval import JaccardVerifier, RetrievalConfig

_ONSETS = "b c d f g h j k l m n p r s t v z br dr gr kl pl st tr".split()
_VOWELS = "a e i o u".split()
_RESERVED = {"fact", "lookup", "answer", "first", "then"}

N_THEMES = 7
N_SHARED = 4
N_CHAFF = 3
# Decoy-based expand tasks need at least this many facts carrying the alias word.
MIN_ALIAS_FACTS = 5
LOOSE_BUDGET = 10


@dataclass
class Topic:
    index: int
    method: str
    themes: list[str]
    shared: list[str]
    chaff: list[str]
    fillers: list[str]

    @property
    def query(self) -> str:
        return " ".join([self.method, *self.themes])


@dataclass
class Fact:
    index: int
    topic: int
    keyword: str
    shared: tuple[str, str]
    chaff: tuple[str, ...] = ()

    @property
    def token(self) -> str:
        return f"fact_{self.index}"

    @property
    def words(self) -> list[str]:
        return [self.keyword, *self.shared, *self.chaff]

    @property
    def content(self) -> str:
        return " ".join([self.token, *self.words])


@dataclass
class SyntheticTask:
    task_id: str
    kind: str
    topic: int
    query: str
    observation: str
    required_facts: tuple[int, ...]
    distractor_budget: int
    granularity_trap: int | None = None
    skill_token: str = ""
    skill_tolerance: int = 0

    def anchor(self) -> StepAnchor:
        return StepAnchor(self.task_id, 0, self.query, self.observation)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "topic": self.topic,
            "query": self.query,
            "observation": self.observation,
            "required_facts": list(self.required_facts),
            "distractor_budget": self.distractor_budget,
            "granularity_trap": self.granularity_trap,
            "skill_token": self.skill_token,
            "skill_tolerance": self.skill_tolerance,
        }


@dataclass
class SyntheticWorld:
    seed: int
    topics: list[Topic]
    facts: list[Fact]
    tasks: list[SyntheticTask]
    _by_id: dict[str, SyntheticTask] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {t.task_id: t for t in self.tasks}

    def task(self, task_id: str) -> SyntheticTask | None:
        return self._by_id.get(task_id)

    def fact_documents(self) -> list[str]:
        return [f.content for f in self.facts]

    def to_json(self) -> str:
        body = {
            "seed": self.seed,
            "topics": [t.__dict__ for t in self.topics],
            "facts": [f.content for f in self.facts],
            "tasks": [t.to_dict() for t in self.tasks],
        }
        return json.dumps(body, sort_keys=True)


def _word_source(rng: random.Random):
    seen = set(_RESERVED)

    def word() -> str:
        while True:
            w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.randint(2, 3)))
            if w not in seen:
                seen.add(w)
                return w

    return word


def generate_world(
    seed: int,
    n_topics: int = 3,
    n_facts: int = 60,
    n_tasks: int = 200,
    expand_frac: float = 0.3,
    prune_frac: float = 0.1,
    reshape_frac: float = 0.1,
) -> SyntheticWorld:
    if n_topics < 1 or n_facts < 1 or n_tasks < 0:
        raise ValueError("n_topics and n_facts must be positive, n_tasks non-negative")
    rng = random.Random(seed)
    word = _word_source(rng)
    topics = [
        Topic(
            t,
            word(),
            [word() for _ in range(N_THEMES)],
            [word() for _ in range(N_SHARED)],
            [word() for _ in range(N_CHAFF)],
            [word() for _ in range(t % 3)],
        )
        for t in range(n_topics)
    ]
    facts = []
    for i in range(n_facts):
        topic = topics[i % n_topics]
        pair = tuple(sorted(rng.sample(range(N_SHARED), 2)))
        facts.append(Fact(i, topic.index, word(), (topic.shared[pair[0]], topic.shared[pair[1]])))

    counts = {
        "expand": round(n_tasks * expand_frac),
        "prune": round(n_tasks * prune_frac),
        "reshape": round(n_tasks * reshape_frac),
    }
    counts["direct"] = n_tasks - sum(counts.values())
    if counts["direct"] < 0:
        raise ValueError("task fractions exceed 1")
    kinds = [k for k, n in counts.items() for _ in range(n)]
    rng.shuffle(kinds)
    task_topics = [j % n_topics for j in range(n_tasks)]
    rng.shuffle(task_topics)

    by_topic = {t.index: [f for f in facts if f.topic == t.index] for t in topics}
    traps: set[int] = set()
    for kind, t in zip(kinds, task_topics):
        if kind != "reshape":
            continue
        free = [f for f in by_topic[t] if f.index not in traps]
        if not free:
            raise ValueError(f"topic {t} has too few facts for its reshape tasks")
        trap = rng.choice(free)
        traps.add(trap.index)
    # Chaff makes a trap coarse: right fact, wrong granularity.
    for idx in sorted(traps):
        f = facts[idx]
        f.chaff = tuple(topics[f.topic].chaff)
    trap_queue = {t: sorted(i for i in traps if facts[i].topic == t) for t in by_topic}

    tasks = []
    for j, (kind, t) in enumerate(zip(kinds, task_topics)):
        topic = topics[t]
        plain = [f for f in by_topic[t] if f.index not in traps]
        trap = None
        budget = LOOSE_BUDGET
        if kind == "reshape":
            trap = trap_queue[t].pop(0)
            required = (trap,)
            observation = f"lookup {facts[trap].keyword}"
        elif kind == "expand":
            required, observation = _plant_expand(rng, topic, plain, by_topic[t])
        else:
            n_req = rng.choice((1, 2)) if kind == "direct" else 1
            chosen = sorted(rng.sample(plain, min(n_req, len(plain))), key=lambda f: f.index)
            required = tuple(f.index for f in chosen)
            observation = "lookup " + " ".join(f.keyword for f in chosen)
            if kind == "prune":
                budget = 0
        core = len(topic.query.split()) + 1  # query words plus "lookup"
        dead = 1 + len(topic.fillers)  # "answer" plus fillers
        tasks.append(
            SyntheticTask(
                f"t{j:04d}",
                kind,
                t,
                topic.query,
                observation,
                tuple(required),
                budget,
                trap,
                topic.method,
                rng.randint(core, core + dead),
            )
        )
    return SyntheticWorld(seed, topics, facts, tasks)


def _plant_expand(rng, topic: Topic, plain: list[Fact], all_facts: list[Fact]):
    options = []
    for f in plain:
        for alias in topic.shared:
            carriers = [g for g in all_facts if alias in g.shared]
            if alias not in f.shared and len(carriers) >= MIN_ALIAS_FACTS:
                options.append((f, alias))
    if not options:
        raise ValueError(f"topic {topic.index} cannot host an expand task")
    fact, alias = rng.choice(options)
    return (fact.index,), f"lookup {alias}"


def build_graph(
    world: SyntheticWorld, dimension: int = DEFAULT_DIMENSION, embedder=None
) -> MemoryGraph:
    """Fresh graph whose semantic node ids equal fact indexes."""
    embedder = embedder or HashEmbedder(dimension)
    graph = MemoryGraph(dimension)
    for fact in world.facts:
        graph.add_node(Layer.SEMANTIC, fact.content, embedder(fact.content), {"source": "sim"})
    return graph


class SyntheticExecutor:
    """Ground-truth executor; a pure function of (task, context).

    Known tasks are checked in a fixed order: missing facts, too many
    distractors, unresolved granularity trap, then (only when a procedural
    section is present) whether some skill names the task's skill token and
    fits its length tolerance. Unknown tasks fall back to coverage: every
    query and observation token must appear in the memory sections.
    """

    deterministic = True

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def __call__(self, anchor: StepAnchor, context: ContextString) -> Feedback:
        task = self.world.task(anchor.task_id)
        parsed = parse_context(context.text)
        if task is None:
            return self._coverage(anchor, parsed)
        return synthetic_execute(self.world, task, parsed)

    @staticmethod
    def _coverage(anchor: StepAnchor, parsed) -> Feedback:
        memory = set(tokenize(parsed.memory_text()))
        wanted = list(dict.fromkeys(tokenize(f"{anchor.query} {anchor.observation}")))
        missing = [w for w in wanted if w not in memory]
        if missing:
            return Feedback.failure(UnderConnection(tuple(missing)))
        return Feedback.success("answer " + " ".join(wanted))


def synthetic_execute(world: SyntheticWorld, task: SyntheticTask, parsed) -> Feedback:
    sem = parsed.sections.get(Layer.SEMANTIC, [])
    present = {tok for _, content in sem for tok in content.split()}
    for idx in task.required_facts:
        fact = world.facts[idx]
        if fact.token not in present:
            return Feedback.failure(UnderConnection(tuple(fact.words)))
    required = set(task.required_facts)
    irrelevant = sorted(i for i, _ in sem if i not in required)
    if len(irrelevant) > task.distractor_budget:
        return Feedback.failure(OverConnection(tuple(irrelevant)))
    if task.granularity_trap is not None:
        original = world.facts[task.granularity_trap].content
        if any(i == task.granularity_trap and c == original for i, c in sem):
            return Feedback.failure(GranularityMismatch(Granularity.REFINE, task.granularity_trap))
    skills = [c for _, c in parsed.sections.get(Layer.PROCEDURAL, [])]
    if skills and not any(
        task.skill_token in s.split() and len(s.split()) <= task.skill_tolerance for s in skills
    ):
        return Feedback.failure(Unattributed(f"no usable skill for {task.skill_token}"))
    topic = world.topics[task.topic]
    tokens = [world.facts[i].token for i in task.required_facts]
    return Feedback.success(" ".join(["answer", *topic.fillers, *tokens]))


def trajectory_from(task_anchor: StepAnchor, trace: RefinementTrace, feedback: Feedback, used: Iterable[int]) -> Trajectory:
    return Trajectory(
        task_anchor.task_id,
        [(task_anchor.observation, feedback.action)],
        feedback.outcome,
        list(used),
        task_anchor.query,
    )


# Rewrites continue until PEMS settles (the threshold sits above any
# attainable score for the sim's skill lengths), so halting is by epsilon.
SIM_CONSOLIDATION = ConsolidationConfig(rewrite_threshold=1.0)


@dataclass
class BenchmarkRow:
    max_rounds: int
    successes: int
    total: int
    edit_rounds: int

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "T": self.max_rounds,
            "successes": self.successes,
            "total": self.total,
            "success_rate": round(self.success_rate, 6),
            "edit_rounds": self.edit_rounds,
        }


@dataclass
class BenchmarkResult:
    rows: list[BenchmarkRow]
    pems_series: list[float]
    histories: list[SkillHistory]
    traces: list[RefinementTrace]
    graph: MemoryGraph

    def table(self) -> str:
        lines = ["T\tsuccess\ttotal\tSR(%)\tedits"]
        lines += [
            f"{r.max_rounds}\t{r.successes}\t{r.total}\t{r.success_rate:.2f}\t{r.edit_rounds}"
            for r in self.rows
        ]
        lines.append("")
        lines.append("iter\tmean_PEMS")
        lines += [f"{k}\t{s:.6f}" for k, s in enumerate(self.pems_series)]
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = [json.dumps({"type": "sr", **r.to_dict()}, sort_keys=True) for r in self.rows]
        out += [
            json.dumps({"type": "pems", "iter": k, "mean_pems": s}, sort_keys=True)
            for k, s in enumerate(self.pems_series)
        ]
        return "".join(line + "\n" for line in out)


def run_tasks(
    graph: MemoryGraph,
    world: SyntheticWorld,
    max_rounds: int,
    retrieval: RetrievalConfig,
    executor=None,
    verifier=None,
    embedder=None,
    commit: bool = True,
) -> tuple[BenchmarkRow, list[RefinementTrace]]:
    executor = executor or SyntheticExecutor(world)
    verifier = verifier or JaccardVerifier()
    embedder = embedder or HashEmbedder(graph.dimension)
    successes = edits = 0
    traces = []
    for task in world.tasks:
        anchor = task.anchor()
        result = refine_loop(
            graph,
            anchor,
            executor,
            RefinementConfig(max_rounds),
            retrieval,
            verifier,
            attribute,
            halving_reshaper,
            embedder,
        )
        traces.append(result.trace)
        edits += result.trace.edit_rounds
        if result.outcome is Outcome.SUCCESS:
            successes += 1
            if commit:
                commit_episode(
                    graph,
                    trajectory_from(anchor, result.trace, result.feedback, result.subgraph.sem),
                    embedder,
                )
    return BenchmarkRow(max_rounds, successes, len(world.tasks), edits), traces


def run_benchmark(
    world: SyntheticWorld,
    t_values: Iterable[int] = range(6),
    retrieval: RetrievalConfig = RetrievalConfig(),
    consolidation: ConsolidationConfig = SIM_CONSOLIDATION,
    dimension: int = DEFAULT_DIMENSION,
    graph: MemoryGraph | None = None,
) -> BenchmarkResult:
    """Success rate per refinement budget, then consolidation on the last run.

    Every T but the last starts from a copy of the world graph, so runs do
    not leak reshaped content or committed episodes into each other. The
    last T and consolidation mutate ``graph`` itself (a fresh world graph
    when omitted), which lets a caller attach an event log to it.
    """
    if not world.tasks:
        raise ValueError("world has no tasks")
    t_values = list(t_values)
    if not t_values:
        raise ValueError("no refinement budgets given")
    base = graph if graph is not None else build_graph(world, dimension)
    embedder = HashEmbedder(base.dimension)
    rows, traces = [], []
    for pos, t in enumerate(t_values):
        target = base if pos == len(t_values) - 1 else base.copy()
        row, traces = run_tasks(target, world, t, retrieval, embedder=embedder)
        rows.append(row)
    histories = consolidate_loop(
        base, SyntheticExecutor(world), IntersectionInductor(), consolidation, embedder
    )
    return BenchmarkResult(rows, mean_pems_series(histories), histories, traces, base)
