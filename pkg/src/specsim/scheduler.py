"""Stage graph, ahead-of-time transforms, and two-resource plan search.

One decoding iteration is modeled as a steady-state window that opens when
verification starts.  The window runs Verify, the CPU accept/bonus logic,
and the drafting chain that prepares the next verification; PrepareVerify
closes the window at the boundary to the next one.  The first drafter
invocation is HeadDraft and later ones are DraftStep(i), so a depth-one
iteration contains six stages.

Two dependencies are speculative rather than structural: TailDraft waiting
for Accept (it could draft the deepest continuation before knowing what was
accepted) and HeadDraft waiting for Accept (it could draft continuations
for every candidate up front).  Ahead-of-time transforms remove exactly
those edges, paying for the speculation with inflated stage durations, and
the plan search weighs that trade against the two-resource schedule.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from specsim.errors import ConfigError
from specsim.latency import TreeShape

CPU = "CPU"
GPU = "GPU"

TAIL_DRAFT_AOT = "TailDraftAot"
HEAD_DRAFT_AOT = "HeadDraftAot"

_GPU_STAGES = ("Verify", "TailDraft", "HeadDraft")
_CPU_STAGES = ("Accept", "BonusSample", "PrepareVerify")


def stage_resource(name: str) -> str:
    if name in _CPU_STAGES:
        return CPU
    if name in _GPU_STAGES or name.startswith("DraftStep"):
        return GPU
    raise ValueError(f"unknown stage {name!r}")


def _is_draft_stage(name: str) -> bool:
    return name in ("HeadDraft", "TailDraft") or name.startswith("DraftStep")


@dataclass(frozen=True)
class Stage:
    name: str
    resource: str
    duration_us: float

    def __post_init__(self) -> None:
        if self.resource not in (CPU, GPU):
            raise ValueError(f"resource must be CPU or GPU, got {self.resource!r}")
        if self.duration_us < 0:
            raise ValueError(f"stage {self.name} duration {self.duration_us} is negative")


class StageProfiles:
    """Per-stage durations, with base and ahead-of-time variants.

    Draft stages fall back to a generic ``DraftStep`` row when they have no
    row of their own; an explicit ``aot`` row beats any computed inflation.
    """

    def __init__(self, durations: Mapping[tuple[str, str], float]) -> None:
        for (stage, variant), value in durations.items():
            if variant not in ("base", "aot"):
                raise ValueError(f"variant for {stage} must be base or aot, got {variant!r}")
            if value < 0:
                raise ValueError(f"duration for {stage}/{variant} is negative: {value}")
        self._durations = dict(durations)

    @classmethod
    def from_csv(cls, path: str | Path) -> "StageProfiles":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read stage profile {path}: {exc}") from exc
        try:
            rows = list(csv.reader(text.splitlines()))
            if not rows or [c.strip() for c in rows[0]] != ["stage", "variant", "duration_us"]:
                raise ValueError("first row must be the header 'stage,variant,duration_us'")
            durations: dict[tuple[str, str], float] = {}
            for row in rows[1:]:
                if not row:
                    continue
                if len(row) != 3:
                    raise ValueError(f"expected 3 columns, got {row!r}")
                stage, variant, duration = row[0].strip(), row[1].strip(), float(row[2])
                if (stage, variant) in durations:
                    raise ValueError(f"duplicate row for {stage}/{variant}")
                durations[(stage, variant)] = duration
            return cls(durations)
        except ValueError as exc:
            raise ConfigError(f"invalid stage profile {path}: {exc}") from exc

    def with_overrides(self, overrides: Mapping[tuple[str, str], float]) -> "StageProfiles":
        merged = dict(self._durations)
        merged.update(overrides)
        return StageProfiles(merged)

    def rows(self) -> dict[tuple[str, str], float]:
        """All profiled ``(stage, variant) -> duration`` entries."""
        return dict(self._durations)

    def base(self, stage: str) -> float:
        value = self._durations.get((stage, "base"))
        if value is None and _is_draft_stage(stage):
            value = self._durations.get(("DraftStep", "base"))
        if value is None:
            raise ConfigError(f"no base duration profiled for stage {stage}")
        return value

    def aot(self, stage: str, inflation: float) -> float:
        """Ahead-of-time duration: the profiled row, else inflated base."""
        value = self._durations.get((stage, "aot"))
        if value is None and _is_draft_stage(stage):
            value = self._durations.get(("DraftStep", "aot"))
        if value is not None:
            return value
        if inflation < 1.0:
            raise ValueError(f"inflation {inflation} must be >= 1")
        return self.base(stage) * inflation

    def to_dict(self) -> dict[str, float]:
        return {f"{stage}/{variant}": v for (stage, variant), v in sorted(self._durations.items())}


@dataclass(frozen=True)
class AotTransform:
    kind: str
    inflation: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (TAIL_DRAFT_AOT, HEAD_DRAFT_AOT):
            raise ValueError(f"unknown transform {self.kind!r}")
        if not self.inflation >= 1.0:
            raise ValueError(f"inflation {self.inflation} must be >= 1")


class DepGraph:
    """Stages plus tagged dependency edges for one iteration window."""

    def __init__(self, profiles: StageProfiles) -> None:
        self.profiles = profiles
        self.stages: dict[str, Stage] = {}
        self.edges: dict[tuple[str, str], str] = {}
        self.applied: tuple[str, ...] = ()
        self._adjacency: tuple[dict[str, list[str]], dict[str, list[str]]] | None = None

    def add_stage(self, name: str, duration_us: float) -> None:
        if name in self.stages:
            raise ValueError(f"duplicate stage {name}")
        self.stages[name] = Stage(name, stage_resource(name), duration_us)
        self._adjacency = None

    def add_edge(self, src: str, dst: str, tag: str = "hard") -> None:
        if src not in self.stages or dst not in self.stages:
            raise ValueError(f"edge {src}->{dst} references an unknown stage")
        if tag not in ("hard", "speculative"):
            raise ValueError(f"edge tag must be hard or speculative, got {tag!r}")
        self.edges[(src, dst)] = tag
        self._adjacency = None

    def _adj(self) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
        if self._adjacency is None:
            preds: dict[str, list[str]] = {name: [] for name in self.stages}
            succs: dict[str, list[str]] = {name: [] for name in self.stages}
            for src, dst in self.edges:
                preds[dst].append(src)
                succs[src].append(dst)
            self._adjacency = (preds, succs)
        return self._adjacency

    def predecessors(self, name: str) -> list[str]:
        return list(self._adj()[0][name])

    def successors(self, name: str) -> list[str]:
        return list(self._adj()[1][name])

    def copy(self) -> "DepGraph":
        out = DepGraph(self.profiles)
        out.stages = dict(self.stages)
        out.edges = dict(self.edges)
        out.applied = self.applied
        return out

    def is_acyclic(self) -> bool:
        return len(self._kahn_order()) == len(self.stages)

    def _kahn_order(self) -> list[str]:
        indegree = {name: 0 for name in self.stages}
        for _, dst in self.edges:
            indegree[dst] += 1
        ready = sorted(name for name, deg in indegree.items() if deg == 0)
        order: list[str] = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            changed = False
            for succ in self.successors(name):
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    ready.append(succ)
                    changed = True
            if changed:
                ready.sort()
        return order


def draft_stage_names(d_draft: int) -> list[str]:
    """GPU drafting chain: the head invocation, then numbered steps."""
    return ["HeadDraft"] + [f"DraftStep{i}" for i in range(2, d_draft + 1)]


def build_graph(d_draft: int, profiles: StageProfiles) -> DepGraph:
    """Canonical window graph for a depth-``d_draft`` iteration.

    Verify feeds Accept, which feeds BonusSample; TailDraft waits on Verify
    structurally and on Accept speculatively; HeadDraft waits on Accept
    speculatively and opens the drafting chain that ends in PrepareVerify at
    the window boundary.
    """
    if d_draft < 1:
        raise ValueError(f"d_draft {d_draft} must be >= 1")
    graph = DepGraph(profiles)
    chain = draft_stage_names(d_draft)
    for name in ["Verify", "Accept", "BonusSample", "TailDraft", *chain, "PrepareVerify"]:
        graph.add_stage(name, profiles.base(name))
    graph.add_edge("Verify", "Accept")
    graph.add_edge("Accept", "BonusSample")
    graph.add_edge("Verify", "TailDraft")
    graph.add_edge("Accept", "TailDraft", tag="speculative")
    graph.add_edge("Accept", "HeadDraft", tag="speculative")
    for src, dst in zip(chain, chain[1:]):
        graph.add_edge(src, dst)
    graph.add_edge(chain[-1], "PrepareVerify")
    return graph


def apply_aot(graph: DepGraph, transform: AotTransform) -> DepGraph:
    """Remove the transform's speculative edge and inflate its stage.

    TailDraftAot frees TailDraft to run beside Accept (its one remaining
    predecessor is Verify); HeadDraftAot frees HeadDraft to draft every
    candidate continuation up front, so it no longer waits on anything in
    the window.
    """
    stage = "TailDraft" if transform.kind == TAIL_DRAFT_AOT else "HeadDraft"
    edge = ("Accept", stage)
    if graph.edges.get(edge) != "speculative":
        raise ValueError(f"{transform.kind} already applied or edge missing")
    out = graph.copy()
    del out.edges[edge]
    out._adjacency = None
    out.stages[stage] = Stage(
        stage, stage_resource(stage), graph.profiles.aot(stage, transform.inflation)
    )
    out.applied = tuple([*graph.applied, transform.kind])
    return out


@dataclass(frozen=True)
class Timeline:
    """Start/end times per stage under two exclusive resources."""

    entries: Mapping[str, tuple[float, float]]
    resources: Mapping[str, str]

    @property
    def makespan(self) -> float:
        return max(end for _, end in self.entries.values())

    def to_dict(self) -> dict:
        return {
            "makespan_us": self.makespan,
            "stages": {
                name: {
                    "start_us": start,
                    "end_us": end,
                    "resource": self.resources[name],
                }
                for name, (start, end) in sorted(self.entries.items())
            },
        }


def _check_topological(graph: DepGraph, priority: Sequence[str]) -> dict[str, int]:
    if sorted(priority) != sorted(graph.stages):
        raise ValueError("priority must list every stage exactly once")
    rank = {name: i for i, name in enumerate(priority)}
    for src, dst in graph.edges:
        if rank[src] > rank[dst]:
            raise ValueError(f"priority is not topological: {dst} before {src}")
    return rank


def schedule(graph: DepGraph, priority: Sequence[str]) -> Timeline:
    """Deterministic non-delay list scheduling on one CPU and one GPU lane.

    At every decision instant the highest-priority stage whose predecessors
    have finished starts on its resource if that resource is idle; otherwise
    time advances to the next completion.
    """
    rank = _check_topological(graph, priority)
    preds_of, succs_of = graph._adj()
    remaining = {name: len(preds_of[name]) for name in graph.stages}
    free = {CPU: 0.0, GPU: 0.0}
    entries: dict[str, tuple[float, float]] = {}
    events: list[tuple[float, str]] = []
    ready = {name for name, count in remaining.items() if count == 0}
    left = len(graph.stages)
    now = 0.0
    while left:
        started_any = True
        while started_any:
            started_any = False
            unlocked: list[str] = []
            for name in sorted(ready, key=rank.__getitem__):
                stage = graph.stages[name]
                if free[stage.resource] <= now:
                    end = now + stage.duration_us
                    entries[name] = (now, end)
                    free[stage.resource] = end
                    ready.discard(name)
                    left -= 1
                    started_any = True
                    if end <= now:
                        for succ in succs_of[name]:
                            remaining[succ] -= 1
                            if remaining[succ] == 0:
                                unlocked.append(succ)
                    else:
                        heapq.heappush(events, (end, name))
            ready.update(unlocked)
        if left:
            if not events:
                raise ValueError("deadlock: no stage can start (cyclic graph?)")
            now = events[0][0]
            while events and events[0][0] <= now:
                _, name = heapq.heappop(events)
                for succ in succs_of[name]:
                    remaining[succ] -= 1
                    if remaining[succ] == 0:
                        ready.add(succ)
    resources = {name: graph.stages[name].resource for name in graph.stages}
    return Timeline(entries=entries, resources=resources)


def all_topological_orders(graph: DepGraph, limit: int = 100_000) -> Iterator[tuple[str, ...]]:
    """Every topological order, in lexicographic stage-name sequence."""
    indegree = {name: 0 for name in graph.stages}
    for _, dst in graph.edges:
        indegree[dst] += 1
    order: list[str] = []
    produced = 0

    def backtrack() -> Iterator[tuple[str, ...]]:
        nonlocal produced
        if len(order) == len(indegree):
            produced += 1
            if produced > limit:
                raise ValueError(f"more than {limit} topological orders")
            yield tuple(order)
            return
        for name in sorted(indegree):
            if indegree[name] == 0 and name not in order:
                order.append(name)
                for succ in graph.successors(name):
                    indegree[succ] -= 1
                yield from backtrack()
                for succ in graph.successors(name):
                    indegree[succ] += 1
                order.pop()

    yield from backtrack()


def critical_path_order(graph: DepGraph) -> tuple[str, ...]:
    """Topological order ranked by longest remaining path to the sink."""
    base = graph._kahn_order()
    rank: dict[str, float] = {}
    for name in reversed(base):
        succ = graph.successors(name)
        rank[name] = graph.stages[name].duration_us + max(
            (rank[s] for s in succ), default=0.0
        )
    return tuple(sorted(base, key=lambda name: -rank[name]))


def cpu_first_order(graph: DepGraph) -> tuple[str, ...]:
    """Topological order releasing CPU stages as early as possible."""
    indegree = {name: 0 for name in graph.stages}
    for _, dst in graph.edges:
        indegree[dst] += 1
    ready = [name for name, deg in indegree.items() if deg == 0]
    order: list[str] = []
    while ready:
        ready.sort(key=lambda name: (graph.stages[name].resource != CPU, name))
        name = ready.pop(0)
        order.append(name)
        for succ in graph.successors(name):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                ready.append(succ)
    return tuple(order)


@dataclass(frozen=True)
class ExecutionPlan:
    transforms: tuple[str, ...]
    priority: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"transforms": list(self.transforms), "priority": list(self.priority)}


@dataclass(frozen=True)
class PlanSearchResult:
    plan: ExecutionPlan
    timeline: Timeline
    makespan_us: float
    per_token_us: float


_ORDER_ENUMERATION_CAP = 12


def _transform_subsets() -> list[tuple[str, ...]]:
    kinds = sorted([HEAD_DRAFT_AOT, TAIL_DRAFT_AOT])
    subsets: list[tuple[str, ...]] = [()]
    for size in (1, 2):
        subsets.extend(itertools.combinations(kinds, size))
    return subsets


def plan_search(
    profiles: StageProfiles,
    egt_shape: TreeShape,
    expected_aal: float,
    head_inflation: float = 2.0,
) -> PlanSearchResult:
    """Grid search over AoT subsets and priority orders.

    Minimizes makespan per generated token.  Small graphs try every
    topological order; larger ones fall back to the critical-path-first and
    CPU-first families.  Ties prefer fewer transforms, then the
    lexicographically smallest plan, so the result is fully deterministic.
    """
    if expected_aal < 1.0:
        raise ValueError(f"expected_aal {expected_aal} must be >= 1")
    inflations = {
        TAIL_DRAFT_AOT: float(max(1, egt_shape.w_draft)),
        HEAD_DRAFT_AOT: head_inflation,
    }
    canonical = build_graph(egt_shape.d_draft, profiles)
    best: PlanSearchResult | None = None
    for subset in _transform_subsets():
        graph = canonical
        for kind in subset:
            graph = apply_aot(graph, AotTransform(kind, inflations[kind]))
        if len(graph.stages) <= _ORDER_ENUMERATION_CAP:
            orders: Iterator[tuple[str, ...]] = all_topological_orders(graph)
        else:
            orders = iter(sorted({critical_path_order(graph), cpu_first_order(graph)}))
        for priority in orders:
            timeline = schedule(graph, priority)
            candidate = PlanSearchResult(
                plan=ExecutionPlan(transforms=subset, priority=priority),
                timeline=timeline,
                makespan_us=timeline.makespan,
                per_token_us=timeline.makespan / expected_aal,
            )
            if best is None or candidate.per_token_us < best.per_token_us - 1e-12:
                best = candidate
    assert best is not None
    return best


def save_timeline(result: PlanSearchResult, path: str | Path) -> None:
    payload = {
        "plan": result.plan.to_dict(),
        "timeline": result.timeline.to_dict(),
        "makespan_us": result.makespan_us,
        "per_token_us": result.per_token_us,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
