"""Discrete-iteration decoding simulation over all the building blocks.

Each iteration draws a drafter from the configured schedule, builds a draft
tree per the active policy, samples one verification walk, and charges the
iteration the latency of its stage timeline.  All randomness flows from the
config seed through per-iteration child streams, so results are bit-identical
across repeats and unaffected by the worker cap.

Latency accounting: drafting costs one drafter forward pass per tree level
beyond the root (the root token rides along with the previous iteration's
bonus sample), verification costs one verifier pass over the kept nodes plus
the bonus position, and the CPU-side stages default to zero unless a stage
profile says otherwise.  With plan search off the stages are summed serially;
with it on, the iteration costs the best scheduled makespan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from specsim.acceptance import (
    AcceptanceModel,
    expected_accepted_length,
    freeze_probs,
    path_products,
    sample_with_probs,
)
from specsim.depth_predictor import (
    DepthPredictor,
    DepthSample,
    EmaHeuristic,
    FeatureState,
    FixedDepth,
)
from specsim.drafters import StationaryGenerator
from specsim.egt import (
    EgtConfig,
    SubtreeKnapsack,
    grow_egt,
    prune_verify,
    select_width,
)
from specsim.errors import ConfigError
from specsim.latency import ProfilePair, latency_at
from specsim.scheduler import (
    StageProfiles,
    TreeShape,
    draft_stage_names,
    plan_search,
)
from specsim.token_tree import TokenTree, new_tree

_CPU_STAGE_DEFAULTS = {
    ("Accept", "base"): 0.0,
    ("BonusSample", "base"): 0.0,
    ("PrepareVerify", "base"): 0.0,
    ("TailDraft", "base"): 0.0,
}


@dataclass(frozen=True)
class SequencePolicy:
    """Draft a single chain of ``num_draft`` tokens."""

    num_draft: int

    def __post_init__(self) -> None:
        if self.num_draft < 1:
            raise ValueError(f"num_draft {self.num_draft} must be >= 1")


@dataclass(frozen=True)
class KAryPolicy:
    """Draft a balanced ``k``-ary tree with ``depth`` levels past the root."""

    k: int
    depth: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.depth < 1:
            raise ValueError("k and depth must be >= 1")


@dataclass(frozen=True)
class StaticTreePolicy:
    """Reuse one fixed tree template every iteration."""

    template: TokenTree


@dataclass(frozen=True)
class EgtPolicy:
    """Equal-growth drafting with width selection and verification pruning.

    ``predictor_factory`` builds a fresh depth predictor per run so repeated
    runs never share predictor state; until the predictor reports ready the
    policy drafts at ``fallback_depth``.
    """

    config: EgtConfig = EgtConfig()
    predictor_factory: Callable[[], DepthPredictor] = field(
        default=lambda: FixedDepth(8)
    )
    fallback_depth: int = 8

    def __post_init__(self) -> None:
        if not 1 <= self.fallback_depth <= self.config.max_depth:
            raise ValueError(
                f"fallback_depth {self.fallback_depth} outside [1, {self.config.max_depth}]"
            )


Policy = SequencePolicy | KAryPolicy | StaticTreePolicy | EgtPolicy


@dataclass(frozen=True)
class SimConfig:
    seed: int
    iterations: int
    model: AcceptanceModel
    generator: object
    profiles: ProfilePair
    policy: Policy
    stage_profiles: StageProfiles | None = None
    plan_search: bool = False
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations {self.iterations} must be >= 1")
        if self.jobs < 1:
            raise ValueError(f"jobs {self.jobs} must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    d_draft: int
    tree_size: int
    w_verify: int
    accepted_len: int
    step_us: float


@dataclass(frozen=True)
class DecodeStats:
    """Aggregated decode metrics; per-token latency is a ratio of means."""

    aal: float
    step_latency_us: float
    tpot_us: float
    speedup: float
    trace: tuple[IterationRecord, ...]


@dataclass(frozen=True)
class _Prepared:
    """Everything iteration-invariant about one (drafter, depth) choice."""

    tree: TokenTree
    probs: np.ndarray
    d_draft: int
    w_draft: int
    w_verify: int
    expected_aal: float
    step_us: float


def _chain_tree(drafter, num_nodes: int) -> TokenTree:
    tree = new_tree(*drafter.root())
    node = 0
    for _ in range(num_nodes - 1):
        candidates = drafter.candidates(tree, node, 1)
        if not candidates:
            break
        token, prob = candidates[0]
        node = tree.add_child(node, token=token, prob=prob)
    return tree


def _kary_tree(drafter, k: int, depth: int) -> TokenTree:
    tree = new_tree(*drafter.root())
    frontier = [0]
    for _ in range(depth):
        grown = []
        for node in frontier:
            for token, prob in drafter.candidates(tree, node, k):
                grown.append(tree.add_child(node, token=token, prob=prob))
        if not grown:
            break
        frontier = grown
    return tree


def _level_sizes(tree: TokenTree) -> list[int]:
    return [len(level) for level in tree.levels[1:]]


def _merged_stages(
    profiles: ProfilePair,
    level_sizes: Sequence[int],
    w_verify: int,
    user: StageProfiles | None,
) -> StageProfiles:
    rows = dict(_CPU_STAGE_DEFAULTS)
    if user is not None:
        rows.update(user.rows())
    rows[("Verify", "base")] = latency_at(profiles.verifier, w_verify + 1)
    for name, width in zip(draft_stage_names(len(level_sizes)), level_sizes):
        rows[(name, "base")] = latency_at(profiles.drafter, width)
    return StageProfiles(rows)


def _step_latency(
    profiles: ProfilePair,
    level_sizes: Sequence[int],
    w_verify: int,
    user: StageProfiles | None,
    scheduled: bool,
) -> float:
    merged = _merged_stages(profiles, level_sizes, w_verify, user)
    d_draft = len(level_sizes)
    if d_draft == 0:
        return sum(
            merged.base(name)
            for name in ("Verify", "Accept", "BonusSample", "TailDraft", "PrepareVerify")
        )
    if scheduled:
        shape = TreeShape(w_draft=max(level_sizes), d_draft=d_draft, w_verify=w_verify)
        return plan_search(merged, shape, expected_aal=1.0).makespan_us
    names = ["Verify", "Accept", "BonusSample", "TailDraft", *draft_stage_names(d_draft), "PrepareVerify"]
    return sum(merged.base(name) for name in names)


def _prepare(config: SimConfig, drafter, depth: int) -> _Prepared:
    """Build, price, and freeze the tree for one (drafter, depth) choice."""
    policy = config.policy
    if isinstance(policy, SequencePolicy):
        tree = _chain_tree(drafter, policy.num_draft)
    elif isinstance(policy, KAryPolicy):
        tree = _kary_tree(drafter, policy.k, policy.depth)
    elif isinstance(policy, StaticTreePolicy):
        tree = policy.template
    else:
        width = select_width(
            policy.config, depth, drafter, config.profiles, model=config.model
        )
        tree = new_tree(*drafter.root())
        grow_egt(tree, drafter, d_draft=depth, w_draft=width, expansion_k=policy.config.expansion_k)
        grown_probs = freeze_probs(config.model, tree)
        pruned = prune_verify(
            tree,
            config.model,
            config.profiles,
            d_draft=depth,
            w_draft=width,
            max_verify=policy.config.max_verify,
        )
        kept = list(pruned.kept)
        levels = _level_sizes(tree)
        step = _step_latency(
            config.profiles, levels, pruned.w_verify, config.stage_profiles, config.plan_search
        )
        return _Prepared(
            tree=pruned.tree,
            probs=grown_probs[kept],
            d_draft=len(levels),
            w_draft=max(levels, default=1),
            w_verify=pruned.w_verify,
            expected_aal=pruned.expected_aal,
            step_us=step,
        )
    probs = freeze_probs(config.model, tree)
    levels = _level_sizes(tree)
    w_verify = len(tree)
    step = _step_latency(
        config.profiles, levels, w_verify, config.stage_profiles, config.plan_search
    )
    return _Prepared(
        tree=tree,
        probs=probs,
        d_draft=len(levels),
        w_draft=max(levels, default=1),
        w_verify=w_verify,
        expected_aal=1.0 + float(np.sum(path_products(tree, probs))),
        step_us=step,
    )


def _root_candidates(drafter, k: int) -> list[tuple[int, float]]:
    probe = new_tree(*drafter.root())
    return drafter.candidates(probe, 0, k)


def run(config: SimConfig) -> DecodeStats:
    """Simulate ``config.iterations`` decoding iterations; bit-deterministic."""
    is_egt = isinstance(config.policy, EgtPolicy)
    predictor = config.policy.predictor_factory() if is_egt else None
    state = FeatureState()
    cache: dict[tuple, _Prepared] = {}
    records: list[IterationRecord] = []
    for iteration in range(config.iterations):
        rng = np.random.default_rng([config.seed, iteration])
        drafter = config.generator.drafter_at(iteration)
        if is_egt:
            assert predictor is not None
            features = state.features(
                _root_candidates(drafter, config.policy.config.expansion_k)
            )
            if predictor.ready:
                depth = predictor.predict(features)
            else:
                depth = config.policy.fallback_depth
            depth = max(1, min(config.policy.config.max_depth, depth))
        else:
            depth = 0
        key = (drafter.signature(), depth)
        prepared = cache.get(key)
        if prepared is None:
            prepared = _prepare(config, drafter, depth)
            cache[key] = prepared
        outcome = sample_with_probs(prepared.tree, prepared.probs, rng)
        state.observe(outcome.accepted_len)
        if predictor is not None:
            predictor.observe(outcome.accepted_len)
        records.append(
            IterationRecord(
                iteration=iteration,
                d_draft=prepared.d_draft,
                tree_size=len(prepared.tree),
                w_verify=prepared.w_verify,
                accepted_len=outcome.accepted_len,
                step_us=prepared.step_us,
            )
        )
    total_tokens = sum(r.accepted_len for r in records)
    total_time = sum(r.step_us for r in records)
    tpot = total_time / total_tokens
    reference = latency_at(config.profiles.verifier, 1)
    return DecodeStats(
        aal=total_tokens / len(records),
        step_latency_us=total_time / len(records),
        tpot_us=tpot,
        speedup=reference / tpot,
        trace=tuple(records),
    )


@dataclass(frozen=True)
class CompareRow:
    label: str
    stats: DecodeStats
    relative_speedup: float


def compare(
    configs: Sequence[SimConfig], labels: Sequence[str] | None = None
) -> list[CompareRow]:
    """Run each config and report speedups relative to the first."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    if labels is None:
        labels = [f"config{i}" for i in range(len(configs))]
    if len(labels) != len(configs):
        raise ConfigError("one label per config required")
    head = configs[0]
    for other in configs[1:]:
        if other.model.to_dict() != head.model.to_dict():
            raise ConfigError("compare requires a shared acceptance model")
        if other.profiles != head.profiles:
            raise ConfigError("compare requires shared latency profiles")
    rows = []
    baseline: float | None = None
    for label, config in zip(labels, configs):
        stats = run(config)
        if baseline is None:
            baseline = stats.speedup
        rows.append(
            CompareRow(
                label=label, stats=stats, relative_speedup=stats.speedup / baseline
            )
        )
    return rows


@dataclass(frozen=True)
class SweepRow:
    value: str
    aal: float
    step_us: float
    tpot_us: float
    speedup: float


def _expected_point(
    config: SimConfig,
    *,
    depth_override: int | None = None,
    width_override: int | None = None,
    verify_override: int | None = None,
    profiles: ProfilePair | None = None,
    prune: bool = True,
    max_verify: int | None = None,
    scheduled: bool | None = None,
) -> tuple[float, float]:
    """Deterministic (expected aal, step latency) for the configured policy.

    Averages over the generator's difficulty regimes with equal weight.
    Overrides pin the EGT depth or width, or clamp the verification budget
    for curve sweeps; non-EGT policies accept only ``verify_override``.
    """
    profiles = profiles if profiles is not None else config.profiles
    scheduled = config.plan_search if scheduled is None else scheduled
    aals: list[float] = []
    steps: list[float] = []
    for drafter in config.generator.regimes():
        if isinstance(config.policy, EgtPolicy):
            egt = config.policy.config
            depth = depth_override if depth_override is not None else config.policy.fallback_depth
            depth = max(1, min(egt.max_depth, depth))
            width = (
                width_override
                if width_override is not None
                else select_width(egt, depth, drafter, profiles, model=config.model)
            )
            tree = new_tree(*drafter.root())
            grow_egt(tree, drafter, d_draft=depth, w_draft=width, expansion_k=egt.expansion_k)
        elif isinstance(config.policy, SequencePolicy):
            tree = _chain_tree(drafter, config.policy.num_draft)
        elif isinstance(config.policy, KAryPolicy):
            tree = _kary_tree(drafter, config.policy.k, config.policy.depth)
        else:
            tree = config.policy.template
        probs = freeze_probs(config.model, tree)
        levels = _level_sizes(tree)
        if verify_override is not None:
            k = max(1, min(verify_override, len(tree)))
            dp = SubtreeKnapsack(tree, path_products(tree, probs), k)
            aal = 1.0 + dp.best(0, k)
        elif isinstance(config.policy, EgtPolicy) and prune:
            cap = max_verify if max_verify is not None else config.policy.config.max_verify
            pruned = prune_verify(
                tree,
                config.model,
                profiles,
                d_draft=len(levels),
                w_draft=max(levels, default=1),
                max_verify=cap,
            )
            k = pruned.w_verify
            aal = pruned.expected_aal
        else:
            k = len(tree)
            aal = 1.0 + float(np.sum(path_products(tree, probs)))
        steps.append(
            _step_latency(profiles, levels, k, config.stage_profiles, scheduled)
        )
        aals.append(aal)
    return float(np.mean(aals)), float(np.mean(steps))


def sweep_verify(config: SimConfig, widths: Sequence[int]) -> list[SweepRow]:
    """Expected-mode speedup curve across verification budgets."""
    if not widths:
        raise ConfigError("sweep needs at least one width")
    if list(widths) != sorted(set(widths)) or min(widths) < 1:
        raise ConfigError("widths must be ascending positive integers")
    reference = latency_at(config.profiles.verifier, 1)
    rows = []
    for width in widths:
        aal, step = _expected_point(config, verify_override=width)
        tpot = step / aal
        rows.append(
            SweepRow(
                value=str(width),
                aal=aal,
                step_us=step,
                tpot_us=tpot,
                speedup=reference / tpot,
            )
        )
    return rows


def sweep_param(config: SimConfig, param: str, values: Sequence[int]) -> list[SweepRow]:
    """One-dimensional expected-mode sweep over a drafting parameter."""
    if param == "verify_width":
        return sweep_verify(config, values)
    if param not in ("draft_width", "draft_depth"):
        raise ConfigError(f"unknown sweep parameter {param!r}")
    if not isinstance(config.policy, EgtPolicy):
        raise ConfigError(f"sweeping {param} requires the equal-growth policy")
    if not values or list(values) != sorted(set(values)) or min(values) < 1:
        raise ConfigError("values must be ascending positive integers")
    reference = latency_at(config.profiles.verifier, 1)
    rows = []
    for value in values:
        override = {"draft_width": "width_override", "draft_depth": "depth_override"}[param]
        aal, step = _expected_point(config, **{override: value})
        tpot = step / aal
        rows.append(
            SweepRow(
                value=str(value),
                aal=aal,
                step_us=step,
                tpot_us=tpot,
                speedup=reference / tpot,
            )
        )
    return rows


def sweep_grid(
    config: SimConfig, params: Sequence[str], value_lists: Sequence[Sequence[int]]
) -> list[SweepRow]:
    """Cartesian sweep over several parameters; one row per combination."""
    if len(params) != len(value_lists) or not params:
        raise ConfigError("one value list per parameter required")
    for param in params:
        if param not in ("verify_width", "draft_width", "draft_depth"):
            raise ConfigError(f"unknown sweep parameter {param!r}")
    if len(set(params)) != len(params):
        raise ConfigError("sweep parameters must be distinct")
    reference = latency_at(config.profiles.verifier, 1)
    combos: list[list[tuple[str, int]]] = [[]]
    for param, values in zip(params, value_lists):
        combos = [combo + [(param, int(v))] for combo in combos for v in values]
    overrides_by_param = {
        "verify_width": "verify_override",
        "draft_width": "width_override",
        "draft_depth": "depth_override",
    }
    rows = []
    for combo in combos:
        kwargs = {overrides_by_param[param]: value for param, value in combo}
        aal, step = _expected_point(config, **kwargs)
        tpot = step / aal
        rows.append(
            SweepRow(
                value=";".join(f"{param}={value}" for param, value in combo),
                aal=aal,
                step_us=step,
                tpot_us=tpot,
                speedup=reference / tpot,
            )
        )
    return rows


def collect_depth_samples(
    config: SimConfig, n: int, probe_depth: int = 8
) -> list[DepthSample]:
    """Profile deep fixed chains: (features seen, accepted length realized)."""
    if n < 1:
        raise ValueError(f"n {n} must be >= 1")
    if probe_depth < 1:
        raise ValueError(f"probe_depth {probe_depth} must be >= 1")
    state = FeatureState()
    samples: list[DepthSample] = []
    cache: dict[tuple, tuple[TokenTree, np.ndarray]] = {}
    for iteration in range(n):
        rng = np.random.default_rng([config.seed, iteration])
        drafter = config.generator.drafter_at(iteration)
        key = drafter.signature()
        entry = cache.get(key)
        if entry is None:
            tree = _chain_tree(drafter, probe_depth)
            entry = (tree, freeze_probs(config.model, tree))
            cache[key] = entry
        tree, probs = entry
        features = state.features(_root_candidates(drafter, 8))
        outcome = sample_with_probs(tree, probs, rng)
        samples.append(DepthSample(features=features, realized_len=outcome.accepted_len))
        state.observe(outcome.accepted_len)
    return samples


@dataclass(frozen=True)
class BreakdownRow:
    stage: str
    label: str
    aal: float
    step_us: float
    tpot_us: float
    speedup: float


def _ema_converged_depth(
    config: SimConfig,
    drafter,
    profiles: ProfilePair,
    start_depth: int,
    rounds: int = 64,
) -> int:
    """Fixed point of the moving-average depth heuristic, in expectation.

    Feeds the heuristic the rounded expected accepted length at the depth it
    keeps choosing; with a stationary drafter this settles within a few
    rounds.
    """
    assert isinstance(config.policy, EgtPolicy)
    egt = config.policy.config
    predictor = EmaHeuristic(window=4, alpha=0.4, max_depth=egt.max_depth)
    single = SimConfig(
        seed=config.seed,
        iterations=1,
        model=config.model,
        generator=StationaryGenerator(drafter),
        profiles=config.profiles,
        policy=config.policy,
        stage_profiles=config.stage_profiles,
        plan_search=config.plan_search,
    )
    depth = start_depth
    aal_cache: dict[int, float] = {}
    for _ in range(rounds):
        if depth not in aal_cache:
            aal, _ = _expected_point(single, depth_override=depth, profiles=profiles)
            aal_cache[depth] = aal
        predictor.observe(max(1, round(aal_cache[depth])))
        if predictor.ready:
            depth = predictor.predict()
    return depth


def breakdown(config: SimConfig, compile_scale: float = 2.775) -> list[BreakdownRow]:
    """Cumulative optimization ladder O1..O5 in expected-value mode.

    O1 prices the objective-selected equal-growth tree with serial stages and
    no pruning; O2 divides the forward-pass latency curves by the static-shape
    compilation factor (the reference single-token verifier latency stays
    unscaled); O3 adds verification pruning with the whole tree in its search
    space; O4 schedules the stages instead of summing them; O5 adapts the
    draft depth with the moving-average heuristic.
    """
    if not isinstance(config.policy, EgtPolicy):
        raise ConfigError("breakdown requires the equal-growth policy")
    if compile_scale < 1.0:
        raise ConfigError(f"compile_scale {compile_scale} must be >= 1")
    reference = latency_at(config.profiles.verifier, 1)
    base_depth = config.policy.fallback_depth
    scaled = ProfilePair(
        drafter=config.profiles.drafter.scaled(1.0 / compile_scale),
        verifier=config.profiles.verifier.scaled(1.0 / compile_scale),
    )
    full_cap = config.policy.config.max_depth * max(config.policy.config.candidate_widths) + 1

    def point(stage: str, label: str, **kwargs) -> BreakdownRow:
        aal, step = _expected_point(config, depth_override=kwargs.pop("depth", base_depth), **kwargs)
        tpot = step / aal
        return BreakdownRow(
            stage=stage, label=label, aal=aal, step_us=step, tpot_us=tpot,
            speedup=reference / tpot,
        )

    rows = [
        point(
            "O1", "objective-selected tree, serial stages",
            prune=False, scheduled=False,
        ),
        point(
            "O2", "static-shape compilation discount",
            profiles=scaled, prune=False, scheduled=False,
        ),
        point(
            "O3", "verification-width pruning",
            profiles=scaled, prune=True, max_verify=full_cap, scheduled=False,
        ),
        point(
            "O4", "scheduled stage overlap",
            profiles=scaled, prune=True, max_verify=full_cap, scheduled=True,
        ),
    ]
    depths = [
        _ema_converged_depth(config, drafter, scaled, base_depth)
        for drafter in config.generator.regimes()
    ]
    aals: list[float] = []
    steps: list[float] = []
    for drafter, depth in zip(config.generator.regimes(), depths):
        single = SimConfig(
            seed=config.seed,
            iterations=1,
            model=config.model,
            generator=StationaryGenerator(drafter),
            profiles=config.profiles,
            policy=config.policy,
            stage_profiles=config.stage_profiles,
            plan_search=config.plan_search,
        )
        aal, step = _expected_point(
            single, depth_override=depth, profiles=scaled,
            prune=True, max_verify=full_cap, scheduled=True,
        )
        aals.append(aal)
        steps.append(step)
    aal = float(np.mean(aals))
    step = float(np.mean(steps))
    tpot = step / aal
    rows.append(
        BreakdownRow(
            stage="O5", label="adaptive draft depth", aal=aal, step_us=step,
            tpot_us=tpot, speedup=reference / tpot,
        )
    )
    return rows
