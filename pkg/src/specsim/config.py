"""Experiment configuration: one JSON document referencing data files by path.

Relative paths inside the document resolve against the document's own
directory, so a config and its profile CSVs can ship together and load from
anywhere.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Mapping

from specsim.acceptance import model_from_dict
from specsim.depth_predictor import (
    DepthPredictor,
    EmaHeuristic,
    FixedDepth,
    MlpPredictor,
)
from specsim.drafters import generator_from_dict
from specsim.egt import EgtConfig
from specsim.errors import ConfigError
from specsim.latency import ProfilePair, load_profile
from specsim.scheduler import StageProfiles
from specsim.simulator import (
    EgtPolicy,
    KAryPolicy,
    Policy,
    SequencePolicy,
    SimConfig,
    StaticTreePolicy,
)
from specsim.token_tree import load_tree


def _require(data: Mapping[str, Any], key: str, context: str) -> Any:
    if key not in data:
        raise ConfigError(f"{context} is missing required key {key!r}")
    return data[key]


def _int_field(data: Mapping[str, Any], key: str, context: str, default=None) -> int:
    value = data.get(key, default)
    if value is None:
        raise ConfigError(f"{context} is missing required key {key!r}")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{context} key {key!r} must be an integer, got {value!r}")
    return value


def _predictor_factory(
    spec: Mapping[str, Any], egt: EgtConfig, base_dir: Path
) -> Callable[[], DepthPredictor]:
    variant = _require(spec, "variant", "predictor")
    if variant == "fixed":
        depth = _int_field(spec, "depth", "fixed predictor")
        return lambda: FixedDepth(depth)
    if variant == "ema":
        window = _int_field(spec, "window", "ema predictor", default=4)
        alpha = float(spec.get("alpha", 0.4))
        max_depth = egt.max_depth
        return lambda: EmaHeuristic(window=window, alpha=alpha, max_depth=max_depth)
    if variant == "mlp":
        path = base_dir / str(_require(spec, "path", "mlp predictor"))
        try:
            payload = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"predictor checkpoint not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"predictor checkpoint {path} is not valid JSON: {exc}") from None
        MlpPredictor.from_dict(payload)  # validate eagerly, fail at load time
        return lambda: MlpPredictor.from_dict(payload)
    raise ConfigError(f"unknown predictor variant {variant!r}")


def _policy_from_dict(data: Mapping[str, Any], base_dir: Path) -> Policy:
    variant = _require(data, "variant", "policy")
    if variant == "sequence":
        return SequencePolicy(num_draft=_int_field(data, "num_draft", "sequence policy"))
    if variant == "kary":
        return KAryPolicy(
            k=_int_field(data, "k", "kary policy"),
            depth=_int_field(data, "depth", "kary policy"),
        )
    if variant == "static_tree":
        path = base_dir / str(_require(data, "tree", "static_tree policy"))
        if not path.exists():
            raise ConfigError(f"tree file not found: {path}")
        return StaticTreePolicy(template=load_tree(path))
    if variant == "egt":
        egt = EgtConfig(
            candidate_widths=tuple(data.get("candidate_widths", (1, 2, 4, 8))),
            max_depth=_int_field(data, "max_depth", "egt policy", default=16),
            max_verify=_int_field(data, "max_verify", "egt policy", default=64),
            expansion_k=_int_field(data, "expansion_k", "egt policy", default=8),
        )
        default_fallback = min(8, egt.max_depth)
        predictor_spec = data.get("predictor", {"variant": "fixed", "depth": default_fallback})
        fallback = _int_field(data, "fallback_depth", "egt policy", default=default_fallback)
        return EgtPolicy(
            config=egt,
            predictor_factory=_predictor_factory(predictor_spec, egt, base_dir),
            fallback_depth=fallback,
        )
    raise ConfigError(f"unknown policy variant {variant!r}")


def _profile_pair(data: Mapping[str, Any], base_dir: Path) -> ProfilePair:
    draft_path = base_dir / str(_require(data, "draft", "profiles"))
    verify_path = base_dir / str(_require(data, "verify", "profiles"))
    for path in (draft_path, verify_path):
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
    return ProfilePair(
        drafter=load_profile(draft_path, role="drafter"),
        verifier=load_profile(verify_path, role="verifier"),
    )


def config_from_dict(data: Mapping[str, Any], base_dir: Path | str = ".") -> SimConfig:
    """Build a validated simulation config from parsed JSON."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"config document must be a JSON object, got {type(data).__name__}")
    base = Path(base_dir)
    known = {
        "seed", "iterations", "acceptance", "workload", "profiles",
        "stages", "policy", "plan_search", "jobs",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    stages = None
    if "stages" in data and data["stages"] is not None:
        stage_path = base / str(data["stages"])
        if not stage_path.exists():
            raise ConfigError(f"stage profile file not found: {stage_path}")
        stages = StageProfiles.from_csv(stage_path)
    plan = data.get("plan_search", False)
    if not isinstance(plan, bool):
        raise ConfigError(f"plan_search must be a boolean, got {plan!r}")
    try:
        return SimConfig(
            seed=_int_field(data, "seed", "config", default=0),
            iterations=_int_field(data, "iterations", "config"),
            model=model_from_dict(_require(data, "acceptance", "config")),
            generator=generator_from_dict(_require(data, "workload", "config")),
            profiles=_profile_pair(_require(data, "profiles", "config"), base),
            policy=_policy_from_dict(_require(data, "policy", "config"), base),
            stage_profiles=stages,
            plan_search=plan,
            jobs=_int_field(data, "jobs", "config", default=1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SimConfig:
    """Load and validate an experiment config document."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)
