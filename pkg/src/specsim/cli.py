"""Command-line front end for experiments, sweeps, and profile tooling.

Machine-readable results go to standard output or files; diagnostics go to
standard error. Exit codes: 0 success, 1 runtime failure, 2 usage or config
error. All randomness derives from the config seed (optionally overridden
with ``--seed``), so repeated invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from specsim.config import config_from_dict, load_config
from specsim.depth_predictor import TrainConfig, train_predictor
from specsim.errors import ConfigError
from specsim.latency import LatencyProfile, load_profile, save_profile
from specsim.scheduler import StageProfiles, TreeShape, plan_search, save_timeline
from specsim.simulator import (
    collect_depth_samples,
    compare,
    run,
    sweep_grid,
    sweep_param,
)
from specsim.token_tree import TokenTree

_SWEEP_PARAMS = ("verify_width", "draft_width", "draft_depth")


def _write_json(payload, path: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _load_with_overrides(args) -> "SimConfig":
    config = load_config(args.config)
    replacements = {}
    if getattr(args, "seed", None) is not None:
        replacements["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError(f"--jobs {args.jobs} must be >= 1")
        replacements["jobs"] = args.jobs
    if replacements:
        config = dataclasses.replace(config, **replacements)
    return config


def _cmd_simulate(args) -> int:
    config = _load_with_overrides(args)
    stats = run(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "aal": stats.aal,
        "iterations": config.iterations,
        "seed": config.seed,
        "speedup": stats.speedup,
        "step_latency_us": stats.step_latency_us,
        "tpot_us": stats.tpot_us,
    }
    _write_json(summary, out_dir / "summary.json")
    _write_csv(
        out_dir / "iterations.csv",
        ["iteration", "d_draft", "tree_size", "w_verify", "accepted_len", "step_us"],
        [
            [r.iteration, r.d_draft, r.tree_size, r.w_verify, r.accepted_len, r.step_us]
            for r in stats.trace
        ],
    )
    _write_json(summary, None)
    return 0


def _cmd_compare(args) -> int:
    configs = []
    for path in args.config:
        config = load_config(path)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        configs.append(config)
    labels = [Path(path).stem for path in args.config]
    rows = compare(configs, labels=labels)
    header = ["label", "aal", "step_latency_us", "tpot_us", "speedup", "relative_speedup"]
    table = [
        [
            row.label,
            row.stats.aal,
            row.stats.step_latency_us,
            row.stats.tpot_us,
            row.stats.speedup,
            row.relative_speedup,
        ]
        for row in rows
    ]
    if args.out is not None:
        _write_csv(Path(args.out), header, table)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(table)
    return 0


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(piece) for piece in text.split(",") if piece.strip()]
    except ValueError:
        raise ConfigError(f"--values {text!r} must be comma-separated integers") from None
    if not values:
        raise ConfigError("--values must name at least one integer")
    if values != sorted(set(values)):
        raise ConfigError(f"--values {text!r} must be ascending without repeats")
    return values


def _cmd_sweep(args) -> int:
    if len(args.param) != len(args.values):
        raise ConfigError("each --param needs a matching --values list")
    config = _load_with_overrides(args)
    value_lists = [_parse_values(text) for text in args.values]
    if len(args.param) == 1:
        rows = sweep_param(config, args.param[0], value_lists[0])
    else:
        rows = sweep_grid(config, args.param, value_lists)
    _write_csv(
        Path(args.out),
        ["value", "aal", "step_us", "tpot_us", "speedup"],
        [[row.value, row.aal, row.step_us, row.tpot_us, row.speedup] for row in rows],
    )
    return 0


def _cmd_plan_search(args) -> int:
    profiles = StageProfiles.from_csv(args.stages)
    if args.aal < 1.0:
        raise ConfigError(f"--aal {args.aal} must be >= 1")
    w_verify = args.verify_width
    if w_verify is None:
        w_verify = args.draft_width * args.draft_depth
    try:
        shape = TreeShape(
            w_draft=args.draft_width, d_draft=args.draft_depth, w_verify=w_verify
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = plan_search(profiles, shape, expected_aal=args.aal)
    if args.out is not None:
        save_timeline(result, args.out)
    _write_json(
        {
            "transforms": list(result.plan.transforms),
            "priority": list(result.plan.priority),
            "makespan_us": result.makespan_us,
            "per_token_us": result.per_token_us,
        },
        None,
    )
    return 0


def _cmd_train_predictor(args) -> int:
    config = _load_with_overrides(args)
    if args.samples < 2:
        raise ConfigError(f"--samples {args.samples} must be >= 2")
    if args.probe_depth < 1:
        raise ConfigError(f"--probe-depth {args.probe_depth} must be >= 1")
    samples = collect_depth_samples(config, args.samples, probe_depth=args.probe_depth)
    result = train_predictor(samples, TrainConfig(seed=config.seed))
    _write_json(result.predictor.to_dict(), Path(args.out))
    _write_json(
        {
            "final_loss": result.final_loss,
            "initial_loss": result.initial_loss,
            "samples": len(samples),
        },
        None,
    )
    return 0


def _parse_shape_params(text: str, expected: tuple[str, ...]) -> dict[str, float]:
    params: dict[str, float] = {}
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        if "=" not in piece:
            raise ConfigError(f"--params entry {piece!r} must look like name=value")
        name, _, raw = piece.partition("=")
        try:
            params[name.strip()] = float(raw)
        except ValueError:
            raise ConfigError(f"--params value {raw!r} is not a number") from None
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing:
        raise ConfigError(f"missing --params for this shape: {sorted(missing)}")
    if extra:
        raise ConfigError(f"unknown --params for this shape: {sorted(extra)}")
    return params


def _cmd_gen_profile(args) -> int:
    if args.shape == "flat":
        params = _parse_shape_params(args.params, ("level",))
        level = params["level"]
        if level <= 0:
            raise ConfigError(f"level {level} must be positive")
        breakpoints = ((1, level), (1024, level))
    elif args.shape == "saturating":
        params = _parse_shape_params(args.params, ("knee", "base", "slope"))
        knee, base, slope = params["knee"], params["base"], params["slope"]
        if base <= 0 or slope < 0:
            raise ConfigError("base must be positive and slope non-negative")
        knee = int(knee)
        if knee < 2:
            raise ConfigError(f"knee {knee} must be >= 2")
        breakpoints = ((1, base), (knee, base), (2 * knee, base + slope * knee))
    else:
        params = _parse_shape_params(args.params, ("base", "slope"))
        base, slope = params["base"], params["slope"]
        if base <= 0 or slope < 0:
            raise ConfigError("base must be positive and slope non-negative")
        breakpoints = ((1, base), (1024, base + slope * 1023))
    profile = LatencyProfile(breakpoints=breakpoints, role="drafter")
    save_profile(profile, args.out)
    return 0


def _validate_one(path: Path) -> None:
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if isinstance(data, dict) and "nodes" in data:
            try:
                TokenTree.from_dict(data)
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        else:
            config_from_dict(data, base_dir=path.parent)
        return
    with open(path, newline="") as handle:
        header = handle.readline().strip()
    if header == "width,latency_us":
        load_profile(path, role="drafter")
    elif header == "stage,variant,duration_us":
        StageProfiles.from_csv(path)
    else:
        raise ConfigError(f"{path}: unrecognized file format (header {header!r})")


def _cmd_validate(args) -> int:
    for path in args.paths:
        _validate_one(Path(path))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specsim",
        description="Deterministic speculative-decoding latency simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="run one experiment config")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--jobs", type=int, default=None)
    simulate.add_argument("--out", required=True, help="output directory")
    simulate.set_defaults(func=_cmd_simulate)

    cmp_parser = sub.add_parser("compare", help="run several configs side by side")
    cmp_parser.add_argument("--config", action="append", required=True)
    cmp_parser.add_argument("--seed", type=int, default=None)
    cmp_parser.add_argument("--out", default=None, help="CSV path (default stdout)")
    cmp_parser.set_defaults(func=_cmd_compare)

    sweep = sub.add_parser("sweep", help="sweep drafting parameters")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument(
        "--param", action="append", required=True, choices=_SWEEP_PARAMS
    )
    sweep.add_argument("--values", action="append", required=True)
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(func=_cmd_sweep)

    plan = sub.add_parser("plan-search", help="search stage schedules")
    plan.add_argument("--stages", required=True)
    plan.add_argument("--aal", type=float, default=1.0)
    plan.add_argument("--draft-width", type=int, default=4)
    plan.add_argument("--draft-depth", type=int, default=4)
    plan.add_argument("--verify-width", type=int, default=None)
    plan.add_argument("--out", default=None, help="timeline JSON path")
    plan.set_defaults(func=_cmd_plan_search)

    train = sub.add_parser("train-predictor", help="train the depth predictor")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--samples", type=int, default=2000)
    train.add_argument("--probe-depth", type=int, default=8)
    train.add_argument("--out", required=True, help="checkpoint JSON path")
    train.set_defaults(func=_cmd_train_predictor)

    gen = sub.add_parser("gen-profile", help="write a synthetic latency profile")
    gen.add_argument("--shape", required=True, choices=("flat", "saturating", "linear"))
    gen.add_argument("--params", required=True, help="comma list like knee=64,base=100")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_profile)

    validate = sub.add_parser("validate", help="check config/profile/tree files")
    validate.add_argument("paths", nargs="+")
    validate.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures keep a distinct exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
