"""Profiled latency curves and the speedup objectives built on them.

A latency profile maps batch width (tokens processed in one forward pass)
to microseconds, interpolating linearly between measured breakpoints.
Below the first breakpoint the curve clamps; past the last it extrapolates
with the final segment's slope.

Three speedup estimates compare speculative decoding against plain
generative decoding at one token per verifier pass:

* ``naive_speedup``: the average accepted length itself, ignoring cost.
* ``sequence_speedup``: chain drafting, one token per draft step.
* ``tree_speedup``: tree drafting with a fixed per-level draft width and a
  verification width.  The verifier processes the speculative tokens plus
  the confirmed token they hang from, hence the ``+ 1`` in its width.

A chain is the degenerate tree (draft width 1, verification width equal to
depth), and on chains ``tree_speedup`` reduces to ``sequence_speedup``
exactly.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

_ROLES = ("drafter", "verifier")


@dataclass(frozen=True)
class LatencyProfile:
    """Piecewise-linear width-to-latency curve for one model role."""

    breakpoints: tuple[tuple[int, float], ...]
    role: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"role {self.role!r} must be one of {_ROLES}")
        if len(self.breakpoints) < 2:
            raise ValueError("latency profile needs at least 2 breakpoints")
        previous_width, previous_latency = None, None
        for width, latency_us in self.breakpoints:
            if width < 1:
                raise ValueError(f"breakpoint width {width} must be >= 1")
            if latency_us < 0:
                raise ValueError(f"breakpoint latency {latency_us} must be >= 0")
            if previous_width is not None:
                if width <= previous_width:
                    raise ValueError("breakpoint widths must be strictly increasing")
                if latency_us < previous_latency:
                    raise ValueError("breakpoint latencies must be non-decreasing")
            previous_width, previous_latency = width, latency_us

    def scaled(self, factor: float) -> "LatencyProfile":
        """Copy with every latency multiplied by ``factor``."""
        if factor <= 0:
            raise ValueError(f"scale factor {factor} must be positive")
        return LatencyProfile(
            tuple((w, latency * factor) for w, latency in self.breakpoints), self.role
        )


def latency_at(profile: LatencyProfile, width: int) -> float:
    """Latency in microseconds for a forward pass over ``width`` tokens."""
    if width < 1:
        raise ValueError(f"width {width} must be >= 1")
    points = profile.breakpoints
    widths = [w for w, _ in points]
    if width <= widths[0]:
        return points[0][1]
    if width >= widths[-1]:
        (w0, l0), (w1, l1) = points[-2], points[-1]
        slope = (l1 - l0) / (w1 - w0)
        return l1 + slope * (width - w1)
    hi = bisect_right(widths, width)
    (w0, l0), (w1, l1) = points[hi - 1], points[hi]
    return l0 + (l1 - l0) * (width - w0) / (w1 - w0)


@dataclass(frozen=True)
class TreeShape:
    """Static shape of one speculation round.

    ``w_draft`` tokens drafted per level, ``d_draft`` drafter invocations
    (tree levels past the root), and ``w_verify`` tokens submitted for
    verification.  A freshly grown tree has ``1 + d_draft * w_draft`` nodes,
    which bounds the verification width.
    """

    w_draft: int
    d_draft: int
    w_verify: int

    def __post_init__(self) -> None:
        for name in ("w_draft", "d_draft", "w_verify"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.w_verify > 1 + self.d_draft * self.w_draft:
            raise ValueError(
                f"w_verify {self.w_verify} exceeds tree size {1 + self.d_draft * self.w_draft}"
            )


@dataclass(frozen=True)
class ProfilePair:
    """The drafter and verifier latency curves used together."""

    drafter: LatencyProfile
    verifier: LatencyProfile


@dataclass(frozen=True)
class SpeedupInputs:
    """Everything the tree speedup objective needs."""

    aal: float
    shape: TreeShape
    profiles: ProfilePair

    def __post_init__(self) -> None:
        if self.aal < 1.0:
            raise ValueError(f"aal {self.aal} must be >= 1")
        if self.aal > self.shape.w_verify + 1 + 1e-9:
            raise ValueError(
                f"aal {self.aal} exceeds w_verify + 1 = {self.shape.w_verify + 1}"
            )


def naive_speedup(aal: float) -> float:
    """Speedup if drafting and tree verification were free."""
    if aal < 1.0:
        raise ValueError(f"aal {aal} must be >= 1")
    return aal


def sequence_speedup(aal: float, num_draft: int, profiles: ProfilePair) -> float:
    """Speedup of chain drafting with ``num_draft`` single-token steps."""
    if aal < 1.0:
        raise ValueError(f"aal {aal} must be >= 1")
    if num_draft < 0:
        raise ValueError(f"num_draft {num_draft} must be >= 0")
    if num_draft < aal - 1 - 1e-9:
        raise ValueError(f"num_draft {num_draft} cannot support aal {aal}")
    draft_cost = num_draft * latency_at(profiles.drafter, 1)
    verify_cost = latency_at(profiles.verifier, num_draft + 1)
    return aal * latency_at(profiles.verifier, 1) / (draft_cost + verify_cost)


def tree_speedup(inputs: SpeedupInputs) -> float:
    """Latency-aware speedup of tree drafting with the given shape."""
    shape = inputs.shape
    drafter = inputs.profiles.drafter
    verifier = inputs.profiles.verifier
    draft_cost = shape.d_draft * latency_at(drafter, shape.w_draft)
    verify_cost = latency_at(verifier, shape.w_verify + 1)
    return inputs.aal * latency_at(verifier, 1) / (draft_cost + verify_cost)


def load_profile(path: str | Path, role: str) -> LatencyProfile:
    """Read a ``width,latency_us`` CSV; malformed files raise :class:`ConfigError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read latency profile {path}: {exc}") from exc
    try:
        rows = list(csv.reader(text.splitlines()))
        if not rows or [cell.strip() for cell in rows[0]] != ["width", "latency_us"]:
            raise ValueError("first row must be the header 'width,latency_us'")
        breakpoints = []
        for row in rows[1:]:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"expected 2 columns, got {row!r}")
            breakpoints.append((int(row[0]), float(row[1])))
        return LatencyProfile(tuple(breakpoints), role)
    except ValueError as exc:
        raise ConfigError(f"invalid latency profile {path}: {exc}") from exc


def save_profile(profile: LatencyProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("width,latency_us\n")
        for width, latency_us in profile.breakpoints:
            handle.write(f"{width},{latency_us!r}\n")
