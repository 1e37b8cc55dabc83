"""Encoding, validation and enumeration of the searchable network family.

A candidate is three lists of residual-block channel widths, one per
down-sampling stage: ``[[c3_1..c3_L], [c4_1..c4_M], [c5_1..c5_N]]``. Depths
are balanced (no stage may hold more than half, or less than a quarter, of
all blocks) and the total block count is kept between 3 and 9.
"""

from __future__ import annotations

import ast
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

LEGAL_WIDTHS = (4, 8, 16, 32, 64, 128)
MIN_TOTAL_DEPTH = 3
MAX_TOTAL_DEPTH = 9


class SpecError(ValueError):
    """Malformed or constraint-violating architecture text."""


@dataclass(frozen=True, order=True)
class ArchSpec:
    """Channel widths of the residual blocks in stages 3, 4 and 5."""

    stage3: tuple[int, ...]
    stage4: tuple[int, ...]
    stage5: tuple[int, ...]

    @property
    def stages(self) -> tuple[tuple[int, ...], ...]:
        return (self.stage3, self.stage4, self.stage5)

    @property
    def depths(self) -> tuple[int, int, int]:
        return (len(self.stage3), len(self.stage4), len(self.stage5))

    @property
    def total_depth(self) -> int:
        return sum(self.depths)


def depth_bounds(total: int) -> tuple[int, int]:
    """Allowed per-stage block count for a given total block count."""
    return max(1, total // 4), -(-total // 2)


def validate_spec(spec: ArchSpec) -> ArchSpec:
    total = spec.total_depth
    if not MIN_TOTAL_DEPTH <= total <= MAX_TOTAL_DEPTH:
        raise SpecError(f"total depth {total} outside [{MIN_TOTAL_DEPTH}, {MAX_TOTAL_DEPTH}]")
    lo, hi = depth_bounds(total)
    for name, stage in zip(("stage 3", "stage 4", "stage 5"), spec.stages):
        if not lo <= len(stage) <= hi:
            raise SpecError(f"depth balance violated: {name} has {len(stage)} blocks, "
                            f"allowed [{lo}, {hi}] at total depth {total}")
        for w in stage:
            if w not in LEGAL_WIDTHS:
                raise SpecError(f"illegal width {w} in {name}; allowed {LEGAL_WIDTHS}")
    return spec


def parse_spec(text: str) -> ArchSpec:
    """Parse ``[[..],[..],[..]]`` text into a validated ArchSpec."""
    try:
        value = ast.literal_eval(text.strip())
    except (ValueError, SyntaxError) as exc:
        raise SpecError(f"unparseable architecture text: {text!r}") from exc
    if (not isinstance(value, list) or len(value) != 3
            or not all(isinstance(s, list) for s in value)):
        raise SpecError(f"architecture must be exactly three lists of widths, got {text!r}")
    for s in value:
        if not all(isinstance(w, int) and not isinstance(w, bool) for w in s):
            raise SpecError(f"widths must be integers: {text!r}")
    return validate_spec(ArchSpec(*(tuple(s) for s in value)))


def format_spec(spec: ArchSpec) -> str:
    return "[{}]".format(",".join(
        "[{}]".format(",".join(str(w) for w in stage)) for stage in spec.stages))


@dataclass(frozen=True)
class SpaceConstraints:
    """Optional narrowing of the search space (used for desk-scale runs)."""

    widths: tuple[int, ...] = LEGAL_WIDTHS
    min_total: int = MIN_TOTAL_DEPTH
    max_total: int = MAX_TOTAL_DEPTH

    def __post_init__(self):
        for w in self.widths:
            if w not in LEGAL_WIDTHS:
                raise SpecError(f"constraint width {w} outside the legal set {LEGAL_WIDTHS}")
        if not MIN_TOTAL_DEPTH <= self.min_total <= self.max_total <= MAX_TOTAL_DEPTH:
            raise SpecError("constraint depth range must lie within "
                            f"[{MIN_TOTAL_DEPTH}, {MAX_TOTAL_DEPTH}]")


def enumerate_depth_triples(min_total: int = MIN_TOTAL_DEPTH,
                            max_total: int = MAX_TOTAL_DEPTH) -> Iterator[tuple[int, int, int]]:
    for total in range(min_total, max_total + 1):
        lo, hi = depth_bounds(total)
        for L in range(lo, hi + 1):
            for M in range(lo, hi + 1):
                N = total - L - M
                if lo <= N <= hi:
                    yield (L, M, N)


def enumerate_space(constraints: SpaceConstraints = SpaceConstraints()) -> Iterator[ArchSpec]:
    """Yield every legal spec under the constraints, once, in deterministic order."""
    widths = tuple(sorted(constraints.widths))
    for L, M, N in enumerate_depth_triples(constraints.min_total, constraints.max_total):
        for all_w in itertools.product(widths, repeat=L + M + N):
            yield ArchSpec(tuple(all_w[:L]), tuple(all_w[L:L + M]), tuple(all_w[L + M:]))
