"""Latency-aware architecture search with partial order pruning.

Working assumption: among candidates with identical stage depths, widening
never hurts accuracy and never helps latency. Each trained candidate then
bounds every comparable untrained one - wider trained nets cap its accuracy
from above, narrower ones floor its latency - and any candidate whose bounds
are dominated by an already-trained record is dropped without training.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .archspace import ArchSpec, format_spec, parse_spec
from .tensor import Tensor, no_grad


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainedRecord:
    spec: ArchSpec
    accuracy: float
    latency_ms: float
    params: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise SearchError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.latency_ms <= 0:
            raise SearchError(f"latency {self.latency_ms} must be positive")


def narrower_leq(a: ArchSpec, b: ArchSpec) -> bool:
    """True iff a and b share a depth triple and a is elementwise no wider."""
    if a.depths != b.depths:
        return False
    return all(wa <= wb
               for sa, sb in zip(a.stages, b.stages)
               for wa, wb in zip(sa, sb))


def pareto_frontier(records: Sequence[TrainedRecord]) -> list[TrainedRecord]:
    """Records not dominated in (latency minimized, accuracy maximized)."""
    kept = []
    for i, r in enumerate(records):
        dominated = False
        for j, s in enumerate(records):
            if i == j:
                continue
            if (s.latency_ms <= r.latency_ms and s.accuracy >= r.accuracy
                    and (s.latency_ms < r.latency_ms or s.accuracy > r.accuracy)):
                dominated = True
                break
            # exact tie on both axes: keep only the first-seen record
            if (s.latency_ms == r.latency_ms and s.accuracy == r.accuracy and j < i):
                dominated = True
                break
        if not dominated:
            kept.append(r)
    return kept


@dataclass
class SearchState:
    universe: list[ArchSpec]
    trained: list[TrainedRecord] = field(default_factory=list)
    pruned: set[ArchSpec] = field(default_factory=set)

    @property
    def trained_specs(self) -> set[ArchSpec]:
        return {r.spec for r in self.trained}

    @property
    def frontier(self) -> list[TrainedRecord]:
        return pareto_frontier(self.trained)

    def candidates(self) -> list[ArchSpec]:
        done = self.trained_specs
        return [s for s in self.universe if s not in done and s not in self.pruned]


def bounds(spec: ArchSpec, state: SearchState) -> tuple[float, float]:
    """(accuracy upper bound, latency lower bound) for an untrained spec."""
    if spec in state.trained_specs:
        raise SearchError(f"{format_spec(spec)} is already trained")
    acc_upper = 1.0
    lat_lower = 0.0
    for rec in state.trained:
        if narrower_leq(spec, rec.spec):
            acc_upper = min(acc_upper, rec.accuracy)
        if narrower_leq(rec.spec, spec):
            lat_lower = max(lat_lower, rec.latency_ms)
    return acc_upper, lat_lower


def prune_step(state: SearchState) -> SearchState:
    """Move every bound-dominated untrained spec into the pruned set."""
    if not state.trained:
        return state
    for spec in state.candidates():
        acc_upper, lat_lower = bounds(spec, state)
        for rec in state.trained:
            if lat_lower >= rec.latency_ms and acc_upper <= rec.accuracy:
                state.pruned.add(spec)
                break
    return state


def smallest_params_first(candidates: Sequence[ArchSpec],
                          param_count: Callable[[ArchSpec], int]) -> ArchSpec:
    """Default selection policy: cheapest candidate to train goes first."""
    return min(candidates, key=lambda s: (param_count(s), s))


def pop_search(universe: Iterable[ArchSpec],
               evaluator: Callable[[ArchSpec], tuple[float, float]],
               budget: Optional[int] = None,
               policy: Optional[Callable[[Sequence[ArchSpec]], ArchSpec]] = None,
               patience: int = 5,
               param_count: Optional[Callable[[ArchSpec], int]] = None,
               seed: int = 0,
               log_path=None,
               resume: bool = True) -> SearchState:
    """Iterate select/evaluate/prune until budget, exhaustion, or stagnation."""
    universe = list(universe)
    if not universe:
        raise SearchError("empty search universe")
    if param_count is None:
        param_count = lambda s: sum(w for st in s.stages for w in st)
    if policy is None:
        policy = lambda cands: smallest_params_first(cands, param_count)
    state = SearchState(universe=universe)
    if log_path is not None and resume:
        for rec in read_search_log(log_path):
            if rec.spec in {r.spec for r in state.trained}:
                continue
            state.trained.append(rec)
        prune_step(state)
    evals = 0
    stagnant = 0
    while True:
        if budget is not None and evals >= budget:
            break
        cands = state.candidates()
        if not cands:
            break
        if stagnant >= patience:
            break
        spec = policy(cands)
        accuracy, latency = evaluator(spec)
        rec = TrainedRecord(spec=spec, accuracy=accuracy, latency_ms=latency,
                            params=param_count(spec), seed=seed)
        state.trained.append(rec)
        if log_path is not None:
            append_search_log(log_path, rec)
        evals += 1
        before = len(state.pruned)
        prune_step(state)
        stagnant = 0 if len(state.pruned) > before else stagnant + 1
    return state


def append_search_log(path, rec: TrainedRecord):
    entry = {"spec": format_spec(rec.spec), "accuracy": rec.accuracy,
             "latency_ms": rec.latency_ms, "params": rec.params,
             "seed": rec.seed, "timestamp": time.time()}
    with open(path, "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def read_search_log(path) -> list[TrainedRecord]:
    records = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        return records
    for line in lines:
        line = line.strip()
        if not line:
            continue
        entry = json.loads(line)
        records.append(TrainedRecord(
            spec=parse_spec(entry["spec"]), accuracy=entry["accuracy"],
            latency_ms=entry["latency_ms"], params=entry["params"],
            seed=entry.get("seed", 0)))
    return records


def measure_latency(network, input_shape=(1, 1, 32, 32, 32),
                    warmup: int = 2, reps: int = 5,
                    clock: Optional[Callable[[], float]] = None) -> float:
    """Median wall-clock milliseconds of single-sample forward passes."""
    if reps < 1:
        raise SearchError("reps must be >= 1")
    if clock is None:
        clock = time.perf_counter
    x = np.zeros(input_shape)
    with no_grad():
        for _ in range(warmup):
            network.forward(Tensor(x), train=False)
        times = []
        for _ in range(reps):
            t0 = clock()
            network.forward(Tensor(x), train=False)
            times.append((clock() - t0) * 1000.0)
    return statistics.median(times)
