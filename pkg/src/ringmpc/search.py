"""Offline selection of per-group ReLU bit windows.

Two strategies:

  * eco: error-free.  Per group, keep the smallest k (with m = 0) whose
    signed range covers every activation observed on the validation set;
    high bits above that are provably inert, so the replayed network is
    bit-identical to the full-width one.

  * budget: lossy.  Depth-first enumeration of per-group window widths,
    largest first, under a global weighted-bit budget.  Each node fixes
    its group's (k, m) at the locally best position, scoring the partial
    assignment optimistically (unassigned groups stay at full width), and
    three early stops prune the walk: below the accuracy threshold, below
    the incumbent, or over budget.

All simulator evaluations are seeded by the window signature, so results
and trace counts are reproducible and independent of visit order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleSearchError
from .nn import ModelSpec, ReluConfig
from .ring import BitWindow
from .simulator import SimConfig, collect_activation_ranges, collect_drelu_decisions, sim_forward

DEFAULT_CANDIDATE_WIDTHS = (0, 2, 3, 4, 6, 8, 12, 16)
CONTINUE = "continue"
STOP_THRESHOLD = "stop1"
STOP_INCUMBENT = "stop2"
STOP_BUDGET = "stop3"


@dataclass(frozen=True)
class SearchBudget:
    """Weighted bit budget: sum of width_g * numel_g over groups must not
    exceed fraction * N * sum of numel_g."""

    fraction: Fraction
    group_sizes: dict[int, int]
    ring_bits: int

    def __post_init__(self) -> None:
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"budget fraction must be in (0, 1], got {self.fraction}")

    @property
    def limit_bits(self) -> Fraction:
        total = sum(self.group_sizes.values())
        return self.fraction * self.ring_bits * total

    def used_bits(self, widths: dict[int, int]) -> int:
        return sum(w * self.group_sizes[g] for g, w in widths.items())

    def satisfied(self, widths: dict[int, int]) -> bool:
        return self.used_bits(widths) <= self.limit_bits

    def fraction_used(self, widths: dict[int, int]) -> float:
        total = self.ring_bits * sum(self.group_sizes.values())
        return self.used_bits(widths) / total


@dataclass
class SearchTrace:
    nodes_visited: int = 0
    stop1: int = 0
    stop2: int = 0
    stop3: int = 0
    evaluations: int = 0

    def to_json(self) -> dict:
        return {
            "nodes_visited": self.nodes_visited,
            "stop1": self.stop1,
            "stop2": self.stop2,
            "stop3": self.stop3,
            "evaluations": self.evaluations,
        }


@dataclass
class SearchResult:
    windows: list[BitWindow | None]
    accuracy: float
    baseline_accuracy: float
    bits_fraction: float
    trace: SearchTrace

    def relu_config(self) -> ReluConfig:
        return ReluConfig(list(self.windows))

    def to_json(self) -> dict:
        out = self.relu_config().to_json()
        out.update(
            {
                "accuracy": self.accuracy,
                "baseline_accuracy": self.baseline_accuracy,
                "bits_fraction": self.bits_fraction,
                "trace": self.trace.to_json(),
            }
        )
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _signature(windows: tuple[BitWindow | None, ...]) -> tuple[int, ...]:
    code: list[int] = []
    for w in windows:
        code.extend((65, 65) if w is None else (w.k, w.m))
    return tuple(code)


class _Evaluator:
    """Caches simulator accuracy per window signature, seeds per config."""

    def __init__(self, model: ModelSpec, x_val: np.ndarray, y_val: np.ndarray, seed: int, trace: SearchTrace):
        self.model = model
        self.x_val = x_val
        self.y_val = y_val
        self.seed = seed
        self.trace = trace
        self._cache: dict[tuple[int, ...], float] = {}

    def accuracy(self, windows: tuple[BitWindow | None, ...]) -> float:
        sig = _signature(windows)
        if sig not in self._cache:
            eval_seed = int(np.random.SeedSequence([self.seed, *sig]).generate_state(1)[0])
            cfg = SimConfig(self.model.fixed_point, list(windows), seed=eval_seed)
            _, acc = sim_forward(self.model, self.x_val, self.y_val, cfg)
            self.trace.evaluations += 1
            self._cache[sig] = acc
        return self._cache[sig]


def parse_budget(text: str | Fraction | float) -> Fraction:
    if isinstance(text, Fraction):
        return text
    if isinstance(text, float):
        return Fraction(text).limit_denominator(4096)
    try:
        if "/" in str(text):
            num, den = str(text).split("/")
            return Fraction(int(num), int(den))
        return Fraction(str(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse budget {text!r}: {exc}") from exc


def search_eco(model: ModelSpec, x_val: np.ndarray, y_val: np.ndarray, seed: int = 0) -> SearchResult:
    """Per group, the smallest lossless high-bit cut with m = 0.

    The chosen k covers the observed activation range with the sign bound
    intact, which makes every windowed sign decision provably equal to the
    full-width one; a simulated replay cross-checks and widens on the off
    chance the range estimate was too tight.
    """
    if x_val.shape[0] == 0:
        raise ConfigError("validation set must be non-empty")
    n = model.fixed_point.ring_bits
    trace = SearchTrace()
    evaluator = _Evaluator(model, x_val, y_val, seed, trace)
    ranges = collect_activation_ranges(model, x_val)
    windows: list[BitWindow | None] = [
        BitWindow(max(2, min(n, ranges[g])), 0) for g in range(model.n_groups)
    ]

    full = tuple([BitWindow(n, 0)] * model.n_groups)
    _, masks_full = collect_drelu_decisions(model, x_val, SimConfig(model.fixed_point, list(full), seed=seed))
    for _ in range(n):
        trace.nodes_visited += 1
        cand = tuple(windows)
        _, masks = collect_drelu_decisions(model, x_val, SimConfig(model.fixed_point, list(cand), seed=seed))
        trace.evaluations += 1
        wrong = [i for i, (a, b) in enumerate(zip(masks, masks_full)) if not np.array_equal(a, b)]
        if not wrong:
            break
        for i, layer in enumerate([l for l in model.layers if l.kind == "relu"]):
            if i in wrong and windows[layer.group_id].k < n:
                g = layer.group_id
                windows[g] = BitWindow(windows[g].k + 1, 0)

    budget = SearchBudget(Fraction(1), model.relu_group_sizes(), n)
    widths = {g: w.width for g, w in enumerate(windows)}
    accuracy = evaluator.accuracy(tuple(windows))
    baseline = evaluator.accuracy(full)
    return SearchResult(windows, accuracy, baseline, budget.fraction_used(widths), trace)


def early_stop_check(
    optimistic_accuracy: float,
    threshold: float,
    incumbent_accuracy: float | None,
    cumulative_bits: int | Fraction,
    budget_limit: Fraction,
) -> str:
    """Pure pruning predicate; budget first, then threshold, then incumbent."""
    if cumulative_bits > budget_limit:
        return STOP_BUDGET
    if optimistic_accuracy < threshold:
        return STOP_THRESHOLD
    if incumbent_accuracy is not None and optimistic_accuracy < incumbent_accuracy:
        return STOP_INCUMBENT
    return CONTINUE


def local_opt_km(
    evaluator: _Evaluator,
    group: int,
    width: int,
    partial: list[BitWindow | None],
    k_cap: int,
    n_groups: int,
    ring_bits: int,
) -> tuple[BitWindow | None, float]:
    """Best (k, m) for one group at a fixed width, others held constant.

    Groups already searched keep their windows; groups not yet searched
    run at full width, so the returned accuracy is an optimistic bound.
    Ties prefer smaller m, then larger k.
    """
    remaining = [BitWindow(ring_bits, 0)] * (n_groups - group - 1)
    if width == 0:
        cand: tuple[BitWindow | None, ...] = tuple(partial + [None] + remaining)
        return None, evaluator.accuracy(cand)
    if width >= ring_bits:
        window = BitWindow(ring_bits, 0)
        return window, evaluator.accuracy(tuple(partial + [window] + remaining))
    best: tuple[BitWindow, float] | None = None
    for m in range(0, max(0, k_cap - width) + 1):
        k = m + width
        if k > ring_bits:
            break
        window = BitWindow(k, m)
        acc = evaluator.accuracy(tuple(partial + [window] + remaining))
        if best is None or acc > best[1]:
            best = (window, acc)
    assert best is not None
    return best


def search_budget(
    model: ModelSpec,
    x_val: np.ndarray,
    y_val: np.ndarray,
    budget: str | Fraction | float,
    threshold: float | None = None,
    candidate_widths: tuple[int, ...] = DEFAULT_CANDIDATE_WIDTHS,
    seed: int = 0,
) -> SearchResult:
    """Depth-first width assignment under a weighted-bit budget.

    Returns the best-accuracy leaf that satisfies the budget; raises
    InfeasibleSearchError when pruning eliminates every leaf.
    """
    if x_val.shape[0] == 0:
        raise ConfigError("validation set must be non-empty")
    n = model.fixed_point.ring_bits
    n_groups = model.n_groups
    fraction = parse_budget(budget)
    budget_ = SearchBudget(fraction, model.relu_group_sizes(), n)
    trace = SearchTrace()
    evaluator = _Evaluator(model, x_val, y_val, seed, trace)

    # Full width is always a legal assignment; with budget 1 the search
    # must be able to return the unreduced configuration.
    widths_desc = sorted(set(candidate_widths) | {n}, reverse=True)
    if any(w < 0 or w == 1 or w > n for w in widths_desc):
        raise ConfigError(f"candidate widths must be 0 or 2..{n}, got {sorted(candidate_widths)}")
    min_width = min(widths_desc)
    if not budget_.satisfied({g: min_width for g in range(n_groups)}):
        raise InfeasibleSearchError(
            f"budget {fraction} infeasible even at width {min_width} for all groups"
        )

    baseline = evaluator.accuracy(tuple([BitWindow(n, 0)] * n_groups))
    if threshold is None:
        threshold = baseline - 0.05

    if fraction == 1:
        # Nothing to optimize: the budget admits the unreduced assignment.
        full_windows: list[BitWindow | None] = [BitWindow(n, 0)] * n_groups
        return SearchResult(full_windows, baseline, baseline, 1.0, trace)

    ranges = collect_activation_ranges(model, x_val)
    k_caps = {g: min(n, ranges[g] + 1) for g in range(n_groups)}

    best: dict = {"accuracy": None, "windows": None, "widths": None}

    def dfs(group: int, partial: list[BitWindow | None], widths: dict[int, int]) -> None:
        for width in widths_desc:
            trace.nodes_visited += 1
            new_widths = {**widths, group: width}
            used = budget_.used_bits(new_widths)
            verdict = early_stop_check(float("inf"), threshold, best["accuracy"], used, budget_.limit_bits)
            if verdict == STOP_BUDGET:
                trace.stop3 += 1
                continue
            window, opt_acc = local_opt_km(evaluator, group, width, partial, k_caps[group], n_groups, n)
            verdict = early_stop_check(opt_acc, threshold, best["accuracy"], used, budget_.limit_bits)
            if verdict == STOP_THRESHOLD:
                trace.stop1 += 1
                continue
            if verdict == STOP_INCUMBENT:
                trace.stop2 += 1
                continue
            assignment = partial + [window]
            if group + 1 == n_groups:
                if opt_acc > (best["accuracy"] if best["accuracy"] is not None else float("-inf")):
                    best.update(accuracy=opt_acc, windows=tuple(assignment), widths=dict(new_widths))
            else:
                dfs(group + 1, assignment, new_widths)

    dfs(0, [], {})
    if best["windows"] is None:
        raise InfeasibleSearchError(
            f"no assignment met budget {fraction} and threshold {threshold:.4f}"
        )
    return SearchResult(
        list(best["windows"]),
        best["accuracy"],
        baseline,
        budget_.fraction_used(best["widths"]),
        trace,
    )
