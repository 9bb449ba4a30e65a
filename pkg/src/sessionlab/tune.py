"""Random hyperparameter search over temporal validation folds with quantile pruning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Categorical:
    values: tuple

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]


@dataclass(frozen=True)
class IntRange:
    low: int
    high: int
    log: bool = False

    def sample(self, rng: np.random.Generator) -> int:
        if self.log:
            return int(round(math.exp(rng.uniform(math.log(self.low), math.log(self.high)))))
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class FloatRange:
    low: float
    high: float
    log: bool = False

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        return float(rng.uniform(self.low, self.high))


Domain = Categorical | IntRange | FloatRange


def parse_space(spec: Mapping[str, Any]) -> dict[str, Domain]:
    """Build a space from plain JSON.

    A list means categorical; a dict needs ``type`` (``int``/``float``), ``low``,
    ``high`` and optionally ``log``.
    """
    space: dict[str, Domain] = {}
    for name, d in spec.items():
        if isinstance(d, (list, tuple)):
            space[name] = Categorical(tuple(d))
        elif isinstance(d, dict) and d.get("type") == "int":
            space[name] = IntRange(int(d["low"]), int(d["high"]), bool(d.get("log", False)))
        elif isinstance(d, dict) and d.get("type") == "float":
            space[name] = FloatRange(float(d["low"]), float(d["high"]), bool(d.get("log", False)))
        else:
            raise ValueError(f"cannot parse domain for {name!r}: {d!r}")
    return space


def sample_config(space: Mapping[str, Domain], rng: np.random.Generator) -> dict:
    return {name: dom.sample(rng) for name, dom in sorted(space.items())}


@dataclass
class Trial:
    number: int
    config: dict
    fold_scores: list[float] = field(default_factory=list)
    status: str = "running"
    objective: float | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)


@dataclass
class SearchResult:
    best: Trial
    trials: list[Trial]
    stopped_early: bool = False

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for t in self.trials:
                fh.write(t.to_json() + "\n")


def search(space: Mapping[str, Domain], folds: Sequence, objective: Callable[[dict, Any], float],
           budget: int, seed: int = 0, patience: int = 100, prune_fraction: float = 0.2,
           min_trials_before_pruning: int = 10, time_budget: float | None = None) -> SearchResult:
    """Sample ``budget`` configurations and keep the best total objective over ``folds``.

    After every fold the running sum of a trial is compared with the running sums of
    earlier trials at the same fold; once ``min_trials_before_pruning`` trials have
    been tried, a trial in the bottom ``prune_fraction`` is pruned. The search also
    stops after ``patience`` trials without improvement or when ``time_budget``
    seconds have passed.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not folds:
        raise ValueError("at least one fold is required")
    rng = np.random.default_rng(seed)
    partials: list[list[float]] = [[] for _ in folds]
    trials: list[Trial] = []
    best: Trial | None = None
    since_best = 0
    start = time.monotonic()
    stopped_early = False
    for number in range(budget):
        trial = Trial(number, sample_config(space, rng))
        trials.append(trial)
        running = 0.0
        try:
            for j, fold in enumerate(folds):
                score = float(objective(trial.config, fold))
                trial.fold_scores.append(score)
                running += score
                previous = partials[j]
                prune = (number >= min_trials_before_pruning and previous
                         and running < np.quantile(previous, prune_fraction))
                previous.append(running)
                if prune:
                    trial.status = "pruned"
                    break
            else:
                trial.status = "complete"
                trial.objective = running
        except Exception as exc:
            trial.status = "failed"
            trial.error = f"{type(exc).__name__}: {exc}"
            logger.warning("trial %d failed: %s", number, trial.error)
        if trial.status == "complete" and (best is None or trial.objective > best.objective):
            best = trial
            since_best = 0
        else:
            since_best += 1
        logger.info("trial %d %s %s", number, trial.status, trial.objective)
        if since_best >= patience:
            stopped_early = True
            break
        if time_budget is not None and time.monotonic() - start > time_budget:
            stopped_early = True
            break
    if best is None:
        digest = _failure_digest(trials)
        raise RuntimeError(f"no trial completed: {digest}")
    return SearchResult(best, trials, stopped_early)


def _failure_digest(trials: Sequence[Trial]) -> dict:
    errors: dict[str, int] = {}
    for t in trials:
        key = t.error or t.status
        errors[key] = errors.get(key, 0) + 1
    return errors
