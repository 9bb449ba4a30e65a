"""Leave-one-out ranking and beyond-accuracy metrics, reports and leaderboards."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import Dataset, Session, SplitSpec

logger = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (10, 20)


def _rank(recommendations: Sequence[str], truth: str, k: int) -> int | None:
    for r, item in enumerate(recommendations[:k], start=1):
        if item == truth:
            return r
    return None


def hr_at_k(recommendations: Sequence[str], truth: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if _rank(recommendations, truth, k) else 0.0


def mrr_at_k(recommendations: Sequence[str], truth: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(recommendations, truth, k)
    return 1.0 / r if r else 0.0


def ndcg_at_k(recommendations: Sequence[str], truth: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(recommendations, truth, k)
    return 1.0 / math.log2(r + 1) if r else 0.0


def catalog_coverage(lists: Iterable[Sequence[str]], catalog: Iterable[str], k: int) -> float:
    catalog = set(catalog)
    if not catalog:
        return 0.0
    seen = {item for lst in lists for item in lst[:k]}
    return len(seen & catalog) / len(catalog)


def popular_top_k(train: Dataset, k: int) -> list[str]:
    counts = train.item_counts()
    return sorted(counts, key=lambda i: (-counts[i], i))[:k]


def serendipity(lists: Sequence[Sequence[str]], popular: Sequence[str],
                truths: Sequence[str], k: int) -> float:
    """Share of sessions hit by an item the popularity list does not contain."""
    if not truths:
        return 0.0
    popular = set(popular[:k])
    hits = sum(1 for lst, t in zip(lists, truths) if t in lst[:k] and t not in popular)
    return hits / len(truths)


def novelty(lists: Sequence[Sequence[str]], session_counts: Mapping[str, int],
            n_train_sessions: int, k: int) -> float:
    """Mean self-information ``-log2(sessions containing i / training sessions)``.

    Items never seen in training count as appearing in one session.
    """
    slots = [item for lst in lists for item in lst[:k]]
    if not slots:
        return 0.0
    return sum(-math.log2(max(session_counts.get(i, 0), 1) / n_train_sessions)
               for i in slots) / len(slots)


@dataclass
class MetricsReport:
    metrics: dict[int, dict[str, float]]
    n_test: int
    n_excluded: int = 0
    model: str = ""
    config_hash: str = ""
    runtime_seconds: float = 0.0
    metadata: dict = field(default_factory=lambda: {"ndcg_log_base": 2, "novelty_log_base": 2,
                                                    "novelty_unseen_count": 1})
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {str(k): v for k, v in self.metrics.items()}
        return d

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=1)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["metrics"] = {int(k): v for k, v in d["metrics"].items()}
        return cls(**d)


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def compute_metrics(lists: Sequence[Sequence[str]], truths: Sequence[str], train: Dataset,
                    catalog: Iterable[str], ks: Sequence[int] = DEFAULT_CUTOFFS) -> dict[int, dict[str, float]]:
    catalog = list(catalog)
    session_counts = train.session_counts()
    n_train = len(train.sessions)
    out = {}
    n = len(truths)
    for k in ks:
        out[k] = {
            "ndcg": sum(ndcg_at_k(l, t, k) for l, t in zip(lists, truths)) / n,
            "hr": sum(hr_at_k(l, t, k) for l, t in zip(lists, truths)) / n,
            "mrr": sum(mrr_at_k(l, t, k) for l, t in zip(lists, truths)) / n,
            "catalog_coverage": catalog_coverage(lists, catalog, k),
            "serendipity": serendipity(lists, popular_top_k(train, k), truths, k),
            "novelty": novelty(lists, session_counts, n_train, k),
        }
    return out


def evaluate(model, split: SplitSpec | tuple, ks: Sequence[int] = DEFAULT_CUTOFFS,
             name: str | None = None, config=None) -> MetricsReport:
    """Recommend once per test prompt at the largest cutoff and score every metric.

    ``split`` is a :class:`SplitSpec` or a ``(train, test, catalog)`` triple
    (validation folds pass their own train set).
    """
    if isinstance(split, SplitSpec):
        train, test, catalog = split.train, split.test, split.catalog
    else:
        train, test, catalog = split
    if not test:
        raise ValueError("empty test set")
    start = time.perf_counter()
    kmax = max(ks)
    lists, truths, errors = [], [], []
    for prompt, truth in test:
        items = prompt.items if isinstance(prompt, Session) else tuple(prompt)
        try:
            lists.append(list(model.recommend(items, kmax).items))
            truths.append(truth)
        except Exception as exc:  # recorded, the session is excluded
            errors.append(f"{getattr(prompt, 'session_id', '?')}: {type(exc).__name__}: {exc}")
    if errors:
        logger.warning("%d test sessions excluded after model errors", len(errors))
    if not truths:
        raise RuntimeError(f"model failed on every test session: {errors[:5]}")
    metrics = compute_metrics(lists, truths, train, catalog, ks)
    return MetricsReport(metrics, n_test=len(truths), n_excluded=len(errors),
                         model=name or type(model).__name__,
                         config_hash=config_hash(config if config is not None else repr(model)),
                         runtime_seconds=time.perf_counter() - start, errors=errors[:50])


def leaderboard(reports: Sequence[MetricsReport], sort_k: int = 20) -> list[dict]:
    """Flatten reports into rows sorted by NDCG at ``sort_k`` descending."""
    rows = []
    for rep in reports:
        row = {"model": rep.model}
        for k, values in sorted(rep.metrics.items()):
            for metric, v in values.items():
                row[f"{metric}@{k}"] = v
        rows.append(row)
    rows.sort(key=lambda r: (-r.get(f"ndcg@{sort_k}", 0.0), r["model"]))
    return rows


def write_leaderboard_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no leaderboard rows")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def leaderboard_markdown(rows: Sequence[dict], digits: int = 4) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [f"{r[c]:.{digits}f}" if isinstance(r[c], float) else str(r[c]) for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"

