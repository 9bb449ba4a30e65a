"""Interaction logs, session construction, p-core filtering and temporal splits."""

from __future__ import annotations

import ast
import csv
import gzip
import io
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    session_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.item_id:
            raise DataError("item_id must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemInfo:
    text: str
    keywords: tuple[str, ...] = ()

    def embedding_text(self, with_keywords: bool = False) -> str:
        if with_keywords and self.keywords:
            return f"{self.text} {' '.join(self.keywords)}"
        return self.text


@dataclass(frozen=True)
class Session:
    session_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) != len(self.timestamps):
            raise DataError(f"session {self.session_id}: items/timestamps length mismatch")

    @property
    def start_ts(self) -> int:
        return min(self.timestamps)

    @property
    def end_ts(self) -> int:
        return max(self.timestamps)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_items(cls, session_id: str, items: Sequence[str], start_ts: int = 0) -> "Session":
        """Convenience constructor assigning consecutive timestamps."""
        return cls(session_id, tuple(items), tuple(range(start_ts, start_ts + len(items))))


@dataclass(frozen=True)
class DatasetStats:
    sessions: int
    items: int
    interactions: int
    avg_length: float
    density: float

    def as_dict(self) -> dict:
        return {
            "sessions": self.sessions,
            "items": self.items,
            "interactions": self.interactions,
            "avg_length": self.avg_length,
            "density": self.density,
        }


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of sessions plus the catalog of the items they use.

    The catalog is restricted to items that occur in ``sessions``.
    """

    sessions: tuple[Session, ...]
    catalog: dict[str, ItemInfo] = field(default_factory=dict)

    def __post_init__(self):
        missing = sorted({i for s in self.sessions for i in s.items} - self.catalog.keys())
        if missing:
            raise DataError(f"items missing from catalog: {missing[:20]}"
                            + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))

    @property
    def item_ids(self) -> list[str]:
        return sorted({i for s in self.sessions for i in s.items})

    @property
    def stats(self) -> DatasetStats:
        n_sessions = len(self.sessions)
        n_items = len({i for s in self.sessions for i in s.items})
        n_inter = sum(len(s) for s in self.sessions)
        avg = n_inter / n_sessions if n_sessions else 0.0
        density = n_inter / (n_sessions * n_items) if n_sessions and n_items else 0.0
        return DatasetStats(n_sessions, n_items, n_inter, avg, density)

    def item_counts(self) -> Counter:
        """Interaction counts per item."""
        return Counter(i for s in self.sessions for i in s.items)

    def session_counts(self) -> Counter:
        """Number of sessions each item occurs in."""
        return Counter(i for s in self.sessions for i in set(s.items))

    def subset(self, sessions: Iterable[Session]) -> "Dataset":
        sessions = tuple(sessions)
        used = {i for s in sessions for i in s.items}
        return Dataset(sessions, {k: v for k, v in self.catalog.items() if k in used})

    def __len__(self) -> int:
        return len(self.sessions)


@dataclass(frozen=True)
class Fold:
    train: Dataset
    test: tuple[tuple[Session, str], ...]


@dataclass(frozen=True)
class SplitSpec:
    train: Dataset
    test: tuple[tuple[Session, str], ...]
    catalog: dict[str, ItemInfo]
    folds: tuple[Fold, ...] = ()


# ---------------------------------------------------------------------------
# ingest


def _open_text(path: Path):
    if str(path).endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8", newline="")


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    name = path.name.removesuffix(".gz")
    if name.endswith((".jsonl", ".json")):
        return "jsonl"
    return "csv"


def read_interactions(path: str | os.PathLike, fmt: str | None = None) -> list[Interaction]:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt not in ("csv", "jsonl"):
        raise DataError(f"unsupported interaction format {fmt!r}")
    rows: list[Interaction] = []
    with _open_text(path) as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError("no interactions")
            header = [h.strip() for h in header]
            try:
                idx = [header.index(c) for c in ("session_id", "item_id", "timestamp")]
            except ValueError:
                raise DataError(f"line 1: header must contain session_id,item_id,timestamp, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append(Interaction(row[idx[0]], row[idx[1]], int(row[idx[2]])))
                except (IndexError, ValueError) as exc:
                    raise DataError(f"line {lineno}: malformed row {row!r} ({exc})") from None
        else:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rows.append(Interaction(str(rec["session_id"]), str(rec["item_id"]),
                                            int(rec["timestamp"])))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"line {lineno}: malformed row ({exc})") from None
    if not rows:
        raise DataError("no interactions")
    return rows


def read_catalog(path: str | os.PathLike) -> dict[str, ItemInfo]:
    catalog: dict[str, ItemInfo] = {}
    with _open_text(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                catalog[str(rec["item_id"])] = ItemInfo(
                    str(rec["item_text"]), tuple(str(k) for k in rec.get("keywords") or ()))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"catalog line {lineno}: malformed record ({exc})") from None
    return catalog


def sessions_from_interactions(rows: Sequence[Interaction]) -> list[Session]:
    """Group rows by session id; order by timestamp, ties kept in input order."""
    grouped: dict[str, list[tuple[int, int, str]]] = {}
    for pos, r in enumerate(rows):
        grouped.setdefault(r.session_id, []).append((r.timestamp, pos, r.item_id))
    sessions = []
    for sid, events in grouped.items():
        events.sort()
        sessions.append(Session(sid, tuple(e[2] for e in events), tuple(e[0] for e in events)))
    sessions.sort(key=lambda s: (s.start_ts, s.session_id))
    return sessions


def build_dataset(rows: Sequence[Interaction], catalog: dict[str, ItemInfo] | None = None) -> Dataset:
    if not rows:
        raise DataError("no interactions")
    if catalog is None:
        catalog = {r.item_id: ItemInfo(r.item_id) for r in rows}
    else:
        missing = sorted({r.item_id for r in rows} - catalog.keys())
        if missing:
            raise DataError(f"items missing from catalog: {missing[:20]}"
                            + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))
    sessions = [s for s in sessions_from_interactions(rows) if len(s) >= 2]
    if not sessions:
        raise DataError("no sessions with at least two interactions")
    used = {i for s in sessions for i in s.items}
    return Dataset(tuple(sessions), {k: catalog[k] for k in sorted(used)})


def ingest(path: str | os.PathLike, fmt: str | None = None,
           catalog_path: str | os.PathLike | None = None) -> Dataset:
    """Read an interaction log (csv or jsonl) and optional catalog into a Dataset.

    Sessions with a single interaction are dropped.
    """
    rows = read_interactions(path, fmt)
    catalog = read_catalog(catalog_path) if catalog_path is not None else None
    return build_dataset(rows, catalog)


def load_amazon(ratings_path: str | os.PathLike, meta_path: str | os.PathLike | None = None) -> Dataset:
    """Load an Amazon per-category dump as a Dataset, one session per reviewer.

    Accepts either the ratings-only csv (``user,item,rating,timestamp`` without
    header) or the review json lines (``reviewerID``, ``asin``, ``unixReviewTime``).
    ``meta_path`` points to the matching metadata file (python-literal or json lines
    with ``asin``, ``title`` and ``categories``).
    """
    ratings_path = Path(ratings_path)
    rows: list[Interaction] = []
    with _open_text(ratings_path) as fh:
        if ".json" in ratings_path.name:
            for line in fh:
                rec = _parse_loose_json(line)
                rows.append(Interaction(rec["reviewerID"], rec["asin"], int(rec["unixReviewTime"])))
        else:
            for row in csv.reader(fh):
                if row:
                    rows.append(Interaction(row[0], row[1], int(float(row[3]))))
    catalog = {r.item_id: ItemInfo(r.item_id) for r in rows}
    if meta_path is not None:
        with _open_text(Path(meta_path)) as fh:
            for line in fh:
                rec = _parse_loose_json(line)
                asin = rec.get("asin")
                if asin not in catalog:
                    continue
                keywords = sorted({c for path in rec.get("categories") or () for c in path})
                catalog[asin] = ItemInfo(rec.get("title") or asin, tuple(keywords))
    return build_dataset(rows, catalog)


def _parse_loose_json(line: str) -> dict:
    try:
        return json.loads(line)
    except ValueError:
        return ast.literal_eval(line)


# ---------------------------------------------------------------------------
# filtering and splitting


def p_core_filter(dataset: Dataset, p: int) -> Dataset:
    """Iteratively drop items and sessions with fewer than ``p`` interactions.

    Sessions stand in for users. Returns the fixpoint.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    sessions = list(dataset.sessions)
    while True:
        counts = Counter(i for s in sessions for i in s.items)
        rare = {i for i, c in counts.items() if c < p}
        changed = False
        if rare:
            changed = True
            pruned = []
            for s in sessions:
                keep = [j for j, i in enumerate(s.items) if i not in rare]
                if len(keep) != len(s):
                    s = Session(s.session_id, tuple(s.items[j] for j in keep),
                                tuple(s.timestamps[j] for j in keep))
                pruned.append(s)
            sessions = pruned
        kept = [s for s in sessions if len(s) >= max(p, 1)]
        if len(kept) != len(sessions):
            changed = True
            sessions = kept
        if not changed:
            break
    if not sessions:
        raise DataError("p-core eliminated all data")
    return dataset.subset(sessions)


def leave_one_out(session: Session) -> tuple[Session, str]:
    if len(session) < 2:
        raise DataError(f"session {session.session_id} has fewer than two items")
    prompt = Session(session.session_id, session.items[:-1], session.timestamps[:-1])
    return prompt, session.items[-1]


def _chronological(sessions: Iterable[Session]) -> list[Session]:
    return sorted(sessions, key=lambda s: (s.start_ts, s.session_id))


def temporal_split(dataset: Dataset, test_fraction: float = 0.2, with_folds: bool = True) -> SplitSpec:
    """Hold out the most recent sessions (by first timestamp) as leave-one-out test cases."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ordered = _chronological(dataset.sessions)
    n_test = math.ceil(test_fraction * len(ordered))
    train_sessions, test_sessions = ordered[:len(ordered) - n_test], ordered[len(ordered) - n_test:]
    if not train_sessions or not test_sessions:
        raise DataError("temporal split produced an empty train or test set")
    train = dataset.subset(train_sessions)
    folds = make_validation_folds(train) if with_folds and len(train_sessions) >= 4 else ()
    return SplitSpec(train, tuple(leave_one_out(s) for s in test_sessions),
                     dict(dataset.catalog), folds)


def make_validation_folds(train: Dataset, n_bins: int = 4) -> tuple[Fold, ...]:
    """Chronological bins; fold j trains on bins[:j] and tests on bin j."""
    ordered = _chronological(train.sessions)
    if len(ordered) < n_bins:
        raise DataError(f"need at least {n_bins} training sessions for validation folds")
    bins = [list(b) for b in np.array_split(np.arange(len(ordered)), n_bins)]
    if any(len(b) == 0 for b in bins):
        raise DataError("empty validation bin")
    folds = []
    for j in range(1, n_bins):
        fold_train = [ordered[i] for b in bins[:j] for i in b]
        fold_test = tuple(leave_one_out(ordered[i]) for i in bins[j])
        folds.append(Fold(train.subset(fold_train), fold_test))
    return tuple(folds)


def build_lda_classes(catalog: dict[str, ItemInfo]) -> dict[str, str]:
    """Class label per item: its sorted keywords joined by ``_``.

    Items without keywords are left out of the mapping.
    """
    labels = {item: "_".join(sorted(info.keywords)) for item, info in catalog.items() if info.keywords}
    if not labels:
        raise DataError("LDA classes unavailable: no item has keywords")
    unlabeled = len(catalog) - len(labels)
    if unlabeled:
        logger.warning("%d items have no keywords and get no LDA class", unlabeled)
    return labels


# ---------------------------------------------------------------------------
# serialization


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "sessions.jsonl", "w", encoding="utf-8") as fh:
        for s in dataset.sessions:
            fh.write(_dumps({"session_id": s.session_id, "items": list(s.items),
                             "timestamps": list(s.timestamps)}) + "\n")
    with open(directory / "catalog.jsonl", "w", encoding="utf-8") as fh:
        for item_id in sorted(dataset.catalog):
            info = dataset.catalog[item_id]
            fh.write(_dumps({"item_id": item_id, "item_text": info.text,
                             "keywords": list(info.keywords)}) + "\n")
    (directory / "stats.json").write_text(_dumps(dataset.stats.as_dict()) + "\n", encoding="utf-8")
    return directory


def _iter_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = Path(directory)
    if not (directory / "sessions.jsonl").exists():
        raise DataError(f"{directory} is not a serialized dataset")
    sessions = tuple(Session(r["session_id"], tuple(r["items"]), tuple(r["timestamps"]))
                     for r in _iter_jsonl(directory / "sessions.jsonl"))
    catalog = {r["item_id"]: ItemInfo(r["item_text"], tuple(r["keywords"]))
               for r in _iter_jsonl(directory / "catalog.jsonl")}
    return Dataset(sessions, catalog)


def save_split(split: SplitSpec, directory: str | os.PathLike) -> Path:
    """Write train sessions, the full catalog and the leave-one-out test cases."""
    directory = Path(directory)
    save_dataset(split.train, directory / "train")
    with open(directory / "catalog.jsonl", "w", encoding="utf-8") as fh:
        for item_id in sorted(split.catalog):
            info = split.catalog[item_id]
            fh.write(_dumps({"item_id": item_id, "item_text": info.text,
                             "keywords": list(info.keywords)}) + "\n")
    with open(directory / "test.jsonl", "w", encoding="utf-8") as fh:
        for prompt, truth in split.test:
            fh.write(_dumps({"session_id": prompt.session_id, "prompt": list(prompt.items),
                             "timestamps": list(prompt.timestamps), "ground_truth": truth}) + "\n")
    return directory


def load_split(directory: str | os.PathLike) -> SplitSpec:
    directory = Path(directory)
    train = load_dataset(directory / "train")
    catalog = {r["item_id"]: ItemInfo(r["item_text"], tuple(r["keywords"]))
               for r in _iter_jsonl(directory / "catalog.jsonl")}
    test = tuple((Session(r["session_id"], tuple(r["prompt"]), tuple(r["timestamps"])),
                  r["ground_truth"]) for r in _iter_jsonl(directory / "test.jsonl"))
    folds = make_validation_folds(train) if len(train.sessions) >= 4 else ()
    return SplitSpec(train, test, catalog, folds)
