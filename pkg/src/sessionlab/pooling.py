"""Session embeddings pooled from item embeddings.

Weights are indexed from the most recent item: ``i = 1`` is the last item of the
session and always gets the highest weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DECREMENT_TECHNIQUES = ("constant_linear", "scaling_linear", "scaling_quadratic", "scaling_cubic")
DIRECT_TECHNIQUES = ("log", "harmonic", "squared_harmonic")
TECHNIQUES = DECREMENT_TECHNIQUES + DIRECT_TECHNIQUES


@dataclass(frozen=True)
class PoolingStrategy:
    kind: str = "mean"
    technique: str | None = None
    log_base: float = math.e
    recency_first: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in ("mean", "last_item", "weighted"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if (self.kind == "weighted") != (self.technique is not None):
            raise ValueError("technique is required for, and only for, weighted pooling")
        if self.technique is not None and self.technique not in TECHNIQUES:
            raise ValueError(f"unknown decay technique {self.technique!r}")

    @classmethod
    def parse(cls, name: str) -> "PoolingStrategy":
        """Parse ``mean``, ``last_item`` or ``weighted:<technique>``.

        Weighted names take optional comma flags: ``oldest_first`` counts the
        decay from the first item, ``raw`` skips normalization.
        """
        if name.startswith("weighted:"):
            technique, *flags = name.split(":", 1)[1].split(",")
            unknown = set(flags) - {"oldest_first", "raw"}
            if unknown:
                raise ValueError(f"unknown pooling flags {sorted(unknown)}")
            return cls("weighted", technique, recency_first="oldest_first" not in flags,
                       normalize="raw" not in flags)
        if name == "last":
            name = "last_item"
        return cls(name)

    def __str__(self) -> str:
        if self.kind != "weighted":
            return self.kind
        flags = ([] if self.recency_first else ["oldest_first"]) + ([] if self.normalize else ["raw"])
        return ",".join([f"weighted:{self.technique}"] + flags)


def strategy_names() -> list[str]:
    return ["mean", "last_item"] + [f"weighted:{t}" for t in TECHNIQUES]


def decay_weights(technique: str, session_length: int, log_base: float = math.e,
                  normalize: bool = True, recency_first: bool = True) -> np.ndarray:
    """Per-item weights in oldest-to-newest order.

    With ``recency_first=False`` the index runs from the oldest item instead.

    >>> decay_weights("harmonic", 3).round(4).tolist()
    [0.1818, 0.2727, 0.5455]
    """
    n = session_length
    if n < 1:
        raise ValueError("session_length must be >= 1")
    i = np.arange(1, n + 1, dtype=np.float64)  # recency index, newest first
    if technique in DECREMENT_TECHNIQUES:
        step = {"constant_linear": 1 / 10, "scaling_linear": 1 / n,
                "scaling_quadratic": 1 / n ** 2, "scaling_cubic": 1 / n ** 3}[technique]
        w = np.maximum(0.0, 1.0 - (i - 1) * step)
    elif technique == "log":
        w = 1.0 / (np.log(i + 1) / np.log(log_base))
    elif technique == "harmonic":
        w = 1.0 / i
    elif technique == "squared_harmonic":
        w = 1.0 / i ** 2
    else:
        raise ValueError(f"unknown decay technique {technique!r}")
    if recency_first:
        w = w[::-1].copy()
    if normalize:
        total = w.sum()
        if total <= 0:
            raise ValueError("all decay weights are zero")
        w /= total
    return w


def pool_session(item_embeddings, strategy: PoolingStrategy | str) -> np.ndarray:
    """Collapse an (oldest-to-newest) stack of item vectors into one session vector."""
    if isinstance(strategy, str):
        strategy = PoolingStrategy.parse(strategy)
    E = np.asarray(item_embeddings, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError("item embeddings must be a 2-d array of uniform dimension")
    if len(E) == 0:
        raise ValueError("cannot pool an empty session")
    if strategy.kind == "mean":
        return E.mean(axis=0)
    if strategy.kind == "last_item":
        return E[-1].copy()
    return decay_weights(strategy.technique, len(E), strategy.log_base, strategy.normalize,
                         strategy.recency_first) @ E
