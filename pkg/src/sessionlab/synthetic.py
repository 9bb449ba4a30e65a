"""Seeded synthetic session corpora with topical structure, for offline end-to-end runs."""

from __future__ import annotations

import numpy as np

from .dataset import Dataset, ItemInfo, Session


def make_corpus(n_sessions: int = 1000, n_items: int = 200, n_topics: int = 20,
                min_length: int = 3, max_length: int = 8, noise: float = 0.1,
                zipf: float = 1.0, seed: int = 0) -> Dataset:
    """Sessions that each stay mostly within one topic.

    Items are split evenly across topics. Within a topic, items are drawn with
    Zipf-like weights, so some items are much more popular than others; with
    probability ``noise`` an event picks a uniformly random item instead.
    """
    rng = np.random.default_rng(seed)
    width = len(str(n_items - 1))
    item_ids = [f"i{j:0{width}d}" for j in range(n_items)]
    topic_of = np.arange(n_items) % n_topics
    members = [np.flatnonzero(topic_of == t) for t in range(n_topics)]
    weights = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** zipf
        weights.append(w / w.sum())
    topic_weights = rng.dirichlet(np.full(n_topics, 2.0))
    sessions = []
    for s in range(n_sessions):
        topic = rng.choice(n_topics, p=topic_weights)
        length = int(rng.integers(min_length, max_length + 1))
        items = []
        for _ in range(length):
            if rng.random() < noise:
                items.append(item_ids[int(rng.integers(n_items))])
            else:
                items.append(item_ids[int(rng.choice(members[topic], p=weights[topic]))])
        start = s * 1000
        sessions.append(Session(f"s{s:06d}", tuple(items), tuple(start + 10 * t for t in range(length))))
    catalog = {item_ids[j]: ItemInfo(f"product {j} of line {topic_of[j]}",
                                     (f"line{topic_of[j]}", "synthetic"))
               for j in range(n_items)}
    used = {i for s in sessions for i in s.items}
    return Dataset(tuple(sessions), {k: v for k, v in catalog.items() if k in used})
