"""A small GRU next-item model in numpy with hand-written backpropagation.

The item embedding layer can be initialized from (reduced) provider embeddings
instead of random values, which is the point of the model here.
"""

from __future__ import annotations

import csv
import logging
import os
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _binio
from .dataset import Dataset
from .embeddings import EmbeddingMatrix
from .exceptions import EmbeddingError, TrainingError
from .recommenders import RecommendationList, rank_items
from .reduction import IdentityReducer, Reducer, make_reducer

logger = logging.getLogger(__name__)

GATES = ("z", "r", "n")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_params(n_items: int, embedding_dim: int, hidden_dim: int, rng: np.random.Generator,
                init_scale: float = 0.1, tie_output: bool = False) -> dict[str, np.ndarray]:
    if tie_output and hidden_dim != embedding_dim:
        raise ValueError("a tied output projection needs hidden_dim == embedding_dim")
    bound = 1.0 / np.sqrt(hidden_dim)
    p = {"E": rng.uniform(-init_scale, init_scale, (n_items, embedding_dim))}
    for g in GATES:
        p[f"W{g}"] = rng.uniform(-bound, bound, (hidden_dim, embedding_dim))
        p[f"U{g}"] = rng.uniform(-bound, bound, (hidden_dim, hidden_dim))
        p[f"b{g}"] = np.zeros(hidden_dim)
    if not tie_output:
        p["Wo"] = rng.uniform(-bound, bound, (n_items, hidden_dim))
    p["bo"] = np.zeros(n_items)
    return p


def _step(p, x, h):
    z = _sigmoid(p["Wz"] @ x + p["Uz"] @ h + p["bz"])
    r = _sigmoid(p["Wr"] @ x + p["Ur"] @ h + p["br"])
    n = np.tanh(p["Wn"] @ x + p["Un"] @ (r * h) + p["bn"])
    return (1.0 - z) * n + z * h, (z, r, n)


def _output(p, h):
    W = p["Wo"] if "Wo" in p else p["E"]
    return W @ h + p["bo"]


def hidden_state(p, items: Sequence[int]) -> np.ndarray:
    h = np.zeros(p["Uz"].shape[0])
    for i in items:
        h, _ = _step(p, p["E"][i], h)
    return h


def session_loss_and_grad(p: dict[str, np.ndarray], seq: Sequence[int],
                          grads: dict[str, np.ndarray] | None = None,
                          scale: float = 1.0) -> float:
    """Summed next-item cross-entropy of one session; gradients accumulate into ``grads``.

    Each loss term and its gradient is multiplied by ``scale``.
    """
    H = p["Uz"].shape[0]
    tied = "Wo" not in p
    h = np.zeros(H)
    cache = []
    loss = 0.0
    dhs = []
    for t in range(len(seq) - 1):
        x = p["E"][seq[t]]
        h_prev = h
        h, gates = _step(p, x, h_prev)
        logits = _output(p, h)
        m = logits.max()
        probs = np.exp(logits - m)
        total = probs.sum()
        loss += scale * (np.log(total) + m - logits[seq[t + 1]])
        cache.append((seq[t], x, h_prev, h, gates))
        if grads is not None:
            dlogits = probs / total
            dlogits[seq[t + 1]] -= 1.0
            dlogits *= scale
            if tied:
                grads["E"] += np.outer(dlogits, h)
                dhs.append(p["E"].T @ dlogits)
            else:
                grads["Wo"] += np.outer(dlogits, h)
                dhs.append(p["Wo"].T @ dlogits)
            grads["bo"] += dlogits
    if grads is None:
        return loss
    dh_next = np.zeros(H)
    for t in range(len(cache) - 1, -1, -1):
        item, x, h_prev, _, (z, r, n) = cache[t]
        dh = dhs[t] + dh_next
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        da_n = dn * (1.0 - n * n)
        grads["Wn"] += np.outer(da_n, x)
        grads["Un"] += np.outer(da_n, r * h_prev)
        grads["bn"] += da_n
        drh = p["Un"].T @ da_n
        dr = drh * h_prev
        dh_prev += drh * r
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        for g, da in (("r", da_r), ("z", da_z)):
            grads[f"W{g}"] += np.outer(da, x)
            grads[f"U{g}"] += np.outer(da, h_prev)
            grads[f"b{g}"] += da
            dh_prev += p[f"U{g}"].T @ da
        grads["E"][item] += p["Wz"].T @ da_z + p["Wr"].T @ da_r + p["Wn"].T @ da_n
        dh_next = dh_prev
    return loss


def batch_loss_and_grad(p, sequences: Sequence[Sequence[int]], with_grad: bool = True):
    """Mean per-position loss over a batch and its gradient."""
    positions = sum(len(s) - 1 for s in sequences)
    if positions == 0:
        raise ValueError("batch has no prediction positions")
    grads = {k: np.zeros_like(v) for k, v in p.items()} if with_grad else None
    loss = 0.0
    for seq in sequences:
        loss += session_loss_and_grad(p, seq, grads, 1.0 / positions)
    return loss, grads


def gradient_check(params: dict[str, np.ndarray], sequences: Sequence[Sequence[int]],
                   eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - f| / max(|a|, |f|, floor)``.
    """
    params = {k: v.astype(np.float64).copy() for k, v in params.items()}
    _, analytic = batch_loss_and_grad(params, sequences)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = batch_loss_and_grad(params, sequences, with_grad=False)
            flat[j] = orig - eps
            down, _ = batch_loss_and_grad(params, sequences, with_grad=False)
            flat[j] = orig
            fd = (up - down) / (2 * eps)
            err = abs(ga[j] - fd) / max(abs(ga[j]), abs(fd), floor)
            worst = max(worst, err)
    return worst


class GRURecommender(BaseEstimator):
    """GRU next-item recommender trained with full-softmax cross-entropy.

    Parameters
    ----------
    embeddings : EmbeddingMatrix, optional
        Provider item embeddings. When given, the embedding layer starts from
        ``reduction`` applied to them instead of uniform random values.
    reduction : str
        ``identity``, ``pca``, ``lda`` or ``rp``; the reduced dimension is
        ``embedding_dim``.
    embeddings_trainable : bool
        Freeze the embedding layer when False.
    tie_output : bool
        Score items with the embedding matrix instead of a separate projection.
    """

    def __init__(self, embedding_dim: int = 64, hidden_dim: int = 64, max_session_length: int = 50,
                 learning_rate: float = 0.05, momentum: float = 0.0, epochs: int = 10,
                 batch_size: int = 32, seed: int = 0, init_scale: float = 0.1,
                 embeddings: EmbeddingMatrix | None = None, reduction: str = "identity",
                 embeddings_trainable: bool = True, tie_output: bool = False,
                 clip_norm: float | None = 5.0):
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.max_session_length = max_session_length
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.init_scale = init_scale
        self.embeddings = embeddings
        self.reduction = reduction
        self.embeddings_trainable = embeddings_trainable
        self.tie_output = tie_output
        self.clip_norm = clip_norm

    def init_embedding_layer(self, vocabulary: Sequence[str], rng: np.random.Generator,
                             labels: Sequence | None = None) -> np.ndarray:
        if self.embeddings is None:
            return rng.uniform(-self.init_scale, self.init_scale,
                               (len(vocabulary), self.embedding_dim))
        index = self.embeddings.index()
        missing = [i for i in vocabulary if i not in index]
        if missing:
            raise EmbeddingError(f"no provider embedding for items {missing[:20]}")
        if self.reduction in ("identity", "none"):
            reducer: Reducer = IdentityReducer()
        else:
            reducer = make_reducer(self.reduction, self.embedding_dim, self.seed)
        if self.reduction == "lda":
            reducer.fit(self.embeddings.vectors, labels)
        else:
            reducer.fit(self.embeddings.vectors)
        self.reducer_ = reducer
        E = reducer.transform(self.embeddings.rows(list(vocabulary)))
        if E.shape[1] != self.embedding_dim:
            raise EmbeddingError(
                f"reduced embedding dimension {E.shape[1]} != embedding_dim {self.embedding_dim}")
        return E

    def _encode(self, items: Sequence[str]) -> list[int]:
        return [self.item_index_[i] for i in items if i in self.item_index_]

    def fit(self, train: Dataset, labels: Sequence | None = None):
        rng = np.random.default_rng(self.seed)
        self.item_ids_ = np.array(train.item_ids)
        self.item_index_ = {item: i for i, item in enumerate(self.item_ids_.tolist())}
        counts = train.item_counts()
        self.popularity_ = np.array([counts[i] for i in self.item_ids_.tolist()], dtype=np.float64)
        params = init_params(len(self.item_ids_), self.embedding_dim, self.hidden_dim, rng,
                             self.init_scale, self.tie_output)
        params["E"] = self.init_embedding_layer(self.item_ids_.tolist(), rng, labels)
        sequences = []
        for s in train.sessions:
            if len(s) < 2:
                raise ValueError(f"session {s.session_id} is shorter than two items")
            sequences.append(self._encode(s.items[-self.max_session_length:]))
        self.params_ = params
        self.loss_history_: list[float] = []
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        for epoch in range(self.epochs):
            order = rng.permutation(len(sequences))
            total, positions = 0.0, 0
            for b, start in enumerate(range(0, len(order), self.batch_size)):
                batch = [sequences[i] for i in order[start:start + self.batch_size]]
                n_pos = sum(len(s) - 1 for s in batch)
                loss, grads = batch_loss_and_grad(params, batch)
                gnorm = float(np.sqrt(sum((g * g).sum() for g in grads.values())))
                if not np.isfinite(loss) or not np.isfinite(gnorm):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b} (loss={loss}, grad-norm={gnorm})")
                if self.clip_norm is not None and gnorm > self.clip_norm:
                    for g in grads.values():
                        g *= self.clip_norm / gnorm
                for name, g in grads.items():
                    if name == "E" and not self.embeddings_trainable:
                        continue
                    velocity[name] = self.momentum * velocity[name] - self.learning_rate * g
                    params[name] += velocity[name]
                total += loss * n_pos
                positions += n_pos
            self.loss_history_.append(total / positions)
            logger.debug("epoch %d loss %.5f", epoch, self.loss_history_[-1])
        return self

    def mean_loss(self, train: Dataset) -> float:
        check_is_fitted(self, "params_")
        seqs = [self._encode(s.items[-self.max_session_length:]) for s in train.sessions]
        loss, _ = batch_loss_and_grad(self.params_, seqs, with_grad=False)
        return loss

    def scores(self, prompt: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "params_")
        known = self._encode(prompt)
        if len(known) < len(prompt):
            logger.warning("skipping %d prompt items unknown to the model", len(prompt) - len(known))
        if not known:
            raise ValueError("no prompt item is in the model vocabulary")
        return _output(self.params_, hidden_state(self.params_, known[-self.max_session_length:]))

    def recommend(self, prompt: Sequence[str], k: int = 20) -> RecommendationList:
        return rank_items(self.item_ids_, self.scores(prompt), k, self.popularity_)

    def recommend_many(self, prompts, k: int = 20):
        return [self.recommend(p, k) for p in prompts]

    def save(self, path: str | os.PathLike) -> None:
        check_is_fitted(self, "params_")
        params = {k: v for k, v in self.get_params().items() if k != "embeddings"}
        header = {"params": params, "vocabulary": self.item_ids_.tolist(),
                  "popularity": self.popularity_.tolist(), "loss_history": self.loss_history_}
        _binio.write_arrays(path, header, self.params_)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GRURecommender":
        header, arrays = _binio.read_arrays(path)
        model = cls(**header["params"])
        model.item_ids_ = np.array(header["vocabulary"])
        model.item_index_ = {item: i for i, item in enumerate(header["vocabulary"])}
        model.popularity_ = np.array(header["popularity"])
        model.loss_history_ = header["loss_history"]
        model.params_ = arrays
        return model

    def write_training_log(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            for epoch, loss in enumerate(self.loss_history_):
                writer.writerow([epoch, repr(loss)])
