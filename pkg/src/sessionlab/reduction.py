"""Dimensionality reduction of item embeddings: PCA, LDA, random projection.

Every reducer is a scikit-learn transformer, so it composes with ``Pipeline``
and ``clone``. Fitted state lives in ``projection_`` (``output_dim x input_dim``)
and ``mean_``.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _binio


def _sign_fix(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


class Reducer(TransformerMixin, BaseEstimator):
    method = "base"

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.input_dim_:
            raise ValueError(f"expected {self.input_dim_} columns, got {X.shape[1]}")
        if self.mean_ is not None:
            X = X - self.mean_
        return X @ self.projection_.T

    @property
    def output_dim_(self) -> int:
        return self.projection_.shape[0]

    def save(self, path: str | os.PathLike) -> None:
        check_is_fitted(self, "projection_")
        arrays = {"projection": self.projection_}
        if self.mean_ is not None:
            arrays["mean"] = self.mean_
        if getattr(self, "explained_variance_", None) is not None:
            arrays["explained_variance"] = self.explained_variance_
            arrays["explained_variance_ratio"] = self.explained_variance_ratio_
        _binio.write_arrays(path, {"method": self.method, "input_dim": self.input_dim_,
                                   "output_dim": self.output_dim_, "params": self.get_params()},
                            arrays)


def load_reducer(path: str | os.PathLike) -> Reducer:
    header, arrays = _binio.read_arrays(path)
    cls = {c.method: c for c in (PCAReducer, LDAReducer, RandomProjectionReducer, IdentityReducer)}
    model = cls[header["method"]](**header["params"])
    model.projection_ = arrays["projection"]
    model.mean_ = arrays.get("mean")
    model.input_dim_ = header["input_dim"]
    if "explained_variance" in arrays:
        model.explained_variance_ = arrays["explained_variance"]
        model.explained_variance_ratio_ = arrays["explained_variance_ratio"]
    return model


class PCAReducer(Reducer):
    """Principal components via SVD of the centered data."""

    method = "pca"

    def __init__(self, n_components: int = 128):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        k = self.n_components
        if n < 2:
            raise ValueError("PCA needs at least two rows")
        if not 1 <= k <= min(n - 1, d):
            raise ValueError(f"n_components={k} out of range [1, {min(n - 1, d)}]")
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        variance = s ** 2 / (n - 1)
        total = variance.sum()
        self.projection_ = _sign_fix(vt[:k])
        self.explained_variance_ = variance[:k]
        self.explained_variance_ratio_ = (variance[:k] / total if total > 0
                                          else np.zeros(k))
        self.input_dim_ = d
        return self

    def inverse_transform(self, Z):
        check_is_fitted(self, "projection_")
        return np.asarray(Z, dtype=np.float64) @ self.projection_ + self.mean_


class LDAReducer(Reducer):
    """Fisher discriminant directions from the generalized eigenproblem S_b v = w S_w v.

    The within-class scatter gets a ridge of ``ridge * trace(S_w) / d``.
    """

    method = "lda"

    def __init__(self, n_components: int = 128, ridge: float = 1e-6):
        self.n_components = n_components
        self.ridge = ridge

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        classes, counts = np.unique(y, return_counts=True)
        if len(classes) < 2:
            raise ValueError("LDA needs at least two classes")
        if np.any(counts < 2):
            bad = classes[counts < 2]
            raise ValueError(f"classes with fewer than two samples: {list(bad[:10])}")
        k = self.n_components
        if not 1 <= k <= min(len(classes) - 1, X.shape[1]):
            raise ValueError(f"n_components={k} must be in [1, {min(len(classes) - 1, X.shape[1])}]")
        d = X.shape[1]
        mean = X.mean(axis=0)
        sw = np.zeros((d, d))
        sb = np.zeros((d, d))
        for c in classes:
            Xc = X[y == c]
            mc = Xc.mean(axis=0)
            centered = Xc - mc
            sw += centered.T @ centered
            diff = (mc - mean)[:, None]
            sb += len(Xc) * (diff @ diff.T)
        trace = np.trace(sw)
        if not trace > 0:
            raise ValueError("within-class scatter is singular")
        sw += self.ridge * trace / d * np.eye(d)
        try:
            w, v = scipy.linalg.eigh(sb, sw)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"within-class scatter is singular even after ridge: {exc}") from exc
        order = np.argsort(w)[::-1][:k]
        vecs = v[:, order].T
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        self.projection_ = _sign_fix(vecs)
        self.eigenvalues_ = w[order]
        self.mean_ = mean
        self.input_dim_ = d
        return self


class RandomProjectionReducer(Reducer):
    """Gaussian random projection with entries N(0, 1/k)."""

    method = "random_projection"

    def __init__(self, n_components: int = 128, seed: int = 0):
        self.n_components = n_components
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        return self.fit_dim(X.shape[1])

    def fit_dim(self, input_dim: int):
        k = self.n_components
        if not 1 <= k <= input_dim:
            raise ValueError(f"n_components={k} must be in [1, {input_dim}]")
        rng = np.random.default_rng(self.seed)
        self.projection_ = rng.standard_normal((k, input_dim)) / np.sqrt(k)
        self.mean_ = None
        self.input_dim_ = input_dim
        return self


class IdentityReducer(Reducer):
    method = "identity"

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.projection_ = np.eye(X.shape[1])
        self.mean_ = None
        self.input_dim_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.input_dim_:
            raise ValueError(f"expected {self.input_dim_} columns, got {X.shape[1]}")
        return X.copy()


def fit_pca(X, k: int) -> PCAReducer:
    return PCAReducer(k).fit(X)


def fit_lda(X, labels, k: int, ridge: float = 1e-6) -> LDAReducer:
    return LDAReducer(k, ridge).fit(X, labels)


def fit_random_projection(input_dim: int, k: int, seed: int = 0) -> RandomProjectionReducer:
    return RandomProjectionReducer(k, seed).fit_dim(input_dim)


def make_reducer(method: str, k: int | None = None, seed: int = 0) -> Reducer:
    if method in ("identity", "none") or k is None:
        return IdentityReducer()
    if method == "pca":
        return PCAReducer(k)
    if method == "lda":
        return LDAReducer(k)
    if method in ("rp", "random_projection"):
        return RandomProjectionReducer(k, seed)
    raise ValueError(f"unknown reduction method {method!r}")
