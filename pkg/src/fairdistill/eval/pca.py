"""Two-dimensional PCA projections of latent codes."""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..exceptions import RankDeficient


class PCA(BaseEstimator, TransformerMixin):
    """Eigen-decomposition of the sample covariance.

    Each axis is signed so its largest-magnitude loading is positive.
    Missing axes (rank < n_components) project to zero with a warning.
    """

    def __init__(self, n_components=2, tol=1e-12):
        self.n_components = n_components
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, k = X.shape
        if n < self.n_components or k < self.n_components:
            raise ValueError(f"need at least {self.n_components} rows and columns")
        self.mean_ = X.mean(axis=0)
        C = X - self.mean_
        cov = C.T @ C / max(n - 1, 1)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1]
        vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
        total = vals.sum()
        comps = vecs[:, :self.n_components].T.copy()
        for c in comps:
            if c[np.argmax(np.abs(c))] < 0:
                c *= -1
        ratios = vals[:self.n_components] / total if total > 0 else np.zeros(self.n_components)
        rank = int(np.sum(vals > self.tol * max(vals[0], 1.0)))
        if rank < self.n_components:
            warnings.warn(f"only {rank} non-zero principal axes", RankDeficient)
            comps[rank:] = 0.0
            ratios[rank:] = 0.0
        self.rank_ = rank
        self.components_ = comps
        self.explained_variance_ = vals[:self.n_components]
        self.explained_variance_ratio_ = ratios
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (check_array(X, dtype=np.float64) - self.mean_) @ self.components_.T


def pca_project(Z, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top ``dims`` axes and their explained-variance ratios."""
    p = PCA(dims).fit(Z)
    return p.transform(Z), p.explained_variance_ratio_
