"""Random forest for binary targets: bootstrap trees, Gini splits, random feature subsets.

Features are pre-binned once per fit. A feature with at most ``max_bins``
distinct training values is binned exactly (thresholds at midpoints), so
splits on one-hot and small-integer columns are the exact Gini-optimal ones.
Tree growth runs in numba.
"""
from __future__ import annotations

import hashlib
import math
import warnings

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..exceptions import DegenerateTarget


def bin_thresholds(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    out = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if len(u) > max_bins:
            u = np.unique(np.quantile(X[:, j], np.linspace(0, 1, max_bins)))
        out.append((u[:-1] + u[1:]) / 2.0)
    return out


def apply_bins(X: np.ndarray, thresholds: list[np.ndarray]) -> np.ndarray:
    codes = np.empty(X.shape, dtype=np.int32, order="F")
    for j, t in enumerate(thresholds):
        # bin = number of thresholds strictly below the value; left iff bin <= split
        codes[:, j] = np.searchsorted(t, X[:, j], side="left")
    return codes


def column_keys(X: np.ndarray) -> np.ndarray:
    """Order-free identity of each training column, used to break exact split ties."""
    keys = np.empty(X.shape[1], dtype=np.int64)
    for j in range(X.shape[1]):
        digest = hashlib.sha256(np.ascontiguousarray(X[:, j]).tobytes()).digest()
        keys[j] = np.frombuffer(digest[:8], dtype=np.int64)[0]
    return keys


@numba.njit(cache=True)
def _grow_tree(codes, y, n_bins, col_key, sample_idx, max_depth, mtry, min_leaf, seed):
    np.random.seed(seed)
    n_features = codes.shape[1]
    cap = 2 * len(sample_idx) + 1
    feature = np.full(cap, -1, np.int32)
    split = np.zeros(cap, np.int32)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap, np.float64)
    importance = np.zeros(n_features, np.float64)
    idx = sample_idx.copy()
    n_root = len(idx)
    max_b = n_bins.max()
    cnt = np.zeros(max_b, np.float64)
    pos = np.zeros(max_b, np.float64)
    # stack of (node, start, end, depth)
    stack = np.zeros((cap, 4), np.int64)
    top = 0
    stack[0, 0], stack[0, 1], stack[0, 2], stack[0, 3] = 0, 0, n_root, 0
    top = 1
    n_nodes = 1
    feats = np.arange(n_features)
    while top > 0:
        top -= 1
        node, start, end, depth = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3]
        n = end - start
        n_pos = 0.0
        for i in range(start, end):
            n_pos += y[idx[i]]
        p = n_pos / n
        value[node] = p
        gini = 1.0 - p * p - (1.0 - p) * (1.0 - p)
        if depth >= max_depth or n < 2 * min_leaf or n_pos == 0.0 or n_pos == n:
            continue
        best_gain = 0.0
        best_f = -1
        best_b = -1
        # Fisher-Yates draw until mtry non-constant features have been scored
        visited = 0
        for r in range(n_features):
            if visited >= mtry:
                break
            k = r + np.random.randint(n_features - r)
            f = feats[k]
            feats[k] = feats[r]
            feats[r] = f
            nb = n_bins[f]
            if nb < 2:
                continue
            for b in range(nb):
                cnt[b] = 0.0
                pos[b] = 0.0
            for i in range(start, end):
                c = codes[idx[i], f]
                cnt[c] += 1.0
                pos[c] += y[idx[i]]
            nonempty = 0
            for b in range(nb):
                if cnt[b] > 0:
                    nonempty += 1
            if nonempty < 2:
                continue
            visited += 1
            nl = 0.0
            pl = 0.0
            for b in range(nb - 1):
                nl += cnt[b]
                pl += pos[b]
                nr = n - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                if cnt[b] == 0.0:
                    continue
                pr = n_pos - pl
                ql = pl / nl
                qr = pr / nr
                g_l = 1.0 - ql * ql - (1.0 - ql) * (1.0 - ql)
                g_r = 1.0 - qr * qr - (1.0 - qr) * (1.0 - qr)
                gain = gini - (nl * g_l + nr * g_r) / n
                if gain <= 1e-12:
                    continue
                # exact ties go to the smaller (column content, bin) key, not the scan order
                if gain > best_gain or (gain == best_gain and (col_key[f] < col_key[best_f] or (
                        col_key[f] == col_key[best_f] and b < best_b))):
                    best_gain = gain
                    best_f = f
                    best_b = b
        if best_f < 0:
            continue
        # partition idx[start:end] so that codes <= best_b come first
        i, j = start, end - 1
        while i <= j:
            if codes[idx[i], best_f] <= best_b:
                i += 1
            else:
                t = idx[i]
                idx[i] = idx[j]
                idx[j] = t
                j -= 1
        feature[node] = best_f
        split[node] = best_b
        importance[best_f] += n / n_root * best_gain
        l_node, r_node = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l_node, r_node
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3] = r_node, i, end, depth + 1
        top += 1
        stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3] = l_node, start, i, depth + 1
        top += 1
    return feature[:n_nodes], split[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], importance


@numba.njit(cache=True)
def _predict_tree(codes, feature, split, left, right, value):
    out = np.empty(codes.shape[0], np.float64)
    for i in range(codes.shape[0]):
        node = 0
        while feature[node] >= 0:
            if codes[i, feature[node]] <= split[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


class RandomForest(BaseEstimator, ClassifierMixin):
    """Bagged Gini trees for 0/1 labels.

    ``predict`` is the majority vote of the trees' leaf classes (ties -> 0);
    ``predict_proba`` averages leaf class distributions.
    """

    def __init__(self, n_estimators=100, max_depth=12, max_features="sqrt", min_samples_leaf=1,
                 max_bins=256, bootstrap=True, random_state=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.max_bins = max_bins
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _mtry(self, d):
        mf = self.max_features
        if mf is None:
            return d
        if mf == "sqrt":
            return max(1, math.ceil(math.sqrt(d)))
        if isinstance(mf, float):
            return max(1, int(math.ceil(mf * d)))
        return max(1, min(d, int(mf)))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("RandomForest supports 0/1 targets only")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.n_samples_fit_ = len(X)
        ss = np.random.SeedSequence(self.random_state)
        rngs = [np.random.default_rng(c) for c in ss.spawn(self.n_estimators)]
        self.bootstrap_indices_ = []
        self.trees_ = []
        importance = np.zeros(X.shape[1])
        if len(np.unique(y)) < 2:
            warnings.warn("single-class training labels; forest predicts a constant", DegenerateTarget)
            self.constant_ = int(y[0]) if len(y) else 0
            self.feature_importances_ = np.full(X.shape[1], 1.0 / X.shape[1])
            return self
        self.constant_ = None
        self.thresholds_ = bin_thresholds(X, self.max_bins)
        codes = apply_bins(X, self.thresholds_)
        n_bins = np.array([len(t) + 1 for t in self.thresholds_], dtype=np.int32)
        col_key = column_keys(X)
        yf = y.astype(np.float64)
        mtry = self._mtry(X.shape[1])
        for rng in rngs:
            if self.bootstrap:
                sample = np.sort(rng.integers(0, len(X), len(X))).astype(np.int64)
            else:
                sample = np.arange(len(X), dtype=np.int64)
            seed = int(rng.integers(0, 2**31 - 1))
            tree = _grow_tree(codes, yf, n_bins, col_key, sample, int(self.max_depth), mtry,
                              int(self.min_samples_leaf), seed)
            self.bootstrap_indices_.append(sample)
            self.trees_.append(tree[:5])
            importance += tree[5]
        total = importance.sum()
        self.feature_importances_ = importance / total if total > 0 else np.full(X.shape[1], 1.0 / X.shape[1])
        return self

    def _leaf_probs(self, X):
        check_is_fitted(self, "classes_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        codes = apply_bins(X, self.thresholds_)
        return np.stack([_predict_tree(codes, *t) for t in self.trees_])

    def predict_proba(self, X):
        if getattr(self, "constant_", None) is not None:
            X = check_array(X, dtype=np.float64)
            p = np.full(len(X), float(self.constant_))
        else:
            p = self._leaf_probs(X).mean(axis=0)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        if getattr(self, "constant_", None) is not None:
            return np.full(len(check_array(X, dtype=np.float64)), self.constant_, dtype=np.int64)
        votes = (self._leaf_probs(X) > 0.5).sum(axis=0)
        return (2 * votes > len(self.trees_)).astype(np.int64)


def fit_forest(train, n_estimators=100, max_depth=12, max_features="sqrt", random_state=0, **kw) -> RandomForest:
    """Fit on a :class:`~fairdistill.data.Dataset` using ``X ++ onehot(s)`` as features."""
    return RandomForest(n_estimators=n_estimators, max_depth=max_depth, max_features=max_features,
                        random_state=random_state, **kw).fit(train.with_group(), train.y)
