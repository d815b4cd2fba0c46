"""Gradient-boosted decision trees with softmax output and exact SHAP.

One-vs-all regression trees per boosting round, fitted to second-order
gradients of softmax cross-entropy.  Split search is exact greedy over
sorted unique feature values; no histogramming.  Attribution is
path-dependent tree SHAP over the pre-softmax margin, with per-node cover
(training sample counts) driving the conditional expectations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .validation import check_class_indices, check_fitted, check_matrix

__all__ = [
    "TreeNode",
    "GradientBoostedTrees",
    "classical_ig",
    "tree_shap_single",
    "tree_expected_value",
]


class TreeNode:
    """A regression tree node: either a split or a leaf.

    Internal nodes carry (feature, threshold, gain, children); leaves carry
    the additive weight.  Every node records its cover, the number of
    training samples that reached it, which the SHAP recursion uses to
    weight untaken branches.
    """

    __slots__ = ("feature", "threshold", "gain", "left", "right", "weight", "cover")

    def __init__(self, *, feature=None, threshold=None, gain=None,
                 left=None, right=None, weight=None, cover=0.0):
        self.feature = feature
        self.threshold = threshold
        self.gain = gain
        self.left = left
        self.right = right
        self.weight = weight
        self.cover = float(cover)

    @classmethod
    def leaf(cls, weight: float, cover: float) -> "TreeNode":
        if not np.isfinite(weight):
            raise ValueError(f"leaf weight must be finite, got {weight!r}")
        return cls(weight=float(weight), cover=cover)

    @classmethod
    def split(cls, feature: int, threshold: float, gain: float,
              left: "TreeNode", right: "TreeNode", cover: float) -> "TreeNode":
        if not np.isfinite(threshold):
            raise ValueError(f"threshold must be finite, got {threshold!r}")
        if gain < 0:
            raise ValueError(f"retained split must have gain >= 0, got {gain!r}")
        return cls(feature=int(feature), threshold=float(threshold),
                   gain=float(gain), left=left, right=right, cover=cover)

    @property
    def is_leaf(self) -> bool:
        return self.weight is not None

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.float64)
        self._predict_into(X, np.arange(len(X)), out)
        return out

    def _predict_into(self, X, idx, out):
        if self.is_leaf:
            out[idx] = self.weight
            return
        mask = X[idx, self.feature] < self.threshold
        self.left._predict_into(X, idx[mask], out)
        self.right._predict_into(X, idx[~mask], out)

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"weight": self.weight, "cover": self.cover}
        return {
            "feature": self.feature, "threshold": self.threshold,
            "gain": self.gain, "cover": self.cover,
            "left": self.left.to_dict(), "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "weight" in d:
            return cls.leaf(d["weight"], d["cover"])
        return cls.split(d["feature"], d["threshold"], d["gain"],
                         cls.from_dict(d["left"]), cls.from_dict(d["right"]),
                         d["cover"])


def _softmax(margins: np.ndarray) -> np.ndarray:
    shifted = margins - margins.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_loss(margins: np.ndarray, y_idx: np.ndarray) -> float:
    shifted = margins - margins.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(y_idx)), y_idx]))


class _TreeBuilder:
    def __init__(self, max_depth, reg_lambda, gamma, learning_rate):
        self.max_depth = max_depth
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.learning_rate = learning_rate

    def build(self, X, g, h, feature_gain: np.ndarray) -> TreeNode:
        return self._node(X, g, h, np.arange(len(X)), 0, feature_gain)

    def _leaf(self, g, h, idx) -> TreeNode:
        G, H = g[idx].sum(), h[idx].sum()
        denom = H + self.reg_lambda
        raw = 0.0 if denom == 0.0 else -G / denom
        return TreeNode.leaf(self.learning_rate * raw, cover=len(idx))

    def _node(self, X, g, h, idx, depth, feature_gain) -> TreeNode:
        if depth >= self.max_depth or len(idx) < 2:
            return self._leaf(g, h, idx)
        best = self._best_split(X, g, h, idx)
        if best is None:
            return self._leaf(g, h, idx)
        gain, feature, threshold = best
        mask = X[idx, feature] < threshold
        left = self._node(X, g, h, idx[mask], depth + 1, feature_gain)
        right = self._node(X, g, h, idx[~mask], depth + 1, feature_gain)
        feature_gain[feature] += gain
        return TreeNode.split(feature, threshold, gain, left, right, cover=len(idx))

    def _best_split(self, X, g, h, idx):
        """Exact greedy split search; ties go to the lowest feature index,
        then the lowest threshold (strict > when comparing gains)."""
        lam = self.reg_lambda
        G, H = g[idx].sum(), h[idx].sum()
        parent = G * G / (H + lam) if H + lam != 0.0 else 0.0
        best = None
        for f in range(X.shape[1]):
            values = X[idx, f]
            order = np.argsort(values, kind="stable")
            v = values[order]
            boundaries = np.flatnonzero(v[:-1] < v[1:])
            if len(boundaries) == 0:
                continue
            Gc = np.cumsum(g[idx][order])
            Hc = np.cumsum(h[idx][order])
            G_L, H_L = Gc[boundaries], Hc[boundaries]
            G_R, H_R = G - G_L, H - H_L
            with np.errstate(divide="ignore", invalid="ignore"):
                gains = 0.5 * (G_L * G_L / (H_L + lam) + G_R * G_R / (H_R + lam)
                               - parent) - self.gamma
            gains[~np.isfinite(gains)] = -np.inf
            k = int(np.argmax(gains))  # first max: lowest threshold wins ties
            if gains[k] > 0.0 and (best is None or gains[k] > best[0]):
                threshold = (v[boundaries[k]] + v[boundaries[k] + 1]) / 2.0
                best = (float(gains[k]), f, threshold)
        return best


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Boosted tree classifier: K one-vs-all trees per round, softmax output.

    Split gain is 0.5 * [G_L^2/(H_L+lam) + G_R^2/(H_R+lam)
    - (G_L+G_R)^2/(H_L+H_R+lam)] - gamma, and a split is kept only when its
    gain is strictly positive.  Leaf weights -G/(H+lam) are shrunk by the
    learning rate as the tree is built.  Fitting is deterministic: there is
    no sampling anywhere.

    ``warm_start=True`` makes a second fit() append ``n_rounds`` more
    boosting rounds on the new data while keeping existing trees frozen
    (the fine-tune path).
    """

    def __init__(self, n_rounds=100, max_depth=6, learning_rate=0.3,
                 reg_lambda=1.0, gamma=0.0, base_score=0.5, warm_start=False):
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.base_score = base_score
        self.warm_start = warm_start

    def _validate_params_(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("reg_lambda and gamma must be >= 0")

    def fit(self, X, y):
        self._validate_params_()
        X = check_matrix(X, name="X")
        if len(X) < 2:
            raise ValueError("need at least 2 samples")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y must align")

        if self.warm_start and hasattr(self, "trees_"):
            return self._continue(X, y)

        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        self.n_classes_ = len(self.classes_)
        self.trees_ = []
        self.feature_gain_ = np.zeros(X.shape[1], dtype=np.float64)
        self.loss_history_ = []
        y_idx = np.searchsorted(self.classes_, y)
        check_class_indices(y_idx, self.n_classes_)
        margins = np.full((len(X), self.n_classes_), float(self.base_score))
        self._boost(X, y_idx, margins, self.n_rounds)
        return self

    def _continue(self, X, y):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        missing = set(np.unique(y)) - set(self.classes_)
        if missing:
            raise ValueError(f"unseen classes at fine-tune time: {sorted(missing)}")
        y_idx = np.searchsorted(self.classes_, y)
        margins = self.decision_function(X)
        self._boost(X, y_idx, margins, self.n_rounds)
        return self

    def _boost(self, X, y_idx, margins, n_rounds):
        self._fingerprint_ = None
        builder = _TreeBuilder(self.max_depth, self.reg_lambda, self.gamma,
                               self.learning_rate)
        onehot = np.zeros((len(X), self.n_classes_))
        onehot[np.arange(len(X)), y_idx] = 1.0
        for _ in range(n_rounds):
            p = _softmax(margins)
            round_trees = []
            for c in range(self.n_classes_):
                g = p[:, c] - onehot[:, c]
                h = p[:, c] * (1.0 - p[:, c])
                tree = builder.build(X, g, h, self.feature_gain_)
                round_trees.append((c, tree))
            for c, tree in round_trees:
                margins[:, c] += tree.predict(X)
            self.trees_.extend(round_trees)
            self.loss_history_.append(_log_loss(margins, y_idx))

    def decision_function(self, X) -> np.ndarray:
        """Pre-softmax margins, one column per class."""
        check_fitted(self, "trees_")
        X = check_matrix(X, n_features=self.n_features_in_, name="X")
        margins = np.full((len(X), self.n_classes_), float(self.base_score))
        for c, tree in self.trees_:
            margins[:, c] += tree.predict(X)
        return margins

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def gain_vector(self) -> np.ndarray:
        """Cumulative split gain per feature, accumulated over all trees."""
        check_fitted(self, "trees_")
        return self.feature_gain_.copy()

    def fingerprint(self) -> str:
        """Content hash of the fitted ensemble (trees, classes, settings).

        Downstream artifacts record this to reject pairings with a different
        classifier.  Cached until the next fit call.
        """
        check_fitted(self, "trees_")
        cached = getattr(self, "_fingerprint_", None)
        if cached is not None:
            return cached
        payload = {
            "classes": np.asarray(self.classes_).tolist(),
            "base_score": self.base_score,
            "params": {
                "n_rounds": self.n_rounds, "max_depth": self.max_depth,
                "learning_rate": self.learning_rate,
                "reg_lambda": self.reg_lambda, "gamma": self.gamma,
            },
            "trees": [(int(c), t.to_dict()) for c, t in self.trees_],
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        self._fingerprint_ = hashlib.sha256(blob).hexdigest()
        return self._fingerprint_

    def shap_values(self, X, class_index: int):
        """Per-feature SHAP attributions of the class margin.

        Returns (phi, base) where phi has one row per input row and base is
        the expected margin of an input with no features known; local
        accuracy holds: base + phi.sum(axis=1) == margin of ``class_index``.
        """
        check_fitted(self, "trees_")
        X = check_matrix(X, n_features=self.n_features_in_, name="X")
        if not (0 <= class_index < self.n_classes_):
            raise ValueError(f"class index {class_index} out of range")
        class_trees = [t for c, t in self.trees_ if c == class_index]
        phi = np.zeros((len(X), self.n_features_in_))
        for tree in class_trees:
            for i in range(len(X)):
                tree_shap_single(tree, X[i], phi[i])
        base = float(self.base_score) + sum(tree_expected_value(t) for t in class_trees)
        return phi, base


def tree_expected_value(node: TreeNode) -> float:
    """Cover-weighted mean leaf value: the tree's output with nothing known."""
    if node.is_leaf:
        return node.weight
    return (node.left.cover * tree_expected_value(node.left)
            + node.right.cover * tree_expected_value(node.right)) / node.cover


@dataclass
class _PathElement:
    feature: int
    zero_fraction: float
    one_fraction: float
    pweight: float


def _extend_path(path: list, zero_fraction: float, one_fraction: float,
                 feature: int) -> None:
    l = len(path)
    path.append(_PathElement(feature, zero_fraction, one_fraction,
                             1.0 if l == 0 else 0.0))
    for i in range(l - 1, -1, -1):
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) / (l + 1)
        path[i].pweight = zero_fraction * path[i].pweight * (l - i) / (l + 1)


def _unwind_path(path: list, index: int) -> None:
    l = len(path) - 1
    one = path[index].one_fraction
    zero = path[index].zero_fraction
    carry = path[l].pweight
    for i in range(l - 1, -1, -1):
        if one != 0.0:
            tmp = path[i].pweight
            path[i].pweight = carry * (l + 1) / ((i + 1) * one)
            carry = tmp - path[i].pweight * zero * (l - i) / (l + 1)
        else:
            path[i].pweight = path[i].pweight * (l + 1) / (zero * (l - i))
    for i in range(index, l):
        path[i].feature = path[i + 1].feature
        path[i].zero_fraction = path[i + 1].zero_fraction
        path[i].one_fraction = path[i + 1].one_fraction
    path.pop()


def _unwound_sum(path: list, index: int) -> float:
    trimmed = [_PathElement(e.feature, e.zero_fraction, e.one_fraction, e.pweight)
               for e in path]
    _unwind_path(trimmed, index)
    return sum(e.pweight for e in trimmed)


def tree_shap_single(root: TreeNode, x: np.ndarray, phi: np.ndarray) -> None:
    """Accumulate one tree's SHAP attributions for one input row into phi.

    Path-dependent variant: untaken branches are weighted by the fraction
    of training cover that flowed down them.  A feature split twice along
    one path is unwound at its earlier occurrence so each path element
    stays unique per feature.
    """
    _shap_recurse(root, x, phi, [], 1.0, 1.0, -1)


def _shap_recurse(node, x, phi, parent_path, zero_fraction, one_fraction, feature):
    path = [_PathElement(e.feature, e.zero_fraction, e.one_fraction, e.pweight)
            for e in parent_path]
    _extend_path(path, zero_fraction, one_fraction, feature)
    if node.is_leaf:
        for i in range(1, len(path)):
            w = _unwound_sum(path, i)
            el = path[i]
            phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * node.weight
        return
    hot, cold = ((node.left, node.right) if x[node.feature] < node.threshold
                 else (node.right, node.left))
    incoming_zero = 1.0
    incoming_one = 1.0
    previous = next((i for i in range(1, len(path)) if path[i].feature == node.feature),
                    None)
    if previous is not None:
        incoming_zero = path[previous].zero_fraction
        incoming_one = path[previous].one_fraction
        _unwind_path(path, previous)
    _shap_recurse(hot, x, phi, path, incoming_zero * hot.cover / node.cover,
                  incoming_one, node.feature)
    _shap_recurse(cold, x, phi, path, incoming_zero * cold.cover / node.cover,
                  0.0, node.feature)


def classical_ig(labels, feature) -> float:
    """Information gain IG(I, f) = H(I) - H(I | f), Shannon entropy in nats."""
    labels = np.asarray(labels)
    feature = np.asarray(feature)
    if len(labels) == 0:
        raise ValueError("empty input")
    if len(labels) != len(feature):
        raise ValueError("labels and feature must align")

    def entropy(arr):
        _, counts = np.unique(arr, return_counts=True)
        p = counts / len(arr)
        return float(-(p * np.log(p)).sum())

    conditional = 0.0
    for v in np.unique(feature):
        mask = feature == v
        conditional += mask.mean() * entropy(labels[mask])
    return entropy(labels) - conditional
