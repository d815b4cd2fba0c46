"""Uncertainty scoring for classifier predictions.

Five scores over a fitted base classifier: the top-two probability gap
(confidence), Shannon entropy of the predicted distribution, and three
error-predicting metamodels that differ only in how the base model's
internals are appended to the input features (sorted probabilities, SHAP
attributions, or replicated per-feature gain).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .gbt import GradientBoostedTrees
from .validation import check_matrix, check_fitted, check_probability_vector

RECIPES = ("prob", "shap", "ig")


@dataclass(frozen=True)
class UQScore:
    """A scalar score plus which way it points.

    polarity "certainty" means larger is more trustworthy (confidence);
    "uncertainty" means larger is more suspect (entropy, metamodel z).
    """

    value: float
    polarity: str

    def __post_init__(self):
        if self.polarity not in ("certainty", "uncertainty"):
            raise ValueError(f"unknown polarity {self.polarity!r}")


def confidence_scores(P) -> np.ndarray:
    """Top-two gap per row: p_(k) - p_(k-1), in [0, 1]."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("need a 2-d probability matrix with >= 2 classes")
    part = np.sort(P, axis=1)
    return part[:, -1] - part[:, -2]


def entropy_scores(P) -> np.ndarray:
    """Shannon entropy per row in nats, with 0 ln 0 = 0."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("need a 2-d probability matrix with >= 2 classes")
    terms = np.zeros_like(P)
    mask = P > 0.0
    terms[mask] = P[mask] * np.log(P[mask])
    return -terms.sum(axis=1)


def confidence(p) -> UQScore:
    p = check_probability_vector(p)
    return UQScore(float(confidence_scores(p[None, :])[0]), "certainty")


def entropy(p) -> UQScore:
    p = check_probability_vector(p)
    return UQScore(float(entropy_scores(p[None, :])[0]), "uncertainty")


def meta_labels(base, X, labels) -> np.ndarray:
    """0 where the base classifier predicts the label, 1 where it errs."""
    labels = np.asarray(labels)
    pred = base.predict(X)
    if len(labels) != len(pred):
        raise ValueError("X and labels must align")
    return (pred != labels).astype(np.int64)


def build_meta_set(base, X, labels, ratio: int = 5, seed: int = 0):
    """Assemble the metamodel training set: every miss plus sampled hits.

    Keeps all misclassified samples and subsamples correct ones (without
    replacement) down to ``ratio`` times the miss count, or all of them if
    fewer exist.  The result is shuffled; everything is seeded.  Returns
    (X rows, meta labels).
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    X = check_matrix(X, name="X")
    y_m = meta_labels(base, X, labels)
    missed = np.flatnonzero(y_m == 1)
    correct = np.flatnonzero(y_m == 0)
    if len(missed) == 0:
        raise ValueError(
            "base classifier makes no errors on this set; build the "
            "metamodel training set from harder data"
        )
    rng = np.random.default_rng(seed)
    n_correct = min(len(correct), ratio * len(missed))
    kept = rng.choice(correct, size=n_correct, replace=False)
    order = rng.permutation(np.concatenate([missed, kept]))
    return X[order], y_m[order]


def augment(recipe: str, base, X) -> np.ndarray:
    """Append base-model internals to the feature rows.

    prob: [X, probabilities sorted descending, top-two gap]  (d + k + 1)
    shap: [X, SHAP attribution of the predicted class]        (d + d)
    ig:   [X, sorted probabilities, gain vector per row]      (d + k + d)
    """
    check_fitted(base, "trees_")
    X = check_matrix(X, n_features=base.n_features_in_, name="X")
    P = base.predict_proba(X)
    p_sorted = np.sort(P, axis=1)[:, ::-1]
    if recipe == "prob":
        gap = (p_sorted[:, 0] - p_sorted[:, 1])[:, None]
        return np.hstack([X, p_sorted, gap])
    if recipe == "shap":
        predicted = P.argmax(axis=1)
        phi = np.empty_like(X)
        for c in np.unique(predicted):
            rows = predicted == c
            phi[rows], _ = base.shap_values(X[rows], class_index=int(c))
        return np.hstack([X, phi])
    if recipe == "ig":
        gains = np.broadcast_to(base.gain_vector(), X.shape)
        return np.hstack([X, p_sorted, gains])
    raise ValueError(f"unknown recipe {recipe!r}, expected one of {RECIPES}")


def augmented_width(recipe: str, d: int, k: int) -> int:
    if recipe == "prob":
        return d + k + 1
    if recipe == "shap":
        return d + d
    if recipe == "ig":
        return d + k + d
    raise ValueError(f"unknown recipe {recipe!r}, expected one of {RECIPES}")


class Metamodel(BaseEstimator):
    """Binary error predictor over augmented base-classifier features.

    Wraps a boosted-tree binary classifier whose positive class means "the
    base model got this sample wrong".  score_samples returns that error
    probability z in [0, 1]; predict flags samples with z above
    ``threshold`` as suspicious.  The fitted object remembers a fingerprint
    of the base classifier and refuses to score against any other, so a
    bundle can't silently explain the wrong model.

    Tree hyperparameters default to the base classifier's own defaults.
    """

    def __init__(self, recipe="prob", threshold=0.5, n_rounds=100, max_depth=6,
                 learning_rate=0.3, reg_lambda=1.0, gamma=0.0):
        self.recipe = recipe
        self.threshold = threshold
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.gamma = gamma

    def fit(self, base, X, y_m):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}, expected one of {RECIPES}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")
        y_m = np.asarray(y_m)
        if not set(np.unique(y_m)) <= {0, 1}:
            raise ValueError("meta labels must be 0 (correct) or 1 (error)")
        A = augment(self.recipe, base, X)
        self.model_ = GradientBoostedTrees(
            n_rounds=self.n_rounds, max_depth=self.max_depth,
            learning_rate=self.learning_rate, reg_lambda=self.reg_lambda,
            gamma=self.gamma,
        ).fit(A, y_m)
        self.base_ref_ = base.fingerprint()
        return self

    def _check_pairing(self, base):
        check_fitted(self, "model_")
        if base.fingerprint() != self.base_ref_:
            raise ValueError(
                "metamodel was fitted against a different base classifier "
                f"(expected {self.base_ref_[:12]}..., got {base.fingerprint()[:12]}...)"
            )

    def score_samples(self, base, X) -> np.ndarray:
        """Probability that the base prediction is wrong, per row."""
        self._check_pairing(base)
        A = augment(self.recipe, base, X)
        P = self.model_.predict_proba(A)
        error_col = int(np.flatnonzero(self.model_.classes_ == 1)[0])
        return P[:, error_col]

    def predict(self, base, X) -> np.ndarray:
        """1 = suspicious (z above threshold), 0 = trusted."""
        return (self.score_samples(base, X) > self.threshold).astype(np.int64)
