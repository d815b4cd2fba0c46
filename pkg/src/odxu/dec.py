"""Embedded clustering over the autoencoder's latent space.

The clustering head holds k centroids in latent space.  Points get soft
Student-t assignments q, a sharpened target distribution p is derived from
q, and the head descends KL(P || Q) on the centroids while the encoder
stays frozen (an opt-in flag lets the encoder move too, for ablations).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from .exceptions import TrainingDivergedError
from .stopping import EarlyStop, early_stop_check
from .validation import check_fitted, check_matrix


def kmeans_init(Z, k: int, seed: int, *, tol: float = 1e-6, max_iter: int = 300) -> np.ndarray:
    """Centroid initialization: k-means++ seeding then Lloyd iterations.

    Stops when the relative inertia change drops below ``tol`` or after
    ``max_iter`` assignment/update rounds.  Empty clusters keep their
    previous centroid.
    """
    Z = check_matrix(Z, name="Z")
    n = len(Z)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, Z.shape[1]), dtype=np.float64)
    centroids[0] = Z[rng.integers(n)]
    d2 = ((Z - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[j] = Z[idx]
        d2 = np.minimum(d2, ((Z - centroids[j]) ** 2).sum(axis=1))

    prev_inertia = None
    for _ in range(max_iter):
        D2 = cdist(Z, centroids, "sqeuclidean")
        assign = D2.argmin(axis=1)
        inertia = float(D2[np.arange(n), assign].sum())
        if prev_inertia is not None and abs(prev_inertia - inertia) <= tol * prev_inertia:
            break
        for j in range(k):
            members = Z[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        prev_inertia = inertia
    return centroids


def soft_assignments(Z, centroids, alpha: float = 1.0) -> np.ndarray:
    """Student-t soft assignment matrix q (n x k), each row summing to 1.

    q[i][j] = (1 + ||z_i - mu_j||^2 / alpha)^(-(alpha+1)/2), normalized
    over j.  Every entry is strictly positive.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    centroids = np.asarray(centroids, dtype=np.float64)
    d2 = cdist(Z, centroids, "sqeuclidean")
    w = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return w / w.sum(axis=1, keepdims=True)


def target_distribution(q) -> np.ndarray:
    """Sharpened target p: squares q and renormalizes by cluster frequency.

    p[i][j] = (q[i][j]^2 / f_j) normalized over j, with f_j the column sum
    of q.  One-hot rows are fixed points.
    """
    q = np.asarray(q, dtype=np.float64)
    f = q.sum(axis=0)
    w = (q * q) / f
    return w / w.sum(axis=1, keepdims=True)


def kl_divergence(p, q) -> float:
    """KL(P || Q) = sum_ij p_ij log(p_ij / q_ij), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    mask = p > 0.0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return float(terms.sum())


def centroid_gradient(Z, centroids, p, q, alpha: float = 1.0) -> np.ndarray:
    """Gradient of KL(P || Q) with respect to each centroid (p held fixed).

    dL/dmu_j = -((alpha+1)/alpha) * sum_i (1 + d_ij^2/alpha)^(-1)
               * (p_ij - q_ij) * (z_i - mu_j)
    """
    Z = np.asarray(Z, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    d2 = cdist(Z, centroids, "sqeuclidean")
    coef = (p - q) / (1.0 + d2 / alpha)  # n x k
    scale = (alpha + 1.0) / alpha
    # sum_i coef_ij * (z_i - mu_j) = coef^T Z - colsum(coef) * mu_j
    summed = coef.T @ Z - coef.sum(axis=0)[:, None] * centroids
    return -scale * summed


def latent_gradient(Z, centroids, p, q, alpha: float = 1.0) -> np.ndarray:
    """Gradient of KL(P || Q) with respect to each latent row (p held fixed).

    dL/dz_i = ((alpha+1)/alpha) * sum_j (1 + d_ij^2/alpha)^(-1)
              * (p_ij - q_ij) * (z_i - mu_j)
    """
    Z = np.asarray(Z, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    d2 = cdist(Z, centroids, "sqeuclidean")
    coef = (p - q) / (1.0 + d2 / alpha)
    scale = (alpha + 1.0) / alpha
    return scale * (coef.sum(axis=1)[:, None] * Z - coef @ centroids)


def cluster_purity(assignments, labels) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if len(assignments) != len(labels):
        raise ValueError("assignments and labels must align")
    total = 0
    for c in np.unique(assignments):
        member_labels = labels[assignments == c]
        _, counts = np.unique(member_labels, return_counts=True)
        total += counts.max()
    return total / len(labels)


class ClusteringHead(BaseEstimator):
    """k centroids in latent space, trained by KL descent on soft assignments.

    fit() initializes centroids with k-means on the latents (unless
    ``warm_start`` finds existing ones) and then runs ``max_epochs`` rounds
    of full-batch gradient descent on the centroids.  The recorded loss is
    the mean per-row KL, so plateau thresholds carry across dataset sizes.
    ``max_epochs=0`` keeps the k-means initialization untouched.

    Parameters
    ----------
    k : int
        Number of clusters (>= 2).
    alpha : float
        Student-t degrees of freedom for the soft assignment; 1 by default.
    update_interval : int
        Recompute the target distribution every this many epochs.
    warm_start : bool
        Continue from existing centroids instead of re-running k-means.
    """

    def __init__(self, k=10, alpha=1.0, learning_rate=0.1, max_epochs=100,
                 update_interval=1, seed=0, stop: EarlyStop | None = None,
                 warm_start=False):
        self.k = k
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.update_interval = update_interval
        self.seed = seed
        self.stop = stop
        self.warm_start = warm_start

    def fit(self, Z, y=None):
        Z = check_matrix(Z, name="Z")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if not (self.warm_start and hasattr(self, "centroids_")):
            self.centroids_ = kmeans_init(Z, self.k, self.seed)
            self.loss_history_ = []
        elif Z.shape[1] != self.centroids_.shape[1]:
            raise ValueError(
                f"warm start expects {self.centroids_.shape[1]}-d latents, "
                f"got {Z.shape[1]}"
            )
        history = self._descend(Z)
        self.loss_history_ = list(self.loss_history_) + history
        return self

    def _descend(self, Z) -> list[float]:
        n = len(Z)
        history: list[float] = []
        q = soft_assignments(Z, self.centroids_, self.alpha)
        p = None
        for epoch in range(self.max_epochs):
            if epoch % self.update_interval == 0:
                p = target_distribution(q)
            loss = kl_divergence(p, q) / n
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss!r}", epoch=epoch)
            history.append(loss)
            grad = centroid_gradient(Z, self.centroids_, p, q, self.alpha) / n
            self.centroids_ = self.centroids_ - self.learning_rate * grad
            q = soft_assignments(Z, self.centroids_, self.alpha)
            if self.stop is not None and early_stop_check(history, self.stop, "cluster"):
                break
        return history

    def soft_assign(self, Z) -> np.ndarray:
        check_fitted(self, "centroids_")
        Z = check_matrix(Z, n_features=self.centroids_.shape[1], name="Z")
        return soft_assignments(Z, self.centroids_, self.alpha)

    def predict(self, Z) -> np.ndarray:
        return self.soft_assign(Z).argmax(axis=1)


def train_embedded_clustering(ae, head: ClusteringHead, X, *,
                              unfreeze_encoder: bool = False,
                              encoder_learning_rate: float = 0.001):
    """Phase II driver: fit the clustering head over the encoder's latents.

    Default behavior freezes the encoder: latents are computed once and only
    the centroids move.  With ``unfreeze_encoder`` the KL gradient also flows
    back through the encoder (ablation path; the decoder never moves).
    Returns the head's per-epoch mean-KL history.
    """
    if not unfreeze_encoder:
        head.fit(ae.transform(X))
        return list(head.loss_history_)

    X = check_matrix(X, n_features=ae.n_features_in_, name="X")
    encoder = ae.encoder_
    if not (head.warm_start and hasattr(head, "centroids_")):
        head.centroids_ = kmeans_init(encoder.forward(X), head.k, head.seed)
        head.loss_history_ = []
    n = len(X)
    history: list[float] = []
    p = None
    for epoch in range(head.max_epochs):
        Z = encoder.forward(X)
        q = soft_assignments(Z, head.centroids_, head.alpha)
        if epoch % head.update_interval == 0:
            p = target_distribution(q)
        loss = kl_divergence(p, q) / n
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss!r}", epoch=epoch)
        history.append(loss)
        grad_mu = centroid_gradient(Z, head.centroids_, p, q, head.alpha) / n
        d_z = latent_gradient(Z, head.centroids_, p, q, head.alpha) / n
        grads, _ = encoder.grads_from_output_grad(X, d_z)
        head.centroids_ = head.centroids_ - head.learning_rate * grad_mu
        for (W, b, _), (dW, db) in zip(encoder.layers, grads):
            W -= encoder_learning_rate * dW
            b -= encoder_learning_rate * db
        if head.stop is not None and early_stop_check(history, head.stop, "cluster"):
            break
    head.loss_history_ = list(head.loss_history_) + history
    return history


def latent_features(ae, head, X) -> np.ndarray:
    """The 12 downstream features: raw encoder latents.

    The head participates in training only; it is accepted here so call
    sites read as "features from the trained pair" but does not transform
    the latents.
    """
    return ae.transform(X)
