import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odxu.dec import (
    ClusteringHead,
    centroid_gradient,
    cluster_purity,
    kl_divergence,
    kmeans_init,
    latent_features,
    latent_gradient,
    soft_assignments,
    target_distribution,
    train_embedded_clustering,
)
from odxu.nn import Autoencoder


def make_blobs(n_per=150, d=12, k=3, spread=0.2, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((k, d)) * 10.0
    Z = np.vstack([c + spread * rng.standard_normal((n_per, d)) for c in centers])
    labels = np.repeat(np.arange(k), n_per)
    return Z, labels, centers


def random_assignment_matrix(n, k, seed):
    rng = np.random.default_rng(seed)
    q = rng.random((n, k)) + 1e-3
    return q / q.sum(axis=1, keepdims=True)


class TestSoftAssignments:
    def test_closed_form_distances_zero_and_one(self):
        Z = np.array([[0.0, 0.0]])
        centroids = np.array([[0.0, 0.0], [1.0, 0.0]])
        q = soft_assignments(Z, centroids, alpha=1.0)
        assert np.allclose(q, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_point_on_centroid_is_row_max(self):
        Z = np.array([[0.0, 0.0]])
        centroids = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 7.0]])
        q = soft_assignments(Z, centroids)
        assert q[0].argmax() == 0

    def test_equidistant_centroids_give_uniform_row(self):
        Z = np.array([[0.0, 0.0]])
        centroids = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        q = soft_assignments(Z, centroids)
        assert np.allclose(q, 0.25, atol=1e-12)

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 30), k=st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one_entries_positive(self, seed, n, k):
        rng = np.random.default_rng(seed)
        q = soft_assignments(rng.standard_normal((n, 4)) * 5, rng.standard_normal((k, 4)) * 5)
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9)
        assert (q > 0).all()


class TestTargetDistribution:
    def test_hand_computed_two_by_two(self):
        q = np.array([[0.8, 0.2], [0.4, 0.6]])
        expected = np.array([[32 / 35, 3 / 35], [8 / 35, 27 / 35]])
        assert np.allclose(target_distribution(q), expected, atol=1e-12)

    def test_one_hot_rows_fixed(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert np.allclose(target_distribution(q), q, atol=1e-12)

    def test_uniform_stays_uniform(self):
        q = np.full((5, 4), 0.25)
        assert np.allclose(target_distribution(q), q, atol=1e-12)

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 30), k=st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, seed, n, k):
        p = target_distribution(random_assignment_matrix(n, k, seed))
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert (p >= 0).all()


class TestKlDivergence:
    def test_equal_distributions_give_zero(self):
        q = random_assignment_matrix(10, 3, seed=1)
        assert kl_divergence(q, q) == 0.0

    def test_zero_p_entries_contribute_zero(self):
        p = np.array([[1.0, 0.0]])
        q = np.array([[0.5, 0.5]])
        assert np.isclose(kl_divergence(p, q), np.log(2.0))

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_non_negative(self, seed):
        p = random_assignment_matrix(8, 4, seed)
        q = random_assignment_matrix(8, 4, seed + 99_999)
        assert kl_divergence(p, q) >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_divergence(np.ones((2, 2)) / 2, np.ones((2, 3)) / 3)


class TestGradients:
    """Finite-difference oracles for the two analytic KL gradients."""

    @staticmethod
    def fd_grad(f, x0, step=1e-6):
        g = np.zeros_like(x0)
        it = np.nditer(x0, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            xp = x0.copy(); xp[i] += step
            xm = x0.copy(); xm[i] -= step
            g[i] = (f(xp) - f(xm)) / (2 * step)
        return g

    def test_centroid_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        Z = rng.standard_normal((20, 5))
        mu0 = rng.standard_normal((3, 5))
        p = target_distribution(soft_assignments(Z, mu0))

        def loss(mu):
            return kl_divergence(p, soft_assignments(Z, mu))

        analytic = centroid_gradient(Z, mu0, p, soft_assignments(Z, mu0))
        numeric = self.fd_grad(loss, mu0)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4

    def test_latent_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        Z0 = rng.standard_normal((12, 4))
        mu = rng.standard_normal((3, 4))
        p = target_distribution(soft_assignments(Z0, mu))

        def loss(Z):
            return kl_divergence(p, soft_assignments(Z, mu))

        analytic = latent_gradient(Z0, mu, p, soft_assignments(Z0, mu))
        numeric = self.fd_grad(loss, Z0)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4

    def test_gradient_zero_when_p_equals_q(self):
        rng = np.random.default_rng(5)
        Z = rng.standard_normal((10, 3))
        mu = rng.standard_normal((2, 3))
        q = soft_assignments(Z, mu)
        assert np.allclose(centroid_gradient(Z, mu, q, q), 0.0)
        assert kl_divergence(q, q) == 0.0


class TestKmeansInit:
    def test_n_equals_k_returns_permutation_of_points(self):
        rng = np.random.default_rng(6)
        Z = rng.standard_normal((4, 3)) * 5
        centroids = kmeans_init(Z, 4, seed=0)
        matched = {tuple(np.round(c, 9)) for c in centroids}
        assert matched == {tuple(np.round(z, 9)) for z in Z}

    def test_deterministic(self):
        Z, _, _ = make_blobs()
        assert np.array_equal(kmeans_init(Z, 3, seed=7), kmeans_init(Z, 3, seed=7))

    def test_blob_centroids_near_empirical_means(self):
        Z, labels, _ = make_blobs()
        centroids = kmeans_init(Z, 3, seed=0)
        for c in range(3):
            blob_mean = Z[labels == c].mean(axis=0)
            assert np.linalg.norm(centroids - blob_mean, axis=1).min() < 0.1

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="at least"):
            kmeans_init(np.zeros((2, 3)), 5, seed=0)

    def test_k_bound(self):
        with pytest.raises(ValueError, match="k must be"):
            kmeans_init(np.zeros((5, 3)), 1, seed=0)


class TestClusteringHead:
    def test_blob_purity_after_training(self):
        Z, labels, _ = make_blobs()
        head = ClusteringHead(k=3, max_epochs=30, learning_rate=0.5, seed=0).fit(Z)
        assert cluster_purity(head.predict(Z), labels) >= 0.95

    def test_loss_decreases(self):
        Z, _, _ = make_blobs(spread=1.5)
        head = ClusteringHead(k=3, max_epochs=40, learning_rate=0.5, seed=0).fit(Z)
        assert head.loss_history_[-1] < head.loss_history_[0]

    def test_zero_epochs_keeps_kmeans_centroids(self):
        Z, _, _ = make_blobs()
        head = ClusteringHead(k=3, max_epochs=0, seed=3).fit(Z)
        assert np.array_equal(head.centroids_, kmeans_init(Z, 3, seed=3))
        assert head.loss_history_ == []

    def test_warm_start_continues_from_centroids(self):
        Z, _, _ = make_blobs(spread=1.0)
        head = ClusteringHead(k=3, max_epochs=5, learning_rate=0.5, seed=0,
                              warm_start=True).fit(Z)
        mid = head.centroids_.copy()
        n_first = len(head.loss_history_)
        head.fit(Z)
        assert len(head.loss_history_) == 2 * n_first
        assert not np.array_equal(head.centroids_, mid)

    def test_soft_assign_rows_sum_to_one(self):
        Z, _, _ = make_blobs(n_per=50)
        head = ClusteringHead(k=3, max_epochs=2, seed=0).fit(Z)
        q = head.soft_assign(Z)
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9)

    def test_predict_is_nearest_centroid(self):
        Z, _, _ = make_blobs(n_per=40)
        head = ClusteringHead(k=3, max_epochs=2, seed=0).fit(Z)
        d2 = ((Z[:, None, :] - head.centroids_[None]) ** 2).sum(axis=2)
        assert np.array_equal(head.predict(Z), d2.argmin(axis=1))


class TestPhaseTwoDriver:
    @staticmethod
    def fitted_ae(X, seed=0):
        return Autoencoder(hidden=(16,), latent_dim=4, learning_rate=0.1,
                           batch_size=16, max_epochs=10, seed=seed).fit(X)

    def test_frozen_encoder_bitwise_unchanged(self):
        rng = np.random.default_rng(8)
        X = rng.random((60, 30))
        ae = self.fitted_ae(X)
        before = ae.net_.param_vector()
        head = ClusteringHead(k=3, max_epochs=10, learning_rate=0.5, seed=0)
        train_embedded_clustering(ae, head, X)
        assert np.array_equal(ae.net_.param_vector(), before)

    def test_unfrozen_encoder_moves_but_decoder_does_not(self):
        rng = np.random.default_rng(9)
        X = rng.random((60, 30))
        ae = self.fitted_ae(X)
        enc_before = ae.encoder_.param_vector()
        dec_before = ae.decoder_.param_vector()
        head = ClusteringHead(k=3, max_epochs=10, learning_rate=0.5, seed=0)
        train_embedded_clustering(ae, head, X, unfreeze_encoder=True,
                                  encoder_learning_rate=0.01)
        assert not np.array_equal(ae.encoder_.param_vector(), enc_before)
        assert np.array_equal(ae.decoder_.param_vector(), dec_before)

    def test_latent_features_are_encoder_output(self):
        rng = np.random.default_rng(10)
        X = rng.random((20, 30))
        ae = self.fitted_ae(X)
        head = ClusteringHead(k=3, max_epochs=1, seed=0)
        train_embedded_clustering(ae, head, X)
        F = latent_features(ae, head, X)
        assert np.array_equal(F, ae.transform(X))
        assert F.shape == (20, 4)


class TestClusterPurity:
    def test_perfect_alignment(self):
        assert cluster_purity([0, 0, 1, 1], ["a", "a", "b", "b"]) == 1.0

    def test_mixed_cluster(self):
        assert cluster_purity([0, 0, 0, 0], ["a", "a", "a", "b"]) == 0.75
