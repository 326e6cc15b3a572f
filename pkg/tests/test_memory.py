import numpy as np
import pytest

from grcl import model
from grcl.memory import (DomainMemory, EmptyMemoryError, EpisodicMemory,
                         kmeans, pseudo_label, sample_memory_batch,
                         select_episodic)
from grcl.model import ModelSpec, ParamVector, init_params, unpack

SPEC = ModelSpec(input_dim=2, hidden_dims=(8,), feature_dim=4, num_classes=3,
                 head_hidden_dim=4, key_dim=2)


def blobs(centers, n_per, sigma, seed):
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for c, center in enumerate(centers):
        points.append(center + sigma * rng.standard_normal((n_per, len(center))))
        labels.extend([c] * n_per)
    return np.vstack(points), np.array(labels)


class TestKmeans:
    def test_two_points_two_clusters(self):
        points = np.array([[0.0, 0.0], [5.0, 5.0]])
        assign, centroids = kmeans(points, 2, seed=0)
        assert sorted(assign) == [0, 1]
        assert {tuple(c) for c in centroids} == {(0.0, 0.0), (5.0, 5.0)}

    def test_k_one_gives_mean(self):
        rng = np.random.default_rng(1)
        points = rng.normal(size=(20, 3))
        assign, centroids = kmeans(points, 1, seed=0)
        assert np.all(assign == 0)
        np.testing.assert_allclose(centroids[0], points.mean(axis=0), atol=1e-12)

    def test_separated_blobs_pure(self):
        points, labels = blobs([[0, 0], [10, 0]], 100, 0.1, seed=2)
        assign, _ = kmeans(points, 2, seed=5)
        # purity 1.0: every cluster maps to exactly one blob
        for j in (0, 1):
            blob_ids = labels[assign == j]
            assert len(set(blob_ids)) == 1

    def test_deterministic_per_seed(self):
        points = np.random.default_rng(3).normal(size=(40, 2))
        a1, c1 = kmeans(points, 4, seed=9)
        a2, c2 = kmeans(points, 4, seed=9)
        assert np.array_equal(a1, a2) and np.array_equal(c1, c2)

    def test_permutation_equivariance(self):
        points, _ = blobs([[0, 0], [8, 0], [0, 8]], 30, 0.2, seed=4)
        perm = np.random.default_rng(5).permutation(len(points))
        a, _ = kmeans(points, 3, seed=11)
        a_perm, _ = kmeans(points[perm], 3, seed=11)
        assert np.array_equal(a[perm], a_perm)

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4, seed=0)
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 0, seed=0)


class TestPseudoLabel:
    def test_constant_predictions_constant_labels(self):
        # zero weights except a classifier bias pushing class 2
        params = ParamVector(np.zeros(SPEC.param_count), SPEC)
        unpack(params)["cls_b"][:] = [0.0, 0.0, 1.0]
        samples = np.random.default_rng(0).normal(size=(30, 2))
        labels = pseudo_label(params, samples, SPEC.num_classes, seed=1)
        assert np.all(labels == 2)

    def test_accurate_model_recovers_true_labels(self):
        centers = [[4, 0], [-2, 3.5], [-2, -3.5]]
        samples, truth = blobs(centers, 40, 0.2, seed=6)
        params = _train_toy_classifier(samples, truth)
        labels = pseudo_label(params, samples, 3, seed=3)
        assert np.array_equal(labels, truth)

    def test_permutation_consistency(self):
        centers = [[4, 0], [-2, 3.5], [-2, -3.5]]
        samples, truth = blobs(centers, 25, 0.2, seed=7)
        params = _train_toy_classifier(samples, truth)
        perm = np.random.default_rng(8).permutation(len(samples))
        labels = pseudo_label(params, samples, 3, seed=5)
        labels_perm = pseudo_label(params, samples[perm], 3, seed=5)
        assert np.array_equal(labels[perm], labels_perm)

    def test_labels_in_range(self):
        params = init_params(SPEC, 1)
        samples = np.random.default_rng(2).normal(size=(40, 2))
        labels = pseudo_label(params, samples, 3, seed=0)
        assert labels.min() >= 0 and labels.max() < 3


def _train_toy_classifier(X, y, steps=300, lr=0.3):
    params = init_params(SPEC, 12)
    batch = model.Batch(X, y)
    for _ in range(steps):
        _, grad = model.ce_loss_and_grad(params, batch)
        params = model.sgd_step(params, grad, lr)
    return params


class TestSelectEpisodic:
    def test_capacity_covers_everything(self):
        params = init_params(SPEC, 0)
        samples = np.random.default_rng(1).normal(size=(10, 2))
        em = select_episodic(params, 1, samples, capacity=50, seed=0)
        assert len(em) == 10

    def test_top_confidence_wins(self):
        # pass-through encoder plus a single sharp classifier weight: one
        # engineered sample gets extreme confidence, the rest are uniform
        params = ParamVector(np.zeros(SPEC.param_count), SPEC)
        p = unpack(params)
        p["enc0_W"][:] = np.eye(2, 8)
        p["enc1_W"][:] = np.eye(8, 4)
        p["cls_W"][0, 0] = 5.0
        samples = np.vstack([[10.0, 0.0], np.zeros((5, 2))])
        em = select_episodic(params, 1, samples, capacity=3, seed=0,
                             class_balanced=False)
        assert len(em) == 3
        assert any(np.array_equal(s, [10.0, 0.0]) for s in em.samples)
        assert em.confidences.max() == pytest.approx(1.0, abs=1e-6)

    def test_class_balanced_split(self):
        centers = [[4, 0], [-2, 3.5], [-2, -3.5]]
        samples, truth = blobs(centers, 30, 0.2, seed=9)
        params = _train_toy_classifier(samples, truth)
        em = select_episodic(params, 1, samples, capacity=12, seed=0)
        assert len(em) == 12
        _, logits = model.forward(params, em.samples)
        preds = logits.argmax(axis=1)
        counts = np.bincount(preds, minlength=3)
        assert counts.tolist() == [4, 4, 4]

    def test_output_size_is_min(self):
        params = init_params(SPEC, 3)
        samples = np.random.default_rng(4).normal(size=(40, 2))
        assert len(select_episodic(params, 1, samples, 16, seed=0)) == 16
        assert len(select_episodic(params, 1, samples, 100, seed=0)) == 40

    def test_capacity_below_classes_rejected(self):
        params = init_params(SPEC, 0)
        with pytest.raises(ValueError):
            select_episodic(params, 1, np.zeros((5, 2)), capacity=2, seed=0)


class TestDomainMemory:
    def _em(self, domain_id, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return EpisodicMemory(domain_id, rng.normal(size=(n, 2)),
                              rng.integers(0, 3, n), rng.uniform(0, 1, n))

    def test_union_size(self):
        mem = DomainMemory()
        mem.add(self._em(1, 4))
        mem.add(self._em(2, 6))
        assert len(mem) == 10

    def test_ids_strictly_increasing(self):
        mem = DomainMemory()
        mem.add(self._em(1))
        with pytest.raises(ValueError):
            mem.add(self._em(1))

    def test_csv_round_trip(self, tmp_path):
        mem = DomainMemory()
        mem.add(self._em(1, 3, seed=1))
        mem.add(self._em(3, 5, seed=2))
        path = tmp_path / "memory.csv"
        mem.save_csv(path)
        loaded = DomainMemory.load_csv(path)
        assert [em.domain_id for em in loaded.episodic] == [1, 3]
        np.testing.assert_array_equal(loaded.union_samples(), mem.union_samples())
        np.testing.assert_array_equal(loaded.union_labels(), mem.union_labels())


class TestSampleMemoryBatch:
    def _memory(self):
        mem = DomainMemory()
        rng = np.random.default_rng(0)
        for d, n in ((1, 6), (2, 4)):
            mem.add(EpisodicMemory(d, rng.normal(size=(n, 2)),
                                   rng.integers(0, 3, n), rng.uniform(0, 1, n)))
        return mem

    def test_full_draw_returns_everything(self):
        mem = self._memory()
        batch = sample_memory_batch(mem, 10, seed=0)
        assert sorted(map(tuple, batch.inputs)) == \
            sorted(map(tuple, mem.union_samples()))

    def test_deterministic_per_seed(self):
        mem = self._memory()
        b1 = sample_memory_batch(mem, 5, seed=4)
        b2 = sample_memory_batch(mem, 5, seed=4)
        assert np.array_equal(b1.inputs, b2.inputs)
        assert np.array_equal(b1.labels, b2.labels)

    def test_replacement_when_small(self):
        mem = self._memory()
        batch = sample_memory_batch(mem, 25, seed=1)
        assert len(batch) == 25

    def test_empty_memory_raises(self):
        with pytest.raises(EmptyMemoryError):
            sample_memory_batch(DomainMemory(), 4, seed=0)

    def test_uniform_inclusion_frequency(self):
        mem = self._memory()
        X = mem.union_samples()
        counts = np.zeros(len(X))
        draws = 10000
        rng = np.random.default_rng(7)
        index = {tuple(x): i for i, x in enumerate(X)}
        for _ in range(draws):
            batch = sample_memory_batch(mem, 3, rng)
            for row in batch.inputs:
                counts[index[tuple(row)]] += 1
        p = 3 / len(X)
        sigma = np.sqrt(p * (1 - p) / draws)
        np.testing.assert_allclose(counts / draws, p, atol=3.5 * sigma)
