import numpy as np
import pytest

from metafn import tasks
from metafn.errors import DimensionMismatch, InsufficientData
from metafn.tasks import TaskDistribution, sample_episode, scenario_pair


class TestSinusoid:
    def test_support_on_curve(self):
        dist = TaskDistribution(kind="sinusoid", seed=1)
        ep = sample_episode(dist, 1, 5, 15, np.random.default_rng(2))
        a, phi = ep.task_info["amplitude"], ep.task_info["phase"]
        assert 0.1 <= a <= 5.0 and 0.0 <= phi <= np.pi
        np.testing.assert_allclose(ep.support_y, a * np.sin(ep.support_x[:, 0] + phi))
        np.testing.assert_allclose(ep.query_y, a * np.sin(ep.query_x[:, 0] + phi))
        assert ep.support_x.shape == (5, 1) and ep.query_x.shape == (15, 1)
        assert ep.kind == "regression"


class TestBlobs:
    def test_nearest_centroid_separable(self):
        centers = np.array([[0.0, 0.0], [10.0, 0.0]])  # 10 sigma apart at std 1
        dist = TaskDistribution(kind="gaussian_blobs", seed=0, centers=centers, cluster_std=1.0)
        rng = np.random.default_rng(3)
        correct = total = 0
        for _ in range(50):
            ep = sample_episode(dist, 2, 1, 15, rng)
            centroids = np.stack(
                [ep.support_x[ep.support_y == c].mean(axis=0) for c in range(2)]
            )
            d = ((ep.query_x[:, None, :] - centroids[None]) ** 2).sum(-1)
            correct += int(np.sum(np.argmin(d, axis=1) == ep.query_y))
            total += ep.query_y.size
        assert correct == total

    def test_counts_and_label_range(self):
        dist = TaskDistribution(kind="gaussian_blobs", seed=5, n_classes=12)
        ep = sample_episode(dist, 4, 3, 7, np.random.default_rng(1))
        assert ep.support_x.shape == (12, 2) and ep.query_x.shape == (28, 2)
        for c in range(4):
            assert np.sum(ep.support_y == c) == 3
            assert np.sum(ep.query_y == c) == 7

    def test_insufficient_classes(self):
        dist = TaskDistribution(kind="gaussian_blobs", seed=0, n_classes=3)
        with pytest.raises(InsufficientData):
            sample_episode(dist, 5, 1, 5, np.random.default_rng(0))


class TestDeterminism:
    @pytest.mark.parametrize("kind", ["sinusoid", "gaussian_blobs"])
    def test_identical_seed_identical_stream(self, kind):
        def stream():
            dist = TaskDistribution(kind=kind, seed=9)
            rng = np.random.default_rng(10)
            n_way = 1 if kind == "sinusoid" else 3
            return [sample_episode(dist, n_way, 2, 4, rng) for _ in range(20)]

        for a, b in zip(stream(), stream()):
            assert a.content_hash() == b.content_hash()

    def test_different_seed_differs(self):
        d1 = TaskDistribution(kind="gaussian_blobs", seed=1)
        d2 = TaskDistribution(kind="gaussian_blobs", seed=2)
        assert not np.array_equal(d1.centers, d2.centers)


class TestDisjointness:
    def test_support_query_disjoint_1000_episodes(self):
        dist = TaskDistribution(kind="gaussian_blobs", seed=4, n_classes=16)
        rng = np.random.default_rng(6)
        for _ in range(1000):
            ep = sample_episode(dist, 3, 2, 3, rng)
            s = {tuple(row) for row in ep.support_x}
            q = {tuple(row) for row in ep.query_x}
            assert not s & q


class TestPermutationUniformity:
    def test_chi_square_over_10k_episodes(self):
        from scipy.stats import chisquare

        dist = TaskDistribution(kind="gaussian_blobs", seed=7, n_classes=10)
        rng = np.random.default_rng(8)
        from itertools import permutations

        index = {p: i for i, p in enumerate(permutations(range(3)))}
        counts = np.zeros(6)
        for _ in range(10_000):
            ep = sample_episode(dist, 3, 1, 1, rng)
            counts[index[tuple(ep.task_info["labels"])]] += 1
        assert chisquare(counts).pvalue > 0.001


class TestScenarioPair:
    def test_general_to_specific(self):
        g = TaskDistribution(kind="gaussian_blobs", seed=1, center_spread=5.0)
        s = TaskDistribution(kind="gaussian_blobs", seed=2, center_spread=1.0, cluster_std=0.3)
        spec = scenario_pair(g, s)
        assert spec.train is g and spec.test is s

    def test_reversed(self):
        g = TaskDistribution(kind="gaussian_blobs", seed=1)
        s = TaskDistribution(kind="gaussian_blobs", seed=2, cluster_std=0.3)
        spec = scenario_pair(s, g)
        assert spec.train is s

    def test_dimension_mismatch(self):
        a = TaskDistribution(kind="gaussian_blobs", seed=1, dim=2)
        b = TaskDistribution(kind="gaussian_blobs", seed=1, dim=3)
        with pytest.raises(DimensionMismatch):
            scenario_pair(a, b)

    def test_kind_mismatch(self):
        a = TaskDistribution(kind="sinusoid")
        b = TaskDistribution(kind="gaussian_blobs", dim=1)
        with pytest.raises(DimensionMismatch):
            scenario_pair(a, b)


class TestImageFolder:
    @pytest.fixture
    def image_root(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(0)
        for cls in ("a", "b", "c"):
            d = tmp_path / cls
            d.mkdir()
            for i in range(4):
                arr = rng.integers(0, 256, size=(20, 20), dtype=np.uint8)
                Image.fromarray(arr, mode="L").save(d / f"{i}.png")
        return str(tmp_path)

    def test_episode_shapes(self, image_root):
        dist = TaskDistribution(kind="image_folder", root=image_root)
        ep = sample_episode(dist, 2, 1, 2, np.random.default_rng(1))
        assert ep.support_x.shape == (2, 28 * 28)
        assert ep.query_x.shape == (4, 28 * 28)
        assert ep.support_x.min() >= 0.0 and ep.support_x.max() <= 1.0

    def test_insufficient_images(self, image_root):
        dist = TaskDistribution(kind="image_folder", root=image_root)
        with pytest.raises(InsufficientData):
            sample_episode(dist, 3, 3, 3, np.random.default_rng(1))
