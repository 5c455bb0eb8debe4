import itertools
import math

import numpy as np
import pytest

from catvac.services.metrics import (
    CHI_CAP,
    AggregateRow,
    Assignment,
    ClusterReport,
    MetricError,
    aggregate,
    calinski_harabasz,
    davies_bouldin,
    evaluate,
    hungarian_accuracy,
    nmi,
    render_table,
    silhouette,
)

FOUR_POINTS = np.array([[0.0], [2.0], [10.0], [12.0]])
TWO_GROUPS = np.array([0, 0, 1, 1])


def _brute_force_accuracy(truth, clusters, k):
    best = max(sum(int(perm[c] == t) for t, c in zip(truth, clusters)) for perm in itertools.permutations(range(k)))
    return 100.0 * best / len(truth)


def _naive_silhouette(points, ids):
    scores = []
    for i, p in enumerate(points):
        same = ids == ids[i]
        if same.sum() == 1:
            scores.append(0.0)
            continue
        distances = np.linalg.norm(points - p, axis=1)
        a = distances[same].sum() / (same.sum() - 1)
        b = min(distances[ids == other].mean() for other in np.unique(ids) if other != ids[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def _naive_davies_bouldin(points, ids):
    clusters = np.unique(ids)
    centroids = np.array([points[ids == c].mean(axis=0) for c in clusters])
    scatter = np.array([np.linalg.norm(points[ids == c] - centroids[i], axis=1).mean() for i, c in enumerate(clusters)])
    ratios = []
    for i in range(len(clusters)):
        ratios.append(max((scatter[i] + scatter[j]) / np.linalg.norm(centroids[i] - centroids[j])
                          for j in range(len(clusters)) if j != i))
    return float(np.mean(ratios))


def _naive_calinski_harabasz(points, ids):
    clusters = np.unique(ids)
    center = points.mean(axis=0)
    between = sum((ids == c).sum() * np.sum((points[ids == c].mean(axis=0) - center) ** 2) for c in clusters)
    within = sum(np.sum((points[ids == c] - points[ids == c].mean(axis=0)) ** 2) for c in clusters)
    n, k = len(points), len(clusters)
    return float((between / (k - 1)) / (within / (n - k)))


def _random_instances(seed, count=100):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(10, 51))
        k = int(rng.integers(2, 6))
        ids = rng.permutation(np.arange(n) % k)
        points = rng.normal(size=(n, int(rng.integers(1, 5)))) + ids[:, None]
        yield points, ids


class TestHungarianAccuracy:

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(5, 40))
            truth = rng.integers(0, k, n)
            clusters = rng.integers(0, k, n)
            got = hungarian_accuracy(Assignment(clusters, truth))
            assert got == pytest.approx(_brute_force_accuracy(truth, clusters, k))

    def test_relabeling_is_free(self):
        truth = np.array([0, 0, 1, 1, 2, 2])
        assert hungarian_accuracy(Assignment([2, 2, 0, 0, 1, 1], truth)) == 100.0

    def test_requires_labels(self):
        with pytest.raises(MetricError, match="truth labels required"):
            hungarian_accuracy(Assignment([0, 1]))

    def test_empty(self):
        with pytest.raises(MetricError, match="empty assignment"):
            hungarian_accuracy(Assignment([], []))


class TestNmi:

    def test_oracle_table(self):
        truth = [0] * 6 + [1] * 6
        clusters = [0] * 5 + [1] + [0] + [1] * 5
        mi = 2 * (5 / 12) * math.log((5 / 12) / 0.25) + 2 * (1 / 12) * math.log((1 / 12) / 0.25)
        assert nmi(Assignment(clusters, truth)) == pytest.approx(mi / math.log(2), rel=1e-9)
        assert nmi(Assignment(clusters, truth)) == pytest.approx(0.35, abs=1e-3)

    def test_perfect_up_to_relabeling(self):
        assert nmi(Assignment([1, 1, 0, 0, 2], [0, 0, 1, 1, 2])) == pytest.approx(1.0)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        x, y = rng.integers(0, 4, 50), rng.integers(0, 3, 50)
        assert nmi(Assignment(x, y)) == pytest.approx(nmi(Assignment(y, x)))

    def test_within_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            value = nmi(Assignment(rng.integers(0, 5, 30), rng.integers(0, 5, 30)))
            assert 0.0 <= value <= 1.0


class TestSilhouette:

    def test_hand_case(self):
        expected = np.mean([1 - 2 / 11, 1 - 2 / 9, 1 - 2 / 9, 1 - 2 / 11])
        assert silhouette(FOUR_POINTS, TWO_GROUPS) == pytest.approx(expected)

    def test_matches_naive_definition(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(40, 3))
        ids = rng.integers(0, 4, 40)
        ids[0] = 4
        assert silhouette(points, ids) == pytest.approx(_naive_silhouette(points, ids))

    def test_random_instances_match_naive_definition(self):
        for points, ids in _random_instances(9):
            assert silhouette(points, ids) == pytest.approx(_naive_silhouette(points, ids), rel=1e-6, abs=1e-12)

    def test_all_singletons(self):
        assert silhouette(np.eye(3), [0, 1, 2]) == 0.0

    def test_single_cluster(self):
        with pytest.raises(MetricError, match="undefined"):
            silhouette(np.eye(3), [0, 0, 0])

    def test_invariances(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(30, 2))
        ids = rng.integers(0, 3, 30)
        base = silhouette(points, ids)
        assert silhouette(points * 7.0 + 3.0, ids) == pytest.approx(base)
        assert silhouette(points, (ids + 1) % 3) == pytest.approx(base)


class TestDaviesBouldin:

    def test_hand_case(self):
        assert davies_bouldin(FOUR_POINTS, TWO_GROUPS) == pytest.approx(0.2)

    def test_random_instances_match_naive_definition(self):
        for points, ids in _random_instances(10):
            assert davies_bouldin(points, ids) == pytest.approx(_naive_davies_bouldin(points, ids), rel=1e-6, abs=1e-12)

    def test_coincident_centroids(self):
        with pytest.raises(MetricError, match="degenerate centroids"):
            davies_bouldin(np.array([[-1.0], [1.0], [0.0], [0.0]]), TWO_GROUPS)

    def test_scale_invariant(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(30, 2))
        ids = rng.integers(0, 3, 30)
        assert davies_bouldin(points * 4.0, ids) == pytest.approx(davies_bouldin(points, ids))


class TestCalinskiHarabasz:

    def test_hand_case(self):
        assert calinski_harabasz(FOUR_POINTS, TWO_GROUPS) == pytest.approx(50.0)

    def test_random_instances_match_naive_definition(self):
        for points, ids in _random_instances(11):
            assert calinski_harabasz(points, ids) == pytest.approx(_naive_calinski_harabasz(points, ids), rel=1e-6, abs=1e-12)

    def test_zero_within_scatter(self):
        points = np.array([[0.0], [0.0], [5.0], [5.0]])
        assert calinski_harabasz(points, TWO_GROUPS) == CHI_CAP

    def test_needs_more_points_than_clusters(self):
        with pytest.raises(MetricError):
            calinski_harabasz(np.array([[0.0], [1.0]]), [0, 1])

    def test_scale_invariant(self):
        rng = np.random.default_rng(6)
        points = rng.normal(size=(30, 2))
        ids = rng.integers(0, 3, 30)
        assert calinski_harabasz(points * 0.1, ids) == pytest.approx(calinski_harabasz(points, ids))


class TestEvaluate:

    def test_full_report(self):
        report = evaluate(FOUR_POINTS, Assignment(TWO_GROUPS, [1, 1, 0, 0]), n_clusters=2, method="toy")
        assert report.method == "toy"
        assert report.accuracy == 100.0
        assert report.nmi == pytest.approx(1.0)
        assert report.dbi == pytest.approx(0.2)
        assert report.chi == pytest.approx(50.0)
        assert report.reasons == {}

    def test_cluster_count_differs_from_classes(self):
        report = evaluate(FOUR_POINTS, Assignment(TWO_GROUPS, [0, 1, 2, 2]), n_clusters=2)
        assert report.accuracy is None and report.nmi is None
        assert "label classes" in report.reasons["accuracy"]
        assert report.silhouette is not None

    def test_without_labels(self):
        report = evaluate(FOUR_POINTS, Assignment(TWO_GROUPS))
        assert report.reasons["accuracy"] == "no truth labels"
        assert report.n_clusters == 2

    def test_degenerate_geometry_is_recorded(self):
        report = evaluate(FOUR_POINTS, Assignment([0, 0, 0, 0], [0, 0, 0, 0]), n_clusters=1)
        assert report.accuracy == 100.0
        assert report.silhouette is None
        assert report.reasons["silhouette"] == "undefined"

    def test_perfect_clusters(self):
        rng = np.random.default_rng(7)
        centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        labels = np.repeat(np.arange(3), 30)
        points = centers[labels] + rng.normal(scale=0.1, size=(90, 2))
        report = evaluate(points, Assignment((labels + 1) % 3, labels), n_clusters=3)
        assert report.accuracy == 100.0
        assert report.nmi == pytest.approx(1.0)
        assert report.silhouette > 0.99

    def test_labels_on_overlapping_data(self):
        rng = np.random.default_rng(8)
        labels = np.repeat(np.arange(3), 50)
        points = rng.normal(size=(150, 4))
        report = evaluate(points, Assignment(labels, labels), n_clusters=3)
        assert report.silhouette < 0.05

    def test_mismatched_lengths(self):
        with pytest.raises(MetricError):
            Assignment([0, 1, 1], [0, 1])


class TestAggregateAndTable:

    def test_mean_and_std(self):
        reports = [ClusterReport(method="cvae", accuracy=80.0, chi=2000.0),
                   ClusterReport(method="cvae", accuracy=90.0)]
        row = aggregate(reports)
        assert row.method == "cvae"
        assert row.runs == 2
        assert row.mean["accuracy"] == pytest.approx(85.0)
        assert row.std["accuracy"] == pytest.approx(5.0)
        assert row.mean["chi"] == pytest.approx(2000.0)
        assert row.mean["nmi"] is None

    def test_empty(self):
        with pytest.raises(MetricError):
            aggregate([])

    def test_render(self):
        rows = [
            ClusterReport(method="kmeans", accuracy=71.234, nmi=0.5, silhouette=0.1, dbi=1.5, chi=12340.0),
            AggregateRow(method="cvae", runs=3,
                         mean={"accuracy": 90.0, "nmi": 0.8, "silhouette": 0.6, "dbi": None, "chi": 5000.0},
                         std={"accuracy": 1.5, "nmi": 0.01, "silhouette": 0.02, "dbi": None, "chi": 100.0}),
        ]
        lines = render_table(rows).splitlines()
        assert lines[0].split() == ["Method", "Accuracy", "NMI", "Silhouette", "DBI", "CHI(x10^3)"]
        assert "71.23" in lines[2] and "12.34" in lines[2]
        assert "90.00 ± 1.50" in lines[3]
        assert "--" in lines[3]
        assert len({len(line) for line in lines}) == 1
