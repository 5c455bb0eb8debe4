"""
Clustering evaluation: Hungarian-matched accuracy, NMI, silhouette,
Davies-Bouldin and Calinski-Harabasz, bundled into per-method reports.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import linear_sum_assignment
from sklearn import metrics as skm
from sklearn.metrics.cluster import contingency_matrix

from ..errors import UserError

logger = logging.getLogger(__name__)

METRICS = ("accuracy", "nmi", "silhouette", "dbi", "chi")
MAX_CLASSES = 64
CHI_CAP = 1e12


class MetricError(UserError):
    pass


@dataclass
class Assignment:
    """Predicted cluster ids with optional ground-truth labels."""
    cluster_ids: np.ndarray
    truth_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64).reshape(-1)
        if (self.cluster_ids < 0).any():
            raise MetricError("cluster ids must be nonnegative")
        if self.truth_labels is not None:
            self.truth_labels = np.asarray(self.truth_labels, dtype=np.int64).reshape(-1)
            if self.truth_labels.shape != self.cluster_ids.shape:
                raise MetricError(f"{self.cluster_ids.size} cluster ids but {self.truth_labels.size} labels")
            if (self.truth_labels < 0).any():
                raise MetricError("truth labels must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.cluster_ids.size)


class ClusterReport(BaseModel):
    """One table row. Absent metrics carry a reason."""
    method: str = ""
    n_items: int = 0
    n_clusters: int = 0
    accuracy: Optional[float] = None
    nmi: Optional[float] = None
    silhouette: Optional[float] = None
    dbi: Optional[float] = None
    chi: Optional[float] = None
    reasons: Dict[str, str] = Field(default_factory=dict)


class AggregateRow(BaseModel):
    """Mean and standard deviation of each metric across independent runs."""
    method: str
    runs: int
    mean: Dict[str, Optional[float]]
    std: Dict[str, Optional[float]]


def _require_truth(a: Assignment) -> np.ndarray:
    if a.n == 0:
        raise MetricError("empty assignment")
    if a.truth_labels is None:
        raise MetricError("truth labels required")
    return a.truth_labels


def hungarian_accuracy(a: Assignment) -> float:
    """Percent of items whose cluster maps to their label under the best one-to-one matching."""
    truth = _require_truth(a)
    table = contingency_matrix(truth, a.cluster_ids)
    if max(table.shape) > MAX_CLASSES:
        raise MetricError(f"at most {MAX_CLASSES} clusters and classes supported")
    rows, cols = linear_sum_assignment(table, maximize=True)
    return 100.0 * table[rows, cols].sum() / a.n


def nmi(a: Assignment) -> float:
    """Mutual information normalized by the geometric mean of the two entropies."""
    truth = _require_truth(a)
    value = skm.normalized_mutual_info_score(truth, a.cluster_ids, average_method="geometric")
    return float(np.clip(value, 0.0, 1.0))


def _geometry_inputs(points, cluster_ids) -> tuple:
    points = np.asarray(points, dtype=np.float64)
    ids = np.asarray(cluster_ids).reshape(-1)
    if points.ndim != 2 or points.shape[0] != ids.size:
        raise MetricError(f"points of shape {points.shape} do not match {ids.size} cluster ids")
    if np.unique(ids).size < 2:
        raise MetricError("undefined")
    return points, ids


def _centroids(points: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return np.stack([points[ids == k].mean(axis=0) for k in np.unique(ids)])


def _check_centroids(centroids: np.ndarray) -> None:
    gaps = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    if (gaps == 0).any():
        raise MetricError("degenerate centroids")


def silhouette(points, cluster_ids) -> float:
    """
    Mean silhouette coefficient (Euclidean). Points in singleton clusters score 0.

    Raises:
        MetricError: "undefined" with fewer than two clusters
    """
    points, ids = _geometry_inputs(points, cluster_ids)
    if np.unique(ids).size == ids.size:
        return 0.0
    return float(skm.silhouette_score(points, ids, metric="euclidean"))


def davies_bouldin(points, cluster_ids) -> float:
    """
    Raises:
        MetricError: "degenerate centroids" when two clusters share a centroid
    """
    points, ids = _geometry_inputs(points, cluster_ids)
    _check_centroids(_centroids(points, ids))
    return float(skm.davies_bouldin_score(points, ids))


def calinski_harabasz(points, cluster_ids) -> float:
    """
    Between- over within-cluster dispersion. Zero within-cluster scatter is
    reported as 1e12.

    Raises:
        MetricError: If N <= K
    """
    points, ids = _geometry_inputs(points, cluster_ids)
    clusters = np.unique(ids)
    if ids.size <= clusters.size:
        raise MetricError(f"need more points ({ids.size}) than clusters ({clusters.size})")

    centroids = _centroids(points, ids)
    within = sum(float(np.square(points[ids == k] - c).sum()) for k, c in zip(clusters, centroids))
    if within == 0:
        _check_centroids(centroids)
        return CHI_CAP
    return float(skm.calinski_harabasz_score(points, ids))


def evaluate(
    points,
    a: Assignment,
    n_clusters: Optional[int] = None,
    method: str = "",
) -> ClusterReport:
    """
    Compute every applicable metric. Degenerate cases are recorded in
    `reasons` instead of raising.

    Args:
        points: N x D vectors the geometry metrics are computed on
        a: Cluster ids and optional truth labels
        n_clusters: Configured cluster count; accuracy and NMI are only
            reported when it equals the number of label classes
        method: Row name for tables
    """
    n_clusters = n_clusters if n_clusters is not None else int(np.unique(a.cluster_ids).size)
    report = ClusterReport(method=method, n_items=a.n, n_clusters=n_clusters)

    if a.truth_labels is None:
        report.reasons["accuracy"] = report.reasons["nmi"] = "no truth labels"
    else:
        n_classes = int(np.unique(a.truth_labels).size)
        if n_classes != n_clusters:
            reason = f"{n_clusters} clusters vs {n_classes} label classes"
            report.reasons["accuracy"] = report.reasons["nmi"] = reason
        else:
            for name, metric in (("accuracy", hungarian_accuracy), ("nmi", nmi)):
                try:
                    setattr(report, name, metric(a))
                except MetricError as e:
                    report.reasons[name] = str(e)

    for name, metric in (("silhouette", silhouette), ("dbi", davies_bouldin), ("chi", calinski_harabasz)):
        try:
            setattr(report, name, metric(points, a.cluster_ids))
        except MetricError as e:
            logger.warning(f"{method or 'report'}: {name} not reported ({e})")
            report.reasons[name] = str(e)

    return report


def aggregate(reports: Sequence[ClusterReport], method: Optional[str] = None) -> AggregateRow:
    """Per-metric mean and population standard deviation over the runs that report it."""
    if not reports:
        raise MetricError("no reports to aggregate")
    mean: Dict[str, Optional[float]] = {}
    std: Dict[str, Optional[float]] = {}
    for name in METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean[name] = float(np.mean(values)) if values else None
        std[name] = float(np.std(values)) if values else None
    return AggregateRow(method=method or reports[0].method, runs=len(reports), mean=mean, std=std)


_HEADERS = ("Method", "Accuracy", "NMI", "Silhouette", "DBI", "CHI(x10^3)")
_SCALE = {"chi": 1e-3}


def _cell(value: Optional[float], spread: Optional[float], name: str) -> str:
    if value is None:
        return "--"
    scale = _SCALE.get(name, 1.0)
    text = f"{value * scale:.2f}"
    if spread is not None:
        text += f" ± {spread * scale:.2f}"
    return text


def render_table(rows: Sequence[Union[ClusterReport, AggregateRow]]) -> str:
    """Aligned plain-text table; absent values render as "--"."""
    lines: List[List[str]] = [list(_HEADERS)]
    for row in rows:
        if isinstance(row, AggregateRow):
            spreads = row.std if row.runs > 1 else {}
            cells = [_cell(row.mean[m], spreads.get(m), m) for m in METRICS]
        else:
            cells = [_cell(getattr(row, m), None, m) for m in METRICS]
        lines.append([row.method] + cells)

    widths = [max(len(line[i]) for line in lines) for i in range(len(_HEADERS))]
    rendered = []
    for n, line in enumerate(lines):
        rendered.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths))))
        if n == 0:
            rendered.append("  ".join("-" * w for w in widths))
    return "\n".join(rendered) + "\n"
