"""
Device clustering over benchmark throughput.

Features are log1p(throughput) per (model, phase, kv_depth) column, with
missing cells imputed by the column median. Clusters come from Lloyd
iterations seeded with k-means++; the inertia of every iteration is kept so
callers can check convergence.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.impute import SimpleImputer

from quantkern.bench.tuning import ThroughputMatrix
from quantkern.errors import EmptyColumn, KTooLarge

# Configure module logger
logger = logging.getLogger(__name__)

DEFAULT_SEED = 42
MAX_ITER = 100
BAND_NAMES = ('high', 'mid', 'low')


@dataclass
class ClusterResult:
    """
    Cluster assignment of every device.

    Clusters are numbered by descending mean log-throughput of their center.

    Attributes:
        labels: Cluster id per device
        inertia: Final within-cluster sum of squares
        inertia_history: Inertia after every iteration of the winning run
        centers: Cluster centers in feature space
        features: Imputed log1p features
        names: ``high``/``mid``/``low`` per cluster id when k == 3
    """

    labels: pd.Series
    inertia: float
    inertia_history: List[float]
    centers: np.ndarray
    features: pd.DataFrame
    names: Dict[int, str] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame({'device': self.labels.index, 'cluster': self.labels.values})
        if self.names:
            df['band'] = df['cluster'].map(self.names)
        return df


def _frame(matrix: Union[ThroughputMatrix, pd.DataFrame]) -> pd.DataFrame:
    return matrix.frame if isinstance(matrix, ThroughputMatrix) else matrix.astype(float)


def log_features(matrix: Union[ThroughputMatrix, pd.DataFrame]) -> pd.DataFrame:
    """
    log1p features with per-column median imputation.

    Raises:
        EmptyColumn: A column has no measured cell
    """
    df = _frame(matrix)
    empty = [str(c) for c in df.columns if df[c].isna().all()]
    if empty:
        raise EmptyColumn(f"Columns without any measurement: {empty}")
    logged = np.log1p(df.to_numpy(dtype=float))
    imputed = SimpleImputer(missing_values=np.nan, strategy='median').fit_transform(logged)
    return pd.DataFrame(imputed, index=df.index, columns=df.columns)


def _lloyd(x: np.ndarray, k: int, seed: int, max_iter: int):
    centers, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    history: List[float] = []
    labels = None
    for _ in range(max_iter):
        model = KMeans(n_clusters=k, init=centers, n_init=1, max_iter=1, random_state=seed).fit(x)
        history.append(float(model.inertia_))
        converged = labels is not None and np.array_equal(labels, model.labels_)
        labels, centers = model.labels_, model.cluster_centers_
        if converged:
            break
    return labels, centers, history


def cluster_devices(
    matrix: Union[ThroughputMatrix, pd.DataFrame],
    k: int,
    seed: int = DEFAULT_SEED,
    n_init: int = 10,
    max_iter: int = MAX_ITER,
) -> ClusterResult:
    """
    Group devices with similar throughput profiles.

    Args:
        matrix: Devices x (model, phase, kv_depth) throughput, NaN for missing cells
        k: Number of clusters
        seed: Random seed of the k-means++ initializations
        n_init: Initializations tried; the lowest final inertia wins
        max_iter: Iteration cap per initialization

    Returns:
        ClusterResult

    Raises:
        KTooLarge: k exceeds the number of devices
        EmptyColumn: A column has no measured cell
    """
    features = log_features(matrix)
    n = len(features)
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} needs between 1 and {n} devices")
    x = features.to_numpy()

    best = None
    for run in range(n_init):
        labels, centers, history = _lloyd(x, k, seed + run, max_iter)
        if best is None or history[-1] < best[2][-1] - 1e-12:
            best = (labels, centers, history)
    labels, centers, history = best

    # renumber clusters by descending center mean
    order = np.argsort(-centers.mean(axis=1), kind='stable')
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    labels = remap[labels]
    centers = centers[order]

    names = {i: BAND_NAMES[i] for i in range(k)} if k == len(BAND_NAMES) else {}
    result = ClusterResult(
        labels=pd.Series(labels, index=features.index, name='cluster'),
        inertia=history[-1],
        inertia_history=history,
        centers=centers,
        features=features,
        names=names,
    )
    logger.info(f"Clustered {n} devices into {k} groups, inertia {result.inertia:.4f} "
                f"after {len(history)} iterations")
    return result


def elbow_table(
    matrix: Union[ThroughputMatrix, pd.DataFrame],
    ks: Sequence[int] = (2, 3, 4, 5),
    seed: int = DEFAULT_SEED,
) -> pd.DataFrame:
    """Final inertia for every k that does not exceed the device count."""
    n = len(_frame(matrix))
    rows = [{'k': k, 'inertia': cluster_devices(matrix, k, seed=seed).inertia} for k in ks if k <= n]
    return pd.DataFrame(rows, columns=['k', 'inertia'])
