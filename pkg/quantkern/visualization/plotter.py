"""
Plotter module for benchmark, breakdown, tuning and clustering charts.
"""
import os
import logging
from typing import List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from quantkern.kernels.types import CATEGORIES

# Configure module logger
logger = logging.getLogger(__name__)


class BenchPlotter:
    """Class for creating charts of benchmark results."""

    def __init__(self, output_dir: str = 'plots'):
        """
        Initialize the plotter.

        Args:
            output_dir: Directory to save plots
        """
        self.output_dir = output_dir

        # Create output directory if it doesn't exist
        if not os.path.exists(output_dir):
            os.makedirs(output_dir)

    def _save(self, filename: str) -> str:
        path = os.path.join(self.output_dir, filename)
        plt.tight_layout()
        plt.savefig(path)
        plt.close()
        logger.debug(f"Saved {path}")
        return path

    def plot_throughput(self, rows: pd.DataFrame) -> str:
        """
        Bar chart of mean throughput per workload with min/max whiskers.

        Args:
            rows: Benchmark rows in the CSV schema
        """
        summary = rows.groupby(['device', 'workload'])['throughput'].agg(['mean', 'min', 'max']).reset_index()
        labels = [f"{d}\n{w}" for d, w in zip(summary['device'], summary['workload'])]
        err = np.vstack([summary['mean'] - summary['min'], summary['max'] - summary['mean']])

        plt.figure(figsize=(max(6, 1.8 * len(labels)), 6))
        plt.bar(range(len(labels)), summary['mean'], yerr=err, capsize=4)
        plt.xticks(range(len(labels)), labels, rotation=30, ha='right', fontsize=8)
        plt.ylabel('Tokens / s')
        plt.title('Throughput')
        plt.grid(True, axis='y')
        return self._save('throughput.png')

    def plot_breakdown(self, frame: pd.DataFrame, title: str = 'Kernel time by category') -> str:
        """
        Stacked percentage bars, one per row of ``frame``.

        Args:
            frame: One row per run with a column per category and a ``kv_depth`` column
        """
        labels = [f"kv={d}" for d in frame['kv_depth']] if 'kv_depth' in frame else [str(i) for i in frame.index]
        bottom = np.zeros(len(frame))
        plt.figure(figsize=(8, 6))
        for category in CATEGORIES:
            values = frame[category].to_numpy(dtype=float)
            plt.bar(labels, values, bottom=bottom, label=category)
            bottom += values
        coarse = bool(frame['coarse'].any()) if 'coarse' in frame else False
        plt.title(title + (' (coarse)' if coarse else ''))
        plt.ylabel('Percent of measured time')
        plt.ylim(0, 100)
        plt.legend()
        return self._save('breakdown.png')

    def plot_tuning(self, rows: pd.DataFrame, top: int = 20) -> str:
        """Horizontal bars of the fastest configurations per device."""
        means = rows.groupby(['device', 'config'])['throughput'].mean().reset_index()
        best = means.sort_values('throughput', ascending=False).groupby('device').head(top)
        plt.figure(figsize=(10, max(4, 0.3 * len(best))))
        for device, group in best.groupby('device'):
            plt.barh(group['config'], group['throughput'], label=device)
        plt.xlabel('Tokens / s')
        plt.title('Tuning sweep')
        plt.legend()
        plt.yticks(fontsize=7)
        return self._save('tuning.png')

    def plot_elbow(self, elbow: pd.DataFrame) -> str:
        plt.figure(figsize=(8, 5))
        plt.plot(elbow['k'], elbow['inertia'], marker='o')
        plt.title('K-means inertia')
        plt.xlabel('k')
        plt.ylabel('Inertia')
        plt.xticks(elbow['k'])
        plt.grid(True)
        return self._save('elbow.png')

    def plot_clusters(self, features: pd.DataFrame, labels: pd.Series, names: Optional[dict] = None) -> str:
        """
        Devices on their first two principal axes, colored by cluster.

        Args:
            features: Imputed log1p features per device
            labels: Cluster id per device
            names: Optional display name per cluster id
        """
        x = features.to_numpy(dtype=float)
        x = x - x.mean(axis=0)
        if x.shape[1] >= 2 and x.shape[0] >= 2:
            _, _, vt = np.linalg.svd(x, full_matrices=False)
            coords = x @ vt[:2].T
        else:
            coords = np.column_stack([x[:, 0], np.zeros(len(x))])

        plt.figure(figsize=(8, 6))
        for cluster in sorted(labels.unique()):
            mask = (labels == cluster).to_numpy()
            label = (names or {}).get(cluster, f"cluster {cluster}")
            plt.scatter(coords[mask, 0], coords[mask, 1], label=label)
        for (px, py), device in zip(coords, features.index):
            plt.annotate(str(device), (px, py), fontsize=7)
        plt.title('Device clusters (log1p throughput)')
        plt.legend()
        plt.grid(True)
        return self._save('clusters.png')

    def plot_all(self, rows: Optional[pd.DataFrame] = None, breakdown: Optional[pd.DataFrame] = None) -> List[str]:
        """Every chart the given frames support."""
        paths = []
        if rows is not None and not rows.empty:
            paths.append(self.plot_throughput(rows))
        if breakdown is not None and not breakdown.empty:
            paths.append(self.plot_breakdown(breakdown))
        logger.info(f"Created {len(paths)} charts in '{self.output_dir}'")
        return paths

