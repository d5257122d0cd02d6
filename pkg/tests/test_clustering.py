"""
Tests for device clustering over throughput profiles.
"""
import numpy as np
import pandas as pd
import pytest

from quantkern.bench.clustering import cluster_devices, elbow_table, log_features
from quantkern.bench.tuning import ThroughputMatrix
from quantkern.errors import EmptyColumn, KTooLarge

COLUMNS = ['small/decode/0', 'small/decode/2048', 'small/prefill512/0', 'large/decode/0', 'large/prefill512/0']


def _banded(rng, per_band=4, sparse=False):
    """Rows at 1000x, 100x and 10x scale; ``sparse`` drops one of the five cells of every row."""
    rows, names, bands = [], [], []
    for band, scale in zip(('high', 'mid', 'low'), (1000.0, 100.0, 10.0)):
        for i in range(per_band):
            rows.append(scale * rng.uniform(0.8, 1.2, len(COLUMNS)))
            names.append(f"{band}-{i}")
            bands.append(band)
    df = pd.DataFrame(rows, index=names, columns=COLUMNS)
    if sparse:
        mask = np.zeros(df.shape, dtype=bool)
        for i in range(len(df)):
            mask[i, rng.integers(1, len(COLUMNS))] = True
        df = df.mask(mask)
    return df, bands


def test_k_equal_to_device_count_gives_singletons(rng):
    df, _ = _banded(rng, per_band=2)
    result = cluster_devices(df, k=len(df))
    assert sorted(result.labels.tolist()) == list(range(len(df)))
    assert result.inertia == pytest.approx(0.0, abs=1e-12)


def test_duplicate_devices_cluster_together(rng):
    df, _ = _banded(rng, per_band=2)
    df.loc['copy'] = df.loc['mid-0']
    for k in range(1, len(df)):
        labels = cluster_devices(df, k=k).labels
        assert labels['copy'] == labels['mid-0']


def test_bands_are_recovered_with_missing_cells(rng):
    df, bands = _banded(rng, per_band=5, sparse=True)
    result = cluster_devices(ThroughputMatrix(df), k=3)
    assert result.frame()['band'].tolist() == bands
    assert not result.features.isna().any().any()


def test_inertia_never_increases(rng):
    df = pd.DataFrame(rng.lognormal(3.0, 1.5, (30, 6)))
    result = cluster_devices(df, k=4, n_init=1)
    history = np.array(result.inertia_history)
    assert len(history) <= 100
    assert np.all(np.diff(history) <= 1e-9 * max(history[0], 1.0))
    assert result.inertia == history[-1]


def test_clustering_is_deterministic(rng):
    df, _ = _banded(rng, sparse=True)
    first, second = cluster_devices(df, k=3, seed=5), cluster_devices(df, k=3, seed=5)
    assert first.labels.equals(second.labels)
    assert first.inertia == second.inertia


def test_median_imputation():
    df = pd.DataFrame({'a': [np.e - 1, np.nan, np.e ** 3 - 1]}, index=['x', 'y', 'z'])
    features = log_features(df)
    assert features.loc['y', 'a'] == pytest.approx(2.0)


def test_errors(rng):
    df, _ = _banded(rng, per_band=1)
    with pytest.raises(KTooLarge):
        cluster_devices(df, k=4)
    df['empty'] = np.nan
    with pytest.raises(EmptyColumn):
        cluster_devices(df, k=2)


def test_elbow_table_skips_large_k(rng):
    df, _ = _banded(rng, per_band=1)
    table = elbow_table(df, ks=(1, 2, 3, 4))
    assert table['k'].tolist() == [1, 2, 3]
    assert table['inertia'].iloc[-1] == pytest.approx(0.0, abs=1e-12)
