"""K-means speech-unit codebooks and nearest-centroid quantization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.cluster.vq import kmeans2

UNIT_RATE = 50
DEFAULT_K = 200


class UnitError(ValueError):
    pass


@dataclass(frozen=True)
class UnitCodebook:
    centroids: np.ndarray  # K x D

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class SpeechUnits:
    ids: np.ndarray
    rate: int = UNIT_RATE

    def __len__(self):
        return len(self.ids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def train_unit_quantizer(
    features: Iterable[np.ndarray] | np.ndarray,
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iter: int = 100,
) -> UnitCodebook:
    """K-means (``scipy.cluster.vq.kmeans2``) with k-means++ seeding.

    Runs ``max_iter`` Lloyd iterations.  A cluster that empties keeps its
    previous centroid.
    """
    if isinstance(features, np.ndarray) and features.ndim == 2:
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
    if x.shape[0] < k:
        raise UnitError(f"need at least {k} frames to train {k} clusters, got {x.shape[0]}")
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        raise UnitError(f"only {distinct} distinct frames available for {k} clusters")
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="One of the clusters is empty")
        centers, _ = kmeans2(x, k, iter=max_iter, minit="++", missing="warn",
                             seed=np.random.default_rng(seed))
    return UnitCodebook(centers)


def quantize_units(features: np.ndarray, codebook: UnitCodebook) -> SpeechUnits:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.feature_dim:
        raise UnitError(
            f"feature dim {x.shape[-1]} does not match codebook dim {codebook.feature_dim}"
        )
    c = codebook.centroids
    ids = np.empty(len(x), dtype=np.int64)
    # explicit differences (not the expanded form) so exact ties stay exact;
    # argmin returns the first minimum, so ties go to the lowest index
    for s in range(0, len(x), 1024):
        chunk = x[s:s + 1024]
        d = ((chunk[:, None, :] - c[None, :, :]) ** 2).sum(-1)
        ids[s:s + 1024] = np.argmin(d, axis=1)
    return SpeechUnits(ids)


def distortion(features: np.ndarray, codebook: UnitCodebook) -> float:
    """Mean squared distance of each frame to its nearest centroid."""
    return float(_sq_dists(np.asarray(features, dtype=np.float64), codebook.centroids).min(1).mean())
