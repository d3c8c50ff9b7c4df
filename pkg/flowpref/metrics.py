"""Objective metrics: Frechet distance, KL divergence and real-time factor."""

import json
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import linalg

from .binio import append_line
from .data import LatentSeq
from .errors import InputError

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-10

# embedder(x) -> (k, M): one or more feature vectors per sequence
Embedder = Callable[[LatentSeq], np.ndarray]


@dataclass
class GaussianFit:
    """Mean and population covariance of n embedding vectors."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


@dataclass
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InputError(f"probabilities must be a non-empty vector: {probs.shape}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise InputError("probabilities must be non-negative and sum to 1")
        self.probs = probs

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "CategoricalDist":
        counts = np.asarray(counts, dtype=np.float64)
        return cls(counts / counts.sum())


def fit_gaussian(vectors: np.ndarray) -> GaussianFit:
    """Mean and population covariance (divide by n) of an (n, M) array."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[0] == 0:
        raise InputError("cannot fit a Gaussian to zero vectors")
    mean = vectors.mean(axis=0)
    centered = vectors - mean
    cov = centered.T @ centered / vectors.shape[0]
    return GaussianFit(mean, 0.5 * (cov + cov.T), int(vectors.shape[0]))


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    # eigenvalues below zero are rounding noise
    values, vectors = linalg.eigh(0.5 * (matrix + matrix.T))
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Frechet distance between two Gaussians, computed with symmetric roots only."""
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    diff = a.mean - b.mean
    root_a = _sqrt_psd(a.cov)
    cross = _sqrt_psd(root_a @ b.cov @ root_a)
    traces = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    value = float(diff @ diff + traces)
    return max(value, 0.0)


def kl_divergence(p: CategoricalDist, q: CategoricalDist) -> float:
    """KL(p || q) with q floored at KL_EPSILON; zero-probability terms of p drop out."""
    if p.probs.shape != q.probs.shape:
        raise InputError(f"bin count mismatch: {p.probs.size} vs {q.probs.size}")
    if np.array_equal(p.probs, q.probs):
        return 0.0
    q_smoothed = np.maximum(q.probs, KL_EPSILON)
    mask = p.probs > 0
    return float(np.sum(p.probs[mask] * np.log(p.probs[mask] / q_smoothed[mask])))


@dataclass(frozen=True)
class BinGrid:
    """Equal-width bins per coordinate over [low, high); outliers go to edge bins."""

    low: float = -3.0
    high: float = 3.0
    bins: int = 8

    def __post_init__(self) -> None:
        if not self.high > self.low:
            raise InputError(f"grid high {self.high} must exceed low {self.low}")
        if self.bins < 1:
            raise InputError(f"grid needs at least one bin, got {self.bins}")

    def size(self, dim: int) -> int:
        return int(self.bins**dim)

    def index(self, vectors: np.ndarray) -> np.ndarray:
        """Flat bin index of every row of an (n, M) array."""
        scaled = (vectors - self.low) / (self.high - self.low) * self.bins
        cells = np.clip(np.floor(scaled), 0, self.bins - 1).astype(np.int64)
        return np.ravel_multi_index(tuple(cells.T), (self.bins,) * vectors.shape[1])


def mean_frame(x: LatentSeq) -> np.ndarray:
    """One vector per sample: the average frame."""
    return x.mean_frame()[None, :]


def frame_vectors(x: LatentSeq) -> np.ndarray:
    """One vector per frame."""
    return x.frames


EMBEDDERS: Dict[str, Embedder] = {
    "mean_frame": mean_frame,
    "frame_vectors": frame_vectors,
}


def featurize(
    samples: Sequence[LatentSeq], grid: BinGrid, embedder: Embedder = mean_frame
) -> Tuple[GaussianFit, CategoricalDist]:
    """Gaussian fit and bin-occupancy histogram of the embedded samples."""
    if not samples:
        raise InputError("no samples to featurize")
    vectors = np.concatenate([np.atleast_2d(embedder(x)) for x in samples])
    counts = np.bincount(grid.index(vectors), minlength=grid.size(vectors.shape[1]))
    return fit_gaussian(vectors), CategoricalDist.from_counts(counts)


def rtf(elapsed_seconds: float, frames: int, frame_rate: float) -> float:
    """Wall-clock time over generated duration."""
    if frames <= 0:
        raise InputError(f"frames must be positive, got {frames}")
    if not frame_rate > 0:
        raise InputError(f"frame_rate must be positive, got {frame_rate}")
    if elapsed_seconds < 0:
        raise InputError(f"elapsed time must be non-negative, got {elapsed_seconds}")
    return elapsed_seconds / (frames / frame_rate)


def compare(
    generated: Sequence[LatentSeq],
    reference: Sequence[LatentSeq],
    grid: BinGrid,
    embedder: Embedder = mean_frame,
) -> List[Dict[str, float]]:
    """FAD- and KL-style report rows for generated vs reference samples."""
    fit_g, hist_g = featurize(generated, grid, embedder)
    fit_r, hist_r = featurize(reference, grid, embedder)
    return [
        {"metric": "fad", "value": frechet_distance(fit_g, fit_r), "n": len(generated)},
        {"metric": "kl", "value": kl_divergence(hist_r, hist_g), "n": len(generated)},
    ]


def append_report(path: str, rows: Sequence[Mapping[str, object]]) -> None:
    """Append one JSON object per metric to a JSON-lines report."""
    for row in rows:
        record = {"metric": row["metric"], "value": row["value"], "n": row["n"]}
        append_line(path, json.dumps(record))
        logger.info("%s = %s (n=%s)", record["metric"], record["value"], record["n"])
