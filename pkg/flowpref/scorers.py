"""Aesthetic scorers for generated latents."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .conditioning import Prompt
from .data import LatentSeq
from .errors import InputError, ScoringError

logger = logging.getLogger(__name__)


class ScoreSource(str, Enum):
    """Native scale of a scorer: 1-5 (song-like) or 1-10 (instrumental-like)."""

    SONG_LIKE = "SongLike"
    INSTRUMENTAL_LIKE = "InstrumentalLike"

    @property
    def upper(self) -> float:
        return 5.0 if self is ScoreSource.SONG_LIKE else 10.0


@dataclass(frozen=True)
class AestheticScore:
    """A score normalized to 1-5, tagged with its native scale."""

    value: float
    source: ScoreSource = ScoreSource.SONG_LIKE

    def __post_init__(self) -> None:
        if not 1.0 <= self.value <= 5.0:
            raise InputError(f"normalized score must be in [1, 5], got {self.value}")


def map_score_10_to_5(s: float) -> float:
    """Affine map of a 1-10 score onto the 1-5 scale."""
    if not 1.0 <= s <= 10.0:
        raise InputError(f"score must be in [1, 10], got {s}")
    return 1.0 + (s - 1.0) * (4.0 / 9.0)


class Scorer:
    """Base class for scorers."""

    source: ScoreSource = ScoreSource.SONG_LIKE

    def __call__(self, x: LatentSeq, prompt: Optional[Prompt] = None) -> float:
        """Return a score on this scorer's native scale."""
        raise NotImplementedError("Subclasses must implement __call__")


class ConstantScorer(Scorer):
    """Give every sample the same score."""

    def __init__(self, value: float, source: ScoreSource = ScoreSource.SONG_LIKE):
        self.value = value
        self.source = ScoreSource(source)

    def __call__(self, x: LatentSeq, prompt: Optional[Prompt] = None) -> float:
        return self.value


class ModeAffinityScorer(Scorer):
    """Score by Gaussian affinity of the mean frame to a target mode."""

    def __init__(
        self,
        target_mean: Sequence[float],
        sigma: float = 1.0,
        source: ScoreSource = ScoreSource.SONG_LIKE,
    ):
        if not sigma > 0:
            raise InputError(f"sigma must be positive, got {sigma}")
        self.target_mean = np.asarray(target_mean, dtype=np.float64)
        self.sigma = sigma
        self.source = ScoreSource(source)

    def affinity(self, x: LatentSeq) -> float:
        mean = x.mean_frame()
        if mean.shape != self.target_mean.shape:
            raise ScoringError(
                f"sample dim {mean.shape[0]} != target dim {self.target_mean.shape[0]}"
            )
        d2 = float(np.sum((mean - self.target_mean) ** 2))
        return float(np.exp(-d2 / (2.0 * self.sigma**2)))

    def __call__(self, x: LatentSeq, prompt: Optional[Prompt] = None) -> float:
        return 1.0 + (self.source.upper - 1.0) * self.affinity(x)


class WeightedScorer(Scorer):
    """Weighted mean of several scorers after normalizing each to 1-5."""

    def __init__(self, scorers: Sequence[Tuple[Scorer, float]]):
        if not scorers:
            raise InputError("WeightedScorer needs at least one scorer")
        weights = np.array([w for _, w in scorers], dtype=np.float64)
        if np.any(weights < 0) or weights.sum() <= 0:
            raise InputError("weights must be non-negative with a positive sum")
        self.scorers = [s for s, _ in scorers]
        self.weights = weights / weights.sum()
        self.source = ScoreSource.SONG_LIKE

    def __call__(self, x: LatentSeq, prompt: Optional[Prompt] = None) -> float:
        values = [score_sample(s, x, prompt).value for s in self.scorers]
        return float(np.dot(self.weights, values))


def score_sample(
    scorer: Scorer, x: LatentSeq, prompt: Optional[Prompt] = None
) -> AestheticScore:
    """Score `x` and normalize it to the 1-5 scale."""
    source = ScoreSource(scorer.source)
    try:
        raw = float(scorer(x, prompt))
    except ScoringError:
        raise
    except Exception as e:
        raise ScoringError(f"{type(scorer).__name__} failed: {e}") from e

    if not np.isfinite(raw) or not 1.0 <= raw <= source.upper:
        raise ScoringError(
            f"{type(scorer).__name__} returned {raw}, outside [1, {source.upper:g}]"
        )
    if source is ScoreSource.INSTRUMENTAL_LIKE:
        raw = map_score_10_to_5(raw)
    return AestheticScore(min(max(raw, 1.0), 5.0), source)


def score_batch(
    scorer: Scorer, samples: Sequence[LatentSeq], prompt: Optional[Prompt] = None
) -> List[Tuple[int, LatentSeq, AestheticScore]]:
    """(index, sample, score) for every sample that scored; failures are skipped."""
    scored = []
    for index, sample in enumerate(samples):
        try:
            scored.append((index, sample, score_sample(scorer, sample, prompt)))
        except ScoringError as e:
            logger.warning("skipping sample %d: %s", index, e)
    return scored
