"""Synthetic latent datasets standing in for a song corpus."""

import logging
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .binio import atomic_write
from .errors import AlignmentError, ConfigurationError, InputError, PersistenceError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"DRPD"
DATASET_VERSION = 1
UNKNOWN_MODE = 0xFFFFFFFF
DEFAULT_FRAME_RATE = 10.0

LYRIC_ALPHABET = "abcdefghijklmnopqrstuvwxyz ',.?!"

_HEADER = struct.Struct("<4sIIIId")
_LABEL = struct.Struct("<I")


@dataclass
class LatentSeq:
    """An L x D latent sequence with its frame rate."""

    frames: np.ndarray
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise InputError(f"latent frames must be 2-D, got shape {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise InputError(f"latent frames must be non-empty, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("latent frames contain non-finite values")
        if not self.frame_rate > 0:
            raise InputError(f"frame_rate must be positive, got {self.frame_rate}")
        self.frames = frames
        self.frame_rate = float(self.frame_rate)

    @property
    def length(self) -> int:
        """Number of frames."""
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        """Latent width of each frame."""
        return int(self.frames.shape[1])

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return self.length / self.frame_rate

    def mean_frame(self) -> np.ndarray:
        return self.frames.mean(axis=0)


@dataclass(frozen=True)
class MixtureMode:
    """One isotropic Gaussian component: mean frame, stdev and weight."""

    mean: Tuple[float, ...]
    stdev: float
    weight: float


@dataclass
class MixtureSpec:
    """Gaussian mixture over sequence styles; one mode per sequence."""

    modes: List[MixtureMode]
    seq_len: int = 16
    dim: int = 2
    frame_rate: float = DEFAULT_FRAME_RATE

    def validate(self) -> None:
        if not self.modes:
            raise ConfigurationError("mixture needs at least one mode", key="modes")
        if self.seq_len < 1:
            raise ConfigurationError("must be >= 1", key="seq_len")
        if self.dim < 1:
            raise ConfigurationError("must be >= 1", key="dim")
        if not self.frame_rate > 0:
            raise ConfigurationError("must be positive", key="frame_rate")
        for i, mode in enumerate(self.modes):
            if len(mode.mean) != self.dim:
                raise ConfigurationError(
                    f"mode {i} mean has {len(mode.mean)} entries, expected {self.dim}",
                    key="modes",
                )
            if not np.all(np.isfinite(mode.mean)):
                raise ConfigurationError(f"mode {i} mean is not finite", key="modes")
            # stdev == 0 is a legal degenerate Gaussian
            if not mode.stdev >= 0:
                raise ConfigurationError(
                    f"mode {i} stdev must be non-negative, got {mode.stdev}",
                    key="modes",
                )
            if not mode.weight > 0:
                raise ConfigurationError(
                    f"mode {i} weight must be positive, got {mode.weight}", key="modes"
                )

    def weights(self) -> np.ndarray:
        raw = np.array([m.weight for m in self.modes], dtype=np.float64)
        return raw / raw.sum()

    def means(self) -> np.ndarray:
        return np.array([m.mean for m in self.modes], dtype=np.float64)


@dataclass
class LyricAlignment:
    """Token ids with strictly increasing start frames."""

    token_ids: Tuple[int, ...] = ()
    start_frames: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.token_ids = tuple(int(t) for t in self.token_ids)
        self.start_frames = tuple(int(s) for s in self.start_frames)

    def __len__(self) -> int:
        return len(self.token_ids)

    def validate(self, length: int) -> None:
        """Raise AlignmentError unless the alignment fits `length` frames."""
        if len(self.token_ids) != len(self.start_frames):
            raise AlignmentError(
                f"{len(self.token_ids)} tokens but "
                f"{len(self.start_frames)} start frames"
            )
        if any(t < 0 for t in self.token_ids):
            raise AlignmentError("token ids must be non-negative")
        previous = -1
        for start in self.start_frames:
            if start <= previous:
                raise AlignmentError("start frames must be strictly increasing")
            previous = start
        if self.start_frames and (self.start_frames[0] < 0 or previous >= length):
            raise AlignmentError(f"start frames must lie within [0, {length})")


@dataclass
class Example:
    """One training sequence with its ground-truth mode and lyric alignment."""

    latent: LatentSeq
    mode_label: int = UNKNOWN_MODE
    alignment: LyricAlignment = field(default_factory=LyricAlignment)


@dataclass
class Dataset:
    """Ordered examples with list-like access."""

    examples: List[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, index: int) -> Example:
        return self.examples[index]

    @property
    def latents(self) -> List[LatentSeq]:
        return [ex.latent for ex in self.examples]

    @property
    def labels(self) -> List[int]:
        return [ex.mode_label for ex in self.examples]


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Generator for one sample, independent of how many others are drawn."""
    if seed < 0 or index < 0:
        raise InputError(f"seed and index must be non-negative, got {seed}, {index}")
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def synthesize_alignment(
    length: int, n_tokens: int, vocab: int, seed: int, index: int
) -> LyricAlignment:
    """Random alignment paired with sample `index`; re-derivable from (seed, index)."""
    n = min(n_tokens, length)
    if n <= 0 or vocab <= 0:
        return LyricAlignment()
    rng = sample_rng(seed, index, stream=1)
    starts = np.sort(rng.choice(length, size=n, replace=False))
    tokens = rng.integers(0, vocab, size=n)
    return LyricAlignment(tuple(tokens.tolist()), tuple(starts.tolist()))


def make_mixture_dataset(
    spec: MixtureSpec,
    n: int,
    seed: int,
    tokens_per_seq: int = 4,
    token_vocab: int = 32,
) -> Dataset:
    """Draw `n` sequences: one mode per sequence, frames i.i.d. given the mode."""
    spec.validate()
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")

    weights = spec.weights()
    means = spec.means()
    stdevs = np.array([m.stdev for m in spec.modes], dtype=np.float64)

    examples = []
    for index in range(n):
        rng = sample_rng(seed, index)
        mode = int(rng.choice(len(weights), p=weights))
        noise = rng.standard_normal((spec.seq_len, spec.dim))
        frames = means[mode] + stdevs[mode] * noise
        alignment = synthesize_alignment(
            spec.seq_len, tokens_per_seq, token_vocab, seed, index
        )
        examples.append(
            Example(LatentSeq(frames, spec.frame_rate), mode, alignment)
        )

    logger.debug("generated %d sequences from %d modes", n, len(weights))
    return Dataset(examples)


def with_alignments(
    dataset: Dataset, seed: int, tokens_per_seq: int, token_vocab: int
) -> Dataset:
    """Re-attach the seeded lyric alignments the file format does not store."""
    examples = [
        Example(
            ex.latent,
            ex.mode_label,
            synthesize_alignment(
                ex.latent.length, tokens_per_seq, token_vocab, seed, index
            ),
        )
        for index, ex in enumerate(dataset)
    ]
    return Dataset(examples)


def perturb_alignment(
    a: LyricAlignment, jitter: int, length: int, seed: int
) -> LyricAlignment:
    """Shift every start frame by a uniform integer in [-jitter, +jitter].

    Shifted frames are clamped into [0, length), sorted, and collisions are
    resolved by pushing later tokens forward one frame; tokens keep their order.
    """
    a.validate(length)
    if jitter < 0:
        raise InputError(f"jitter must be non-negative, got {jitter}")
    n = len(a)
    if jitter == 0 or n == 0:
        return LyricAlignment(a.token_ids, a.start_frames)
    if n > length:
        raise AlignmentError(f"{n} tokens cannot fit in {length} frames")

    rng = np.random.default_rng(seed)
    offsets = rng.integers(-jitter, jitter + 1, size=n)
    frames = np.clip(np.asarray(a.start_frames) + offsets, 0, length - 1)
    frames = np.sort(frames)

    for i in range(1, n):
        if frames[i] <= frames[i - 1]:
            frames[i] = frames[i - 1] + 1
    # pull the tail back inside the sequence; keeps strict increase
    frames = np.minimum(frames, length - n + np.arange(n))

    result = LyricAlignment(a.token_ids, tuple(frames.tolist()))
    result.validate(length)
    return result


def tokenize_lyrics(text: str) -> List[int]:
    """Character-level token ids over LYRIC_ALPHABET."""
    ids = []
    for char in text.lower():
        position = LYRIC_ALPHABET.find(char)
        if position < 0:
            raise InputError(f"unsupported lyric character {char!r}")
        ids.append(position)
    return ids


def align_evenly(token_ids: Sequence[int], length: int) -> LyricAlignment:
    """Spread tokens over the sequence with evenly spaced start frames."""
    n = len(token_ids)
    if n > length:
        raise AlignmentError(f"{n} tokens cannot fit in {length} frames")
    if n == 0:
        return LyricAlignment()
    starts = [(i * length) // n for i in range(n)]
    return LyricAlignment(tuple(token_ids), tuple(starts))


def crop(example: Example, start: int, length: int) -> Example:
    """Window `example` to frames [start, start+length), alignment included.

    The token sounding at `start` is re-anchored to the window's first frame.
    """
    total = example.latent.length
    if length < 1 or start < 0 or start + length > total:
        raise InputError(f"window [{start}, {start + length}) outside [0, {total})")
    frames = example.latent.frames[start : start + length]

    tokens: List[int] = []
    starts: List[int] = []
    alignment = example.alignment
    for token, frame in zip(alignment.token_ids, alignment.start_frames):
        if frame < start:
            # latest token before the window keeps sounding into it
            tokens[:] = [token]
            starts[:] = [0]
        elif frame < start + length:
            if starts and starts[-1] == 0 and frame == start:
                tokens[-1] = token
            else:
                tokens.append(token)
                starts.append(frame - start)

    return Example(
        LatentSeq(frames, example.latent.frame_rate),
        example.mode_label,
        LyricAlignment(tuple(tokens), tuple(starts)),
    )


def assign_mode(x: LatentSeq, means: np.ndarray) -> int:
    """Index of the mixture mode nearest the sequence's mean frame."""
    distances = np.linalg.norm(means - x.mean_frame(), axis=1)
    return int(np.argmin(distances))


def write_dataset(
    latents: Sequence[LatentSeq], path: str, labels: Optional[Sequence[int]] = None
) -> None:
    """Write sequences in the DRPD binary format."""
    if not latents:
        raise InputError("cannot write an empty dataset")
    first = latents[0]
    if labels is None:
        labels = [UNKNOWN_MODE] * len(latents)
    if len(labels) != len(latents):
        raise InputError(f"{len(labels)} labels for {len(latents)} sequences")

    for seq in latents:
        if seq.frames.shape != first.frames.shape or seq.frame_rate != first.frame_rate:
            raise InputError("all sequences in a dataset file must share L, D and rate")

    parts = [
        _HEADER.pack(
            DATASET_MAGIC,
            DATASET_VERSION,
            len(latents),
            first.length,
            first.dim,
            first.frame_rate,
        )
    ]
    for seq, label in zip(latents, labels):
        parts.append(_LABEL.pack(int(label)))
        parts.append(seq.frames.astype("<f8").tobytes())
    atomic_write(path, b"".join(parts))
    logger.info("wrote %d sequences to %s", len(latents), path)


def read_dataset(path: str) -> Dataset:
    """Read a DRPD file; alignments come back empty (see with_alignments)."""
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < _HEADER.size:
        raise PersistenceError(f"{path}: truncated header")
    magic, version, n, length, dim, frame_rate = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise PersistenceError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise PersistenceError(f"{path}: unsupported version {version}")

    block = _LABEL.size + length * dim * 8
    expected = _HEADER.size + n * block
    if len(blob) != expected:
        raise PersistenceError(
            f"{path}: expected {expected} bytes for {n} sequences, found {len(blob)}"
        )

    examples = []
    offset = _HEADER.size
    for _ in range(n):
        (label,) = _LABEL.unpack_from(blob, offset)
        offset += _LABEL.size
        frames = np.frombuffer(blob, dtype="<f8", count=length * dim, offset=offset)
        offset += length * dim * 8
        latent = LatentSeq(frames.reshape(length, dim).astype(np.float64), frame_rate)
        examples.append(Example(latent, int(label)))
    return Dataset(examples)
