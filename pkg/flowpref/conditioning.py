"""Style and lyric conditioning features, including dropout for guidance."""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Example, LatentSeq, LyricAlignment, UNKNOWN_MODE
from .errors import InputError

logger = logging.getLogger(__name__)

PROMPT_MODALITIES = ("audio", "text", "mixed")


class Modality(str, Enum):
    AUDIO = "audio"
    TEXT = "text"


@dataclass
class StylePrompt:
    """An audio or text style prompt; exactly one payload is set."""

    modality: Modality
    audio_latent: Optional[LatentSeq] = None
    text_tags: Optional[FrozenSet[int]] = None

    def __post_init__(self) -> None:
        self.modality = Modality(self.modality)
        if self.modality is Modality.AUDIO:
            if self.audio_latent is None or self.text_tags is not None:
                raise InputError("audio prompt needs audio_latent and no text_tags")
        else:
            if self.text_tags is None or self.audio_latent is not None:
                raise InputError("text prompt needs text_tags and no audio_latent")
            self.text_tags = frozenset(int(t) for t in self.text_tags)

    @classmethod
    def from_audio(cls, latent: LatentSeq) -> "StylePrompt":
        return cls(Modality.AUDIO, audio_latent=latent)

    @classmethod
    def from_tags(cls, tags: Iterable[int]) -> "StylePrompt":
        return cls(Modality.TEXT, text_tags=frozenset(tags))


@dataclass
class Prompt:
    """A generation request: style prompt plus lyric alignment."""

    style: StylePrompt
    alignment: LyricAlignment = field(default_factory=LyricAlignment)

    @classmethod
    def null(cls, length: int, latent_dim: int) -> "Prompt":
        """Silent audio prompt and no lyrics; encodes to the zero condition."""
        silence = LatentSeq(np.zeros((length, latent_dim)))
        return cls(StylePrompt.from_audio(silence))


@dataclass
class StyleEmbedding:
    """Unit style vector, or all zeros for the null style."""

    vec: np.ndarray

    @property
    def is_null(self) -> bool:
        return not np.any(self.vec)


@dataclass
class ConditionBundle:
    """Per-sequence conditioning: one style vector and L lyric rows."""

    style: StyleEmbedding
    lyric_frames: np.ndarray
    style_dropped: bool = False
    lyrics_dropped: bool = False

    @property
    def length(self) -> int:
        return int(self.lyric_frames.shape[0])


@dataclass(frozen=True)
class ProjectionTable:
    """Fixed random projections of audio (D) and text tags into style space (S)."""

    audio: np.ndarray  # (S, D)
    text: np.ndarray  # (S, tag_vocab)

    @classmethod
    def create(
        cls, latent_dim: int, style_dim: int, tag_vocab: int, seed: int
    ) -> "ProjectionTable":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        audio = rng.standard_normal((style_dim, latent_dim)) / np.sqrt(latent_dim)
        text = rng.standard_normal((style_dim, tag_vocab)) / np.sqrt(tag_vocab)
        return cls(_frozen(audio), _frozen(text))

    @property
    def style_dim(self) -> int:
        return int(self.audio.shape[0])

    @property
    def tag_vocab(self) -> int:
        return int(self.text.shape[1])


@dataclass(frozen=True)
class TokenEmbeddingTable:
    """Lyric token embeddings; the filler token embeds to zeros."""

    table: np.ndarray  # (vocab, E)

    @classmethod
    def create(cls, vocab: int, dim: int, seed: int) -> "TokenEmbeddingTable":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
        return cls(_frozen(rng.standard_normal((vocab, dim)) / np.sqrt(dim)))

    @property
    def vocab(self) -> int:
        return int(self.table.shape[0])

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    @property
    def filler(self) -> np.ndarray:
        return np.zeros(self.dim)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def embed_style(p: StylePrompt, table: ProjectionTable) -> StyleEmbedding:
    """Project a prompt into style space and L2-normalize; zero stays zero."""
    if p.modality is Modality.AUDIO:
        assert p.audio_latent is not None
        mean = p.audio_latent.mean_frame()
        if mean.shape[0] != table.audio.shape[1]:
            raise InputError(
                f"audio prompt dim {mean.shape[0]} != table dim {table.audio.shape[1]}"
            )
        vec = table.audio @ mean
    else:
        assert p.text_tags is not None
        hot = np.zeros(table.tag_vocab)
        for tag in p.text_tags:
            if not 0 <= tag < table.tag_vocab:
                raise InputError(f"unknown tag id {tag} (vocabulary {table.tag_vocab})")
            hot[tag] = 1.0
        vec = table.text @ hot

    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return StyleEmbedding(np.zeros(table.style_dim))
    return StyleEmbedding(vec / norm)


def embed_lyrics(
    a: LyricAlignment, length: int, emb: TokenEmbeddingTable
) -> np.ndarray:
    """L x E lyric features; each token holds until the next one starts."""
    a.validate(length)
    rows = np.tile(emb.filler, (length, 1))
    bounds = list(a.start_frames[1:]) + [length]
    for token, start, stop in zip(a.token_ids, a.start_frames, bounds):
        if not 0 <= token < emb.vocab:
            raise InputError(f"token id {token} out of range (vocabulary {emb.vocab})")
        rows[start:stop] = emb.table[token]
    return rows


def null_condition(length: int, style_dim: int, lyric_dim: int) -> ConditionBundle:
    """The unconditional bundle: zero style and filler lyrics, both flagged."""
    return ConditionBundle(
        StyleEmbedding(np.zeros(style_dim)),
        np.zeros((length, lyric_dim)),
        style_dropped=True,
        lyrics_dropped=True,
    )


def drop_all(c: ConditionBundle) -> ConditionBundle:
    """The null bundle with the same length and widths as `c`."""
    return null_condition(c.length, c.style.vec.shape[0], c.lyric_frames.shape[1])


def apply_condition_dropout(c: ConditionBundle, p: float, seed: int) -> ConditionBundle:
    """Independently zero style and lyrics, each with probability `p`."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"dropout probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    draws = rng.random(2)
    drop_style = bool(draws[0] < p)
    drop_lyrics = bool(draws[1] < p)
    if drop_style and drop_lyrics:
        return drop_all(c)

    result = replace(c)
    if drop_style:
        result.style = StyleEmbedding(np.zeros_like(c.style.vec))
        result.style_dropped = True
    if drop_lyrics:
        result.lyric_frames = np.zeros_like(c.lyric_frames)
        result.lyrics_dropped = True
    return result


def prompt_for_example(
    example: Example, modality: str, rng: np.random.Generator, tag_vocab: int
) -> StylePrompt:
    """Style prompt for a training example.

    `mixed` picks audio or text with equal probability per example. Examples
    without a known mode label have no tags and always use their audio.
    """
    if modality not in PROMPT_MODALITIES:
        raise InputError(f"unknown prompt modality {modality!r}")
    if modality == "mixed":
        modality = "audio" if rng.random() < 0.5 else "text"
    if modality == "text" and example.mode_label != UNKNOWN_MODE:
        return StylePrompt.from_tags({example.mode_label % tag_vocab})
    return StylePrompt.from_audio(example.latent)


class ConditionEncoder:
    """Style projections plus lyric token table, persisted with checkpoints."""

    def __init__(self, projections: ProjectionTable, tokens: TokenEmbeddingTable):
        self.projections = projections
        self.tokens = tokens

    @classmethod
    def create(
        cls,
        latent_dim: int,
        style_dim: int,
        lyric_dim: int,
        tag_vocab: int,
        token_vocab: int,
        seed: int,
    ) -> "ConditionEncoder":
        return cls(
            ProjectionTable.create(latent_dim, style_dim, tag_vocab, seed),
            TokenEmbeddingTable.create(token_vocab, lyric_dim, seed),
        )

    @property
    def style_dim(self) -> int:
        return self.projections.style_dim

    @property
    def lyric_dim(self) -> int:
        return self.tokens.dim

    def encode(
        self, prompt: StylePrompt, alignment: LyricAlignment, length: int
    ) -> ConditionBundle:
        return ConditionBundle(
            embed_style(prompt, self.projections),
            embed_lyrics(alignment, length, self.tokens),
        )

    def encode_prompt(self, prompt: Prompt, length: int) -> ConditionBundle:
        return self.encode(prompt.style, prompt.alignment, length)

    def null(self, length: int) -> ConditionBundle:
        return null_condition(length, self.style_dim, self.lyric_dim)

    def tensors(self) -> Dict[str, np.ndarray]:
        return {
            "cond.audio_proj": self.projections.audio,
            "cond.text_proj": self.projections.text,
            "cond.token_emb": self.tokens.table,
        }

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "ConditionEncoder":
        return cls(
            ProjectionTable(
                _frozen(tensors["cond.audio_proj"]), _frozen(tensors["cond.text_proj"])
            ),
            TokenEmbeddingTable(_frozen(tensors["cond.token_emb"])),
        )


def stack_conditions(
    bundles: Sequence[ConditionBundle],
) -> Tuple[np.ndarray, np.ndarray]:
    """Batch bundles into (N, S) style and (N, L, E) lyric arrays."""
    if not bundles:
        raise InputError("no condition bundles to stack")
    styles = np.stack([b.style.vec for b in bundles])
    lyrics = np.stack([b.lyric_frames for b in bundles])
    return styles, lyrics


def dropout_rates(bundles: List[ConditionBundle]) -> Tuple[float, float]:
    """Observed style and lyric drop rates over a list of bundles."""
    n = max(len(bundles), 1)
    return (
        sum(b.style_dropped for b in bundles) / n,
        sum(b.lyrics_dropped for b in bundles) / n,
    )
