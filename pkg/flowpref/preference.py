"""Preference optimization: win-lose pair mining, quality filtering and DPO."""

import logging
import struct
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit
from tqdm import tqdm

from .binio import ByteReader, append_line, atomic_write
from .cfm import stack_latents
from .checkpoint import Checkpoint
from .conditioning import (
    ConditionEncoder,
    Modality,
    Prompt,
    StylePrompt,
    stack_conditions,
)
from .data import Dataset, LatentSeq, LyricAlignment
from .errors import InputError, NumericalError, PersistenceError, ScoringError
from .scorers import AestheticScore, Scorer, ScoreSource, score_sample
from .vectorfield import (
    EmaState,
    LossFunction,
    ModelParams,
    OptimState,
    PreparedBatch,
    adamw_step,
    build_features,
    ema_update,
    evaluate_prepared,
    forward_features,
    loss_and_grad,
)

logger = logging.getLogger(__name__)

WINNER_SOURCES = ("generated", "ground-truth")
ERROR_WEIGHTINGS = ("velocity", "noise")

PAIRS_MAGIC = b"DRPP"
PAIRS_VERSION = 1

ScoredSample = Tuple[LatentSeq, AestheticScore]


@dataclass
class DpoConfig:
    """Pair-mining thresholds and DPO optimizer settings."""

    beta: float = 2000.0
    gap: float = 0.4
    winner_floor: float = 3.0
    epochs: int = 8
    lr: float = 1e-6
    batch_size: int = 8
    seed: int = 0
    candidates: int = 8
    winner_source: str = "generated"
    error_weighting: str = "velocity"
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    ema_decay: float = 0.99
    ema_interval: int = 100
    shards: int = 1
    workers: int = 1
    log_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise InputError(f"beta must be positive, got {self.beta}")
        if not self.gap >= 0:
            raise InputError(f"gap must be non-negative, got {self.gap}")
        if not self.lr > 0:
            raise InputError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.candidates < 2:
            raise InputError(f"need at least 2 candidates, got {self.candidates}")
        if self.winner_source not in WINNER_SOURCES:
            raise InputError(f"unknown winner source {self.winner_source!r}")
        if self.error_weighting not in ERROR_WEIGHTINGS:
            raise InputError(f"unknown error weighting {self.error_weighting!r}")


@dataclass
class PreferencePair:
    """Winner and loser sampled for one prompt, with their scores."""

    prompt: Prompt
    winner: LatentSeq
    loser: LatentSeq
    score_w: AestheticScore
    score_l: AestheticScore


def _passes(score_w: float, score_l: float, cfg: DpoConfig) -> bool:
    return score_w - score_l > cfg.gap and score_w > cfg.winner_floor


def build_pairs(
    batch: Sequence[ScoredSample], prompt: Prompt, cfg: DpoConfig
) -> Optional[PreferencePair]:
    """Best vs worst candidate for one prompt, if both thresholds pass.

    Ties resolve to the lowest index.
    """
    if len(batch) < 2:
        raise InputError(f"need at least 2 scored candidates, got {len(batch)}")
    values = np.array([score.value for _, score in batch])
    best = int(np.argmax(values))
    worst = int(np.argmin(values))
    if not _passes(values[best], values[worst], cfg):
        return None
    return PreferencePair(
        prompt, batch[best][0], batch[worst][0], batch[best][1], batch[worst][1]
    )


def mine_pairs(
    candidates: Sequence[ScoredSample],
    prompt: Prompt,
    cfg: DpoConfig,
    ground_truth: Optional[ScoredSample] = None,
) -> Optional[PreferencePair]:
    """Pair for one prompt using the configured winner source."""
    if cfg.winner_source == "generated":
        return build_pairs(candidates, prompt, cfg)

    if ground_truth is None:
        raise InputError("ground-truth winner source needs a ground-truth sample")
    if not candidates:
        raise InputError("need at least 1 scored candidate")
    values = np.array([score.value for _, score in candidates])
    worst = int(np.argmin(values))
    winner, score_w = ground_truth
    if not _passes(score_w.value, values[worst], cfg):
        return None
    return PreferencePair(
        prompt, winner, candidates[worst][0], score_w, candidates[worst][1]
    )


def filter_dataset(
    dataset: Dataset,
    scorer: Scorer,
    threshold: float,
    vocal_scorer: Optional[Scorer] = None,
) -> Dataset:
    """Keep examples scoring at least `threshold`, in order.

    Examples with lyrics are judged by `vocal_scorer` when one is given.
    """
    kept = []
    for index, example in enumerate(dataset):
        judge = scorer
        if vocal_scorer is not None and len(example.alignment) > 0:
            judge = vocal_scorer
        try:
            score = score_sample(judge, example.latent)
        except ScoringError as e:
            logger.warning("dropping example %d: %s", index, e)
            continue
        if score.value >= threshold:
            kept.append(example)
    logger.info(
        "quality filter >= %g kept %d of %d examples",
        threshold,
        len(kept),
        len(dataset),
    )
    return Dataset(kept)


class DpoLoss(LossFunction):
    """Diffusion-DPO on velocity errors against a frozen reference field.

    Winner and loser of a pair share one (t, y_minus) draw, and the reference
    field sees exactly the inputs the trained field sees. With "noise"
    weighting each error is scaled by t^2, the noise-prediction error implied
    by the velocity.
    """

    def __init__(
        self,
        theta_ref: ModelParams,
        encoder: ConditionEncoder,
        beta: float,
        seed: int,
        weighting: str = "velocity",
    ):
        if weighting not in ERROR_WEIGHTINGS:
            raise InputError(f"unknown error weighting {weighting!r}")
        self.theta_ref = theta_ref
        self.encoder = encoder
        self.beta = beta
        self.seed = seed
        self.weighting = weighting

    def prepare(self, batch: Sequence[PreferencePair]) -> PreparedBatch:
        if not batch:
            raise InputError("empty preference batch")
        winners = stack_latents([p.winner for p in batch])
        losers = stack_latents([p.loser for p in batch])
        if winners.shape != losers.shape:
            raise InputError(f"winner {winners.shape} vs loser {losers.shape}")
        n, length, _ = winners.shape

        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 808]))
        y_minus = rng.standard_normal(winners.shape)
        t = rng.random(n)

        styles, lyrics = stack_conditions(
            [self.encoder.encode_prompt(p.prompt, length) for p in batch]
        )
        tt = t[:, None, None]
        features = []
        targets = []
        for y_plus in (winners, losers):
            y_t = tt * y_plus + (1.0 - tt) * y_minus
            features.append(build_features(y_t, styles, lyrics, t))
            targets.append(y_plus - y_minus)
        # (N, 2, L, F): index 0 is the winner
        stacked = np.stack(features, axis=1)
        target = np.stack(targets, axis=1)

        weight = np.ones(n) if self.weighting == "velocity" else t * t
        ref_velocity, _ = forward_features(self.theta_ref, stacked)
        ref_diff = ref_velocity - target
        ref_err = weight[:, None] * np.mean(ref_diff * ref_diff, axis=(2, 3))
        return PreparedBatch(
            stacked,
            {"target": target, "weight": weight, "ref_err": ref_err},
            {"seed": self.seed},
        )

    def head(
        self, velocity: np.ndarray, prepared: PreparedBatch
    ) -> Tuple[np.ndarray, np.ndarray]:
        diff = velocity - prepared.arrays["target"]
        weight = prepared.arrays["weight"]
        err = weight[:, None] * np.mean(diff * diff, axis=(2, 3))
        delta = err - prepared.arrays["ref_err"]
        z = -self.beta * (delta[:, 0] - delta[:, 1])
        losses = -log_expit(z)

        # dloss/derr_w = beta * sigma(-z), dloss/derr_l = -beta * sigma(-z)
        coeff = self.beta * expit(-z) * weight * 2.0 / diff[0, 0].size
        sign = np.array([1.0, -1.0])
        d_velocity = (coeff[:, None] * sign[None, :])[:, :, None, None] * diff
        return losses, d_velocity


def dpo_loss(
    theta: ModelParams,
    theta_ref: ModelParams,
    pair: PreferencePair,
    beta: float,
    seed: int,
    encoder: ConditionEncoder,
    weighting: str = "velocity",
) -> float:
    """Preference loss of a single pair; ln 2 when theta equals theta_ref."""
    loss_fn = DpoLoss(theta_ref, encoder, beta, seed, weighting)
    prepared = loss_fn.prepare([pair])
    loss, _ = evaluate_prepared(theta, prepared, loss_fn, with_grad=False)
    return loss


def dpo_train(
    cfg: DpoConfig,
    pairs: Sequence[PreferencePair],
    checkpoint_in: Checkpoint,
    snapshot: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> Checkpoint:
    """AdamW on the mean DPO loss over pair minibatches.

    The reference field is a frozen copy of the incoming parameters; the EMA
    restarts from them.
    """
    theta_ref = checkpoint_in.params.copy()
    for value in theta_ref.tensors.values():
        value.setflags(write=False)
    encoder = checkpoint_in.encoder

    theta = checkpoint_in.params.copy()
    optim = OptimState.create(
        theta, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps
    )
    ema = EmaState.create(theta, cfg.ema_decay, cfg.ema_interval)
    history: List[float] = []
    step = 0
    epochs_done = 0

    if cfg.epochs > 0 and not pairs:
        logger.warning("no preference pairs; DPO leaves the model unchanged")
    logger.info(
        "dpo: %d pairs, %d epochs, beta %g, lr %g",
        len(pairs),
        cfg.epochs,
        cfg.beta,
        cfg.lr,
    )

    quiet = None if progress else True
    for epoch in tqdm(range(cfg.epochs), desc="dpo", disable=quiet):
        if not pairs:
            break
        started = time.perf_counter()
        order_seed = np.random.SeedSequence([cfg.seed, 909, epoch])
        order_rng = np.random.default_rng(order_seed)
        order = order_rng.permutation(len(pairs))
        epoch_losses = []

        for offset in range(0, len(order), cfg.batch_size):
            batch = [pairs[int(i)] for i in order[offset : offset + cfg.batch_size]]
            step_seed = int(
                np.random.SeedSequence([cfg.seed, 910, step]).generate_state(1)[0]
            )
            loss_fn = DpoLoss(
                theta_ref, encoder, cfg.beta, step_seed, cfg.error_weighting
            )
            try:
                loss, grads = loss_and_grad(
                    theta, batch, loss_fn, cfg.shards, cfg.workers
                )
            except NumericalError as e:
                raise NumericalError(
                    "dpo training diverged",
                    batch_index=e.batch_index,
                    step=step,
                    seed=step_seed,
                ) from e
            optim, theta = adamw_step(optim, theta, grads)
            if not theta.is_finite():
                raise NumericalError(
                    "parameters became non-finite", step=step, seed=step_seed
                )
            ema = ema_update(ema, theta)
            epoch_losses.append(loss)
            step += 1

        epochs_done = epoch + 1
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        line = f"{epoch}\tdpo\t{mean_loss:.6f}\t{time.perf_counter() - started:.3f}"
        logger.info("epoch %s", line.replace("\t", " "))
        if cfg.log_path:
            append_line(cfg.log_path, line)

    config = dict(snapshot) if snapshot is not None else dict(checkpoint_in.config)
    return Checkpoint(
        params=theta,
        ema=ema,
        optim=optim,
        encoder=encoder,
        stage="dpo",
        config=config,
        rng_state={"seed": cfg.seed, "epoch": epochs_done, "step": step},
        history=history,
    )


SCORE_BINS = ("1-2", "2-3", "3-4", "4-5")


def score_distribution(scores: Sequence[float]) -> Dict[str, float]:
    """Percent of scores in [1,2), [2,3), [3,4), [4,5], plus mean and [3-5] %."""
    if not len(scores):
        raise InputError("no scores to summarize")
    values = np.asarray(scores, dtype=np.float64)
    edges = np.clip(np.floor(values), 1, 4).astype(int)
    row: Dict[str, float] = {"n": float(len(values))}
    for lower, name in zip(range(1, 5), SCORE_BINS):
        row[name] = 100.0 * float(np.mean(edges == lower))
    row["mean"] = float(values.mean())
    row["3-5"] = 100.0 * float(np.mean(values >= 3.0))
    return row


# -- pair store ---------------------------------------------------------------

_HEADER = struct.Struct("<4sII")
_LATENT = struct.Struct("<IId")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")
_F64 = struct.Struct("<d")

_MODALITY_CODES = {Modality.AUDIO: 0, Modality.TEXT: 1}


def _pack_latent(x: LatentSeq) -> bytes:
    frames = np.ascontiguousarray(x.frames, dtype="<f8")
    return _LATENT.pack(x.length, x.dim, x.frame_rate) + frames.tobytes()


def _pack_prompt(prompt: Prompt) -> bytes:
    style = prompt.style
    parts = [_U8.pack(_MODALITY_CODES[style.modality])]
    if style.modality is Modality.AUDIO:
        assert style.audio_latent is not None
        parts.append(_pack_latent(style.audio_latent))
    else:
        assert style.text_tags is not None
        tags = sorted(style.text_tags)
        parts.append(_U32.pack(len(tags)))
        parts.extend(_U32.pack(tag) for tag in tags)
    alignment = prompt.alignment
    parts.append(_U32.pack(len(alignment)))
    for token, start in zip(alignment.token_ids, alignment.start_frames):
        parts.append(_U32.pack(token) + _U32.pack(start))
    return b"".join(parts)


def write_pairs(pairs: Sequence[PreferencePair], path: str) -> None:
    """Write the pair store atomically."""
    parts = [_HEADER.pack(PAIRS_MAGIC, PAIRS_VERSION, len(pairs))]
    for pair in pairs:
        parts.append(_pack_prompt(pair.prompt))
        parts.append(_pack_latent(pair.winner))
        parts.append(_pack_latent(pair.loser))
        parts.append(_F64.pack(pair.score_w.value) + _F64.pack(pair.score_l.value))

    atomic_write(path, b"".join(parts))
    logger.info("wrote %d pairs to %s", len(pairs), path)


def _read_latent(reader: ByteReader) -> LatentSeq:
    length, dim, rate = reader.unpack(_LATENT)
    payload = reader.take(length * dim * 8)
    frames = np.frombuffer(payload, dtype="<f8").reshape(length, dim)
    try:
        return LatentSeq(frames.astype(np.float64), rate)
    except InputError as e:
        raise PersistenceError(f"{reader.path}: bad latent block: {e}")


def read_pairs(path: str) -> List[PreferencePair]:
    """Read a pair store written by write_pairs."""
    with open(path, "rb") as f:
        cursor = ByteReader(f.read(), path)

    magic, version, count = cursor.unpack(_HEADER)
    if magic != PAIRS_MAGIC:
        raise PersistenceError(f"{path}: bad magic {magic!r}")
    if version != PAIRS_VERSION:
        raise PersistenceError(f"{path}: unsupported pair store version {version}")

    pairs = []
    for _ in range(count):
        (code,) = cursor.unpack(_U8)
        if code == _MODALITY_CODES[Modality.AUDIO]:
            style = StylePrompt.from_audio(_read_latent(cursor))
        elif code == _MODALITY_CODES[Modality.TEXT]:
            (n_tags,) = cursor.unpack(_U32)
            style = StylePrompt.from_tags(cursor.unpack(_U32)[0] for _ in range(n_tags))
        else:
            raise PersistenceError(f"{path}: unknown prompt modality code {code}")
        (n_tokens,) = cursor.unpack(_U32)
        entries = [
            (cursor.unpack(_U32)[0], cursor.unpack(_U32)[0]) for _ in range(n_tokens)
        ]
        alignment = LyricAlignment(
            tuple(token for token, _ in entries), tuple(start for _, start in entries)
        )
        winner = _read_latent(cursor)
        loser = _read_latent(cursor)
        score_w, score_l = cursor.unpack(_F64)[0], cursor.unpack(_F64)[0]
        try:
            pairs.append(
                PreferencePair(
                    Prompt(style, alignment),
                    winner,
                    loser,
                    AestheticScore(score_w, ScoreSource.SONG_LIKE),
                    AestheticScore(score_l, ScoreSource.SONG_LIKE),
                )
            )
        except InputError as e:
            raise PersistenceError(f"{path}: bad pair record: {e}")

    if cursor.remaining:
        raise PersistenceError(
            f"{path}: {cursor.remaining} trailing bytes after {count} pairs"
        )
    return pairs
