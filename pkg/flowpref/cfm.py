"""Conditional flow matching: the straight-path objective and staged training."""

import logging
import time
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .binio import append_line
from .checkpoint import Checkpoint
from .conditioning import (
    ConditionBundle,
    ConditionEncoder,
    PROMPT_MODALITIES,
    apply_condition_dropout,
    dropout_rates,
    prompt_for_example,
    stack_conditions,
)
from .data import Dataset, Example, LatentSeq, crop, perturb_alignment
from .errors import ContractViolation, InputError, NumericalError
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
    loss_and_grad,
)

logger = logging.getLogger(__name__)

TrainingItem = Tuple[Union[LatentSeq, np.ndarray], ConditionBundle]


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    SFT = "sft"


STAGE_LEARNING_RATES = {Stage.PRETRAIN: 1e-4, Stage.SFT: 1e-5}


@dataclass
class PathSample:
    """A point on the straight path from noise y_minus to data y_plus."""

    y_minus: np.ndarray
    y_plus: np.ndarray
    t: float
    y_t: np.ndarray
    u_t: np.ndarray


def sample_path_point(y_minus: Any, y_plus: Any, t: float) -> PathSample:
    """Point y_t = t*y_plus + (1-t)*y_minus and its constant velocity."""
    y_minus = np.asarray(y_minus, dtype=np.float64)
    y_plus = np.asarray(y_plus, dtype=np.float64)
    if y_minus.shape != y_plus.shape:
        raise ContractViolation(
            f"noise shape {y_minus.shape} != data shape {y_plus.shape}"
        )
    if not 0.0 <= t <= 1.0:
        raise InputError(f"t must lie in [0, 1], got {t}")
    return PathSample(
        y_minus=y_minus,
        y_plus=y_plus,
        t=float(t),
        y_t=t * y_plus + (1.0 - t) * y_minus,
        u_t=y_plus - y_minus,
    )


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage."""

    stage: Stage = Stage.PRETRAIN
    lr: Optional[float] = None
    epochs: int = 1
    batch_size: int = 8
    dropout: float = 0.2
    seed: int = 0
    max_len: Optional[int] = None
    max_steps: Optional[int] = None
    prompt_modality: str = "mixed"
    jitter: int = 1
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
        self.stage = Stage(self.stage)
        if self.lr is None:
            self.lr = STAGE_LEARNING_RATES[self.stage]
        if self.lr <= 0:
            raise InputError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout <= 1.0:
            raise InputError(f"dropout must be in [0, 1], got {self.dropout}")
        if self.max_len is not None and self.max_len < 1:
            raise InputError(f"max_len must be >= 1, got {self.max_len}")
        if self.max_steps is not None and self.max_steps < 0:
            raise InputError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.prompt_modality not in PROMPT_MODALITIES:
            raise InputError(f"unknown prompt modality {self.prompt_modality!r}")

    @property
    def learning_rate(self) -> float:
        assert self.lr is not None
        return self.lr


def _frames(y: Union[LatentSeq, np.ndarray]) -> np.ndarray:
    if isinstance(y, LatentSeq):
        return y.frames
    return np.asarray(y, dtype=np.float64)


def stack_latents(items: Sequence[Union[LatentSeq, np.ndarray]]) -> np.ndarray:
    """Stack equal-shaped sequences into an (N, L, D) array."""
    frames = [_frames(y) for y in items]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ContractViolation(f"batch mixes sequence shapes {sorted(shapes)}")
    return np.stack(frames)


class CfmLoss(LossFunction):
    """Velocity regression ||v(t, y_t, c) - (y_plus - y_minus)||^2, mean over L x D.

    `seed` drives the noise draw, t ~ U[0, 1) and condition dropout, one of
    each per batch element. Draws are keyed by batch position: a prepared
    batch gives the same mean loss however it is sharded or its rows are
    ordered, but reordering the items before `prepare` reassigns the draws.
    """

    def __init__(self, seed: int, dropout: float = 0.0):
        if not 0.0 <= dropout <= 1.0:
            raise InputError(f"dropout must be in [0, 1], got {dropout}")
        self.seed = seed
        self.dropout = dropout

    def prepare(self, batch: Sequence[TrainingItem]) -> PreparedBatch:
        if not batch:
            raise InputError("empty training batch")
        y_plus = stack_latents([item[0] for item in batch])
        n = y_plus.shape[0]

        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 404]))
        y_minus = rng.standard_normal(y_plus.shape)
        t = rng.random(n)
        drop_seeds = rng.integers(0, 2**63 - 1, size=n)

        bundles = [
            apply_condition_dropout(item[1], self.dropout, int(s))
            for item, s in zip(batch, drop_seeds)
        ]
        styles, lyrics = stack_conditions(bundles)
        logger.debug(
            "condition dropout: style %.2f, lyrics %.2f", *dropout_rates(bundles)
        )

        tt = t[:, None, None]
        y_t = tt * y_plus + (1.0 - tt) * y_minus
        features = build_features(y_t, styles, lyrics, t)
        return PreparedBatch(
            features, {"target": y_plus - y_minus, "t": t}, {"seed": self.seed}
        )

    def head(
        self, velocity: np.ndarray, prepared: PreparedBatch
    ) -> Tuple[np.ndarray, np.ndarray]:
        diff = velocity - prepared.arrays["target"]
        per_entry = diff[0].size
        losses = np.mean(diff * diff, axis=(1, 2))
        return losses, 2.0 * diff / per_entry


def cfm_loss(
    theta: ModelParams,
    batch: Sequence[TrainingItem],
    seed: int,
    dropout: float = 0.0,
) -> float:
    """Mean flow-matching loss of one batch."""
    loss_fn = CfmLoss(seed, dropout)
    loss, _ = evaluate_prepared(theta, loss_fn.prepare(batch), loss_fn, with_grad=False)
    return loss


def _step_item(
    example: Example,
    cfg: TrainConfig,
    encoder: ConditionEncoder,
    rng: np.random.Generator,
) -> TrainingItem:
    length = example.latent.length
    window = length if cfg.max_len is None else min(cfg.max_len, length)
    if window < length:
        start = int(rng.integers(0, length - window + 1))
        example = crop(example, start, window)

    alignment = perturb_alignment(
        example.alignment, cfg.jitter, window, int(rng.integers(0, 2**32))
    )
    prompt = prompt_for_example(
        example, cfg.prompt_modality, rng, encoder.projections.tag_vocab
    )
    return example.latent, encoder.encode(prompt, alignment, window)


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    theta0: ModelParams,
    encoder: ConditionEncoder,
    snapshot: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> Checkpoint:
    """Shuffled minibatch AdamW on the CFM loss, keeping an EMA of the weights."""
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")

    theta = theta0.copy()
    optim = OptimState.create(
        theta, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps
    )
    ema = EmaState.create(theta, cfg.ema_decay, cfg.ema_interval)
    history: List[float] = []
    step = 0
    epochs_done = 0

    logger.info(
        "%s: %d sequences, %d epochs, lr %g, batch %d",
        cfg.stage.value,
        len(dataset),
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
    )

    for epoch in tqdm(
        range(cfg.epochs), desc=cfg.stage.value, disable=None if progress else True
    ):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        started = time.perf_counter()
        order_seed = np.random.SeedSequence([cfg.seed, 505, epoch])
        order_rng = np.random.default_rng(order_seed)
        order = order_rng.permutation(len(dataset))
        epoch_losses = []

        for offset in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 606, step]))
            batch = [
                _step_item(dataset[int(i)], cfg, encoder, rng)
                for i in order[offset : offset + cfg.batch_size]
            ]
            loss_seed = int(rng.integers(0, 2**63 - 1))
            try:
                loss, grads = loss_and_grad(
                    theta,
                    batch,
                    CfmLoss(loss_seed, cfg.dropout),
                    cfg.shards,
                    cfg.workers,
                )
            except NumericalError as e:
                raise NumericalError(
                    f"{cfg.stage.value} training diverged",
                    batch_index=e.batch_index,
                    step=step,
                    seed=loss_seed,
                ) from e

            optim, theta = adamw_step(optim, theta, grads)
            if not theta.is_finite():
                raise NumericalError(
                    "parameters became non-finite", step=step, seed=loss_seed
                )
            ema = ema_update(ema, theta)
            epoch_losses.append(loss)
            step += 1

        if not epoch_losses:
            break
        epochs_done = epoch + 1
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        line = (
            f"{epoch}\t{cfg.stage.value}\t{mean_loss:.6f}\t"
            f"{time.perf_counter() - started:.3f}"
        )
        logger.info("epoch %s", line.replace("\t", " "))
        if cfg.log_path:
            append_line(cfg.log_path, line)

    config = dict(snapshot) if snapshot is not None else _config_snapshot(cfg)
    return Checkpoint(
        params=theta,
        ema=ema,
        optim=optim,
        encoder=encoder,
        stage=cfg.stage.value,
        config=config,
        rng_state={"seed": cfg.seed, "epoch": epochs_done, "step": step},
        history=history,
    )


def _config_snapshot(cfg: TrainConfig) -> Dict[str, Any]:
    values = asdict(cfg)
    values["stage"] = cfg.stage.value
    return values
