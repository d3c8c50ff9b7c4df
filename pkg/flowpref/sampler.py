"""Euler ODE sampling under classifier-free guidance."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .conditioning import ConditionBundle, stack_conditions
from .data import DEFAULT_FRAME_RATE, LatentSeq
from .errors import ContractViolation, InputError, NumericalError
from .vectorfield import ModelParams, forward_batch

logger = logging.getLogger(__name__)

# field(t, y (N,L,D), style (N,S), lyrics (N,L,E)) -> velocity (N,L,D)
VelocityField = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SampleConfig:
    """Euler step count, guidance scale and base noise seed."""

    steps: int = 32
    cfg_scale: float = 4.0
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise InputError(f"cfg_scale must be non-negative, got {self.cfg_scale}")


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, s: float) -> np.ndarray:
    """Guided velocity v_uncond + s * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ContractViolation(f"{v_cond.shape} != {v_uncond.shape}")
    if s == 0:
        return np.array(v_uncond, dtype=np.float64)
    if s == 1:
        return np.array(v_cond, dtype=np.float64)
    return v_uncond + s * (v_cond - v_uncond)


def as_field(theta: ModelParams) -> VelocityField:
    """Wrap parameters as a callable velocity field."""
    def field(
        t: float, y: np.ndarray, style: np.ndarray, lyrics: np.ndarray
    ) -> np.ndarray:
        return forward_batch(theta, np.full(y.shape[0], t), y, style, lyrics)

    return field


def initial_noise(seed: int, length: int, dim: int) -> np.ndarray:
    """Standard normal starting state for one sample, keyed by its seed."""
    return np.random.default_rng(seed).standard_normal((length, dim))


def euler_sample_batch(
    field: Union[ModelParams, VelocityField],
    conditions: Sequence[ConditionBundle],
    cfg: SampleConfig,
    seeds: Optional[Sequence[int]] = None,
    latent_dim: Optional[int] = None,
    frame_rate: float = DEFAULT_FRAME_RATE,
) -> List[LatentSeq]:
    """Integrate dy/dt = guided velocity from t=0 to 1 for every condition.

    Sample i starts from noise seeded by seeds[i] (default cfg.seed + i) and
    is independent of the rest of the batch.
    """
    if not conditions:
        raise InputError("no conditions to sample")
    if isinstance(field, ModelParams):
        latent_dim = field.dims.latent_dim
        field = as_field(field)
    if latent_dim is None:
        raise InputError("latent_dim is required for a callable field")
    if seeds is None:
        seeds = [cfg.seed + i for i in range(len(conditions))]
    if len(seeds) != len(conditions):
        raise InputError(f"{len(seeds)} seeds for {len(conditions)} conditions")
    lengths = {c.length for c in conditions}
    if len(lengths) != 1:
        raise ContractViolation(f"conditions mix lengths {sorted(lengths)}")
    (length,) = lengths

    style, lyrics = stack_conditions(conditions)
    null_style = np.zeros_like(style)
    null_lyrics = np.zeros_like(lyrics)
    y = np.stack([initial_noise(int(s), length, latent_dim) for s in seeds])

    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k / cfg.steps
        if cfg.cfg_scale == 0:
            velocity = np.array(field(t, y, null_style, null_lyrics), dtype=np.float64)
        elif cfg.cfg_scale == 1:
            velocity = np.array(field(t, y, style, lyrics), dtype=np.float64)
        else:
            velocity = cfg_velocity(
                np.asarray(field(t, y, style, lyrics)),
                np.asarray(field(t, y, null_style, null_lyrics)),
                cfg.cfg_scale,
            )
        if velocity.shape != y.shape:
            raise ContractViolation(
                f"field returned {velocity.shape}, expected {y.shape}"
            )
        y = y + dt * velocity

        finite = np.isfinite(y).reshape(len(y), -1).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise NumericalError(
                "sampler state became non-finite",
                batch_index=bad,
                step=k,
                seed=int(seeds[bad]),
            )

    return [LatentSeq(sample, frame_rate) for sample in y]


def euler_sample(
    theta: Union[ModelParams, VelocityField],
    c: ConditionBundle,
    cfg: SampleConfig,
    latent_dim: Optional[int] = None,
    frame_rate: float = DEFAULT_FRAME_RATE,
) -> LatentSeq:
    """One sample seeded by cfg.seed."""
    (sample,) = euler_sample_batch(
        theta, [c], cfg, [cfg.seed], latent_dim=latent_dim, frame_rate=frame_rate
    )
    return sample
