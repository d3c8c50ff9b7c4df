"""Run configuration: one flat JSON object, every knob with its default."""

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import (
    Any,
    Dict,
    Mapping,
    Optional,
    Tuple,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SCORE_SOURCES = ("SongLike", "InstrumentalLike")
EMBEDDER_NAMES = ("mean_frame", "frame_vectors")

# Crop lengths of a full-scale run, in frames.
FULL_SCALE_PRETRAIN_MAX_LEN = 2048
FULL_SCALE_SFT_MAX_LEN = 6144


@dataclass(frozen=True)
class RunConfig:
    """Every pipeline knob; defaults are sized for a desk run."""

    seed: int = 0

    # synthetic data
    frame_rate: float = 10.0
    seq_len: int = 16
    latent_dim: int = 2
    n_train: int = 512
    n_heldout: int = 256
    mode_means: Tuple[Tuple[float, ...], ...] = ((-1.5, -1.5), (1.5, 1.5))
    mode_stdevs: Tuple[float, ...] = (0.3, 0.3)
    mode_weights: Tuple[float, ...] = (0.5, 0.5)
    tokens_per_seq: int = 4
    jitter: int = 1

    # conditioning
    style_dim: int = 8
    lyric_dim: int = 8
    tag_vocab: int = 16
    token_vocab: int = 32
    prompt_modality: str = "mixed"
    dropout: float = 0.2

    # vector field
    hidden: int = 64
    layers: int = 2

    # optimization
    pretrain_lr: float = 1e-4
    sft_lr: float = 1e-5
    dpo_lr: float = 1e-6
    epochs: int = 20
    sft_epochs: int = 10
    dpo_epochs: int = 8
    batch_size: int = 8
    dpo_batch_size: int = 8
    pretrain_max_len: Optional[int] = None
    sft_max_len: Optional[int] = None
    max_steps: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    ema_decay: float = 0.99
    ema_interval: int = 100
    shards: int = 1
    workers: int = 1

    # sampling
    sample_steps: int = 32
    cfg_scale: float = 4.0
    use_ema: bool = True

    # preference
    beta: float = 2000.0
    gap: float = 0.4
    winner_floor: float = 3.0
    candidates: int = 8
    n_prompts: int = 64
    winner_source: str = "generated"
    error_weighting: str = "velocity"
    sft_threshold: float = 3.0
    target_mode: int = 0
    scorer_sigma: float = 1.0
    scorer_source: str = "SongLike"

    # evaluation
    eval_samples: int = 256
    embedder: str = "mean_frame"
    grid_low: float = -3.0
    grid_high: float = 3.0
    grid_bins: int = 8

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        at_least_one = (
            "seq_len",
            "latent_dim",
            "n_train",
            "n_heldout",
            "style_dim",
            "lyric_dim",
            "tag_vocab",
            "token_vocab",
            "hidden",
            "batch_size",
            "dpo_batch_size",
            "ema_interval",
            "shards",
            "workers",
            "sample_steps",
            "n_prompts",
            "eval_samples",
            "grid_bins",
        )
        for key in at_least_one:
            if getattr(self, key) < 1:
                raise ConfigurationError("must be >= 1", key=key)
        non_negative = (
            "seed",
            "tokens_per_seq",
            "jitter",
            "layers",
            "epochs",
            "sft_epochs",
            "dpo_epochs",
            "target_mode",
        )
        for key in non_negative:
            if getattr(self, key) < 0:
                raise ConfigurationError("must be >= 0", key=key)
        for key in ("pretrain_max_len", "sft_max_len"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ConfigurationError("must be >= 1 or null", key=key)
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError("must be >= 0 or null", key="max_steps")
        positive = (
            "frame_rate",
            "pretrain_lr",
            "sft_lr",
            "dpo_lr",
            "beta",
            "scorer_sigma",
            "eps",
        )
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigurationError("must be positive", key=key)
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigurationError("must be in [0, 1)", key=key)
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("must be in (0, 1)", key="ema_decay")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigurationError("must be in [0, 1]", key="dropout")
        for key in ("cfg_scale", "gap", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigurationError("must be non-negative", key=key)
        if self.candidates < 2:
            raise ConfigurationError("must be >= 2", key="candidates")
        if not 1.0 <= self.sft_threshold <= 5.0:
            raise ConfigurationError("must be on the 1-5 scale", key="sft_threshold")
        if not self.grid_high > self.grid_low:
            raise ConfigurationError("must exceed grid_low", key="grid_high")

        choices = {
            "prompt_modality": ("audio", "text", "mixed"),
            "winner_source": ("generated", "ground-truth"),
            "error_weighting": ("velocity", "noise"),
            "scorer_source": SCORE_SOURCES,
            "embedder": EMBEDDER_NAMES,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigurationError(
                    f"must be one of {', '.join(allowed)}, got {getattr(self, key)!r}",
                    key=key,
                )

        modes = len(self.mode_means)
        if modes == 0:
            raise ConfigurationError("needs at least one mode", key="mode_means")
        if any(len(mean) != self.latent_dim for mean in self.mode_means):
            raise ConfigurationError(
                f"every mean needs {self.latent_dim} entries", key="mode_means"
            )
        for key in ("mode_stdevs", "mode_weights"):
            if len(getattr(self, key)) != modes:
                raise ConfigurationError(f"needs {modes} entries", key=key)
        if any(s < 0 for s in self.mode_stdevs):
            raise ConfigurationError("must be non-negative", key="mode_stdevs")
        if any(not w > 0 for w in self.mode_weights):
            raise ConfigurationError("must be positive", key="mode_weights")
        if self.target_mode >= modes:
            raise ConfigurationError(f"no mode {self.target_mode}", key="target_mode")

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(serialize_config(self))

    def with_full_scale_lengths(self) -> "RunConfig":
        """This config cropping pretraining and SFT windows at full-scale lengths."""
        return replace(
            self,
            pretrain_max_len=FULL_SCALE_PRETRAIN_MAX_LEN,
            sft_max_len=FULL_SCALE_SFT_MAX_LEN,
        )


def _coerce(key: str, value: Any, kind: Any) -> Any:
    origin = get_origin(kind)
    if origin is Union:
        inner = [arg for arg in get_args(kind) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, inner[0])
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"expected a list, got {value!r}", key=key)
        item_kind = get_args(kind)[0]
        return tuple(_coerce(key, item, item_kind) for item in value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"expected true/false, got {value!r}", key=key)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"expected an integer, got {value!r}", key=key)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"expected a number, got {value!r}", key=key)
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"expected a string, got {value!r}", key=key)
        return value
    raise ConfigurationError(f"unsupported type {kind}", key=key)


def config_keys() -> Dict[str, Any]:
    """Key name -> declared type, in declaration order."""
    hints = get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def config_from_dict(
    values: Mapping[str, Any], base: Optional[RunConfig] = None
) -> RunConfig:
    """Apply `values` over `base` (or the defaults), validating every key."""
    kinds = config_keys()
    merged = asdict(base) if base is not None else {}
    for key, value in values.items():
        if key not in kinds:
            raise ConfigurationError("unknown configuration key", key=key)
        merged[key] = _coerce(key, value, kinds[key])
    return RunConfig(**merged)


def parse_config(path: Optional[str]) -> RunConfig:
    """Load a flat JSON config; absent keys take their defaults."""
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {path}: {e}")
        if text.strip():
            try:
                values = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path} is not valid JSON: {e}")
            if not isinstance(values, dict):
                raise ConfigurationError(f"{path} must hold a JSON object")

    cfg = config_from_dict(values)
    logger.info("resolved config: %s", serialize_config(cfg))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical JSON for a config: sorted keys, tuples as arrays."""
    return json.dumps(asdict(cfg), sort_keys=True)
