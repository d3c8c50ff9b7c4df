"""flowpref - flow-matching generation with preference optimization."""

__version__ = "1.0.0"

from .cfm import Stage, TrainConfig, cfm_loss, train
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import ConditionBundle, ConditionEncoder, Prompt, StylePrompt
from .config import RunConfig, parse_config
from .data import Dataset, LatentSeq, MixtureSpec, make_mixture_dataset
from .metrics import frechet_distance, kl_divergence, rtf
from .pipeline import Pipeline
from .preference import DpoConfig, PreferencePair, build_pairs, dpo_loss, dpo_train
from .sampler import SampleConfig, euler_sample, euler_sample_batch
from .scorers import AestheticScore, ModeAffinityScorer, Scorer
from .vectorfield import FieldDims, ModelParams, init_params

__all__ = [
    "AestheticScore",
    "Checkpoint",
    "ConditionBundle",
    "ConditionEncoder",
    "Dataset",
    "DpoConfig",
    "FieldDims",
    "LatentSeq",
    "MixtureSpec",
    "ModeAffinityScorer",
    "ModelParams",
    "Pipeline",
    "PreferencePair",
    "Prompt",
    "RunConfig",
    "SampleConfig",
    "Scorer",
    "Stage",
    "StylePrompt",
    "TrainConfig",
    "build_pairs",
    "cfm_loss",
    "dpo_loss",
    "dpo_train",
    "euler_sample",
    "euler_sample_batch",
    "frechet_distance",
    "init_params",
    "kl_divergence",
    "load_checkpoint",
    "make_mixture_dataset",
    "parse_config",
    "rtf",
    "save_checkpoint",
    "train",
]
