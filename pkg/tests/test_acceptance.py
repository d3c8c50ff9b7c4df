"""Desk-scale training runs checking the pipeline learns what it should.

These take tens of seconds each; deselect with ``-m "not slow"``.
"""

import numpy as np
import pytest

from flowpref.cfm import TrainConfig, train
from flowpref.checkpoint import Checkpoint
from flowpref.conditioning import ConditionEncoder, Prompt
from flowpref.data import MixtureMode, MixtureSpec, assign_mode, make_mixture_dataset
from flowpref.metrics import BinGrid, featurize, frame_vectors, frechet_distance
from flowpref.preference import DpoConfig, build_pairs, dpo_train
from flowpref.sampler import SampleConfig, euler_sample_batch
from flowpref.scorers import ModeAffinityScorer, score_batch
from flowpref.vectorfield import FieldDims, ModelParams, init_params

# Acceptance thresholds for desk-scale runs.
RECOVERY_RATIO = 0.3
PREFERENCE_SHIFT = 0.2

SEQ_LEN = 16
DIMS = FieldDims(latent_dim=2, style_dim=8, lyric_dim=8, hidden=64, layers=2)
SPEC = MixtureSpec(
    [
        MixtureMode((-1.5, -1.5), 0.3, 0.5),
        MixtureMode((1.5, 1.5), 0.3, 0.5),
    ],
    seq_len=SEQ_LEN,
)
TARGET = 0


def make_encoder():
    return ConditionEncoder.create(2, 8, 8, tag_vocab=16, token_vocab=32, seed=0)


def pretrain(steps: int) -> Checkpoint:
    """Unconditional pretraining: every condition is dropped."""
    dataset = make_mixture_dataset(SPEC, 512, seed=0)
    cfg = TrainConfig(
        lr=1e-3,
        epochs=steps // 16 + 1,
        batch_size=32,
        dropout=1.0,
        max_steps=steps,
    )
    return train(cfg, dataset, init_params(DIMS, seed=0), make_encoder())


def generate(theta: ModelParams, n: int, seed: int):
    conditions = [make_encoder().null(SEQ_LEN)] * n
    cfg = SampleConfig(steps=32, cfg_scale=1.0, seed=seed)
    return euler_sample_batch(theta, conditions, cfg)


def target_rate(samples) -> float:
    means = SPEC.means()
    return float(np.mean([assign_mode(x, means) == TARGET for x in samples]))


@pytest.mark.slow
class TestDistributionRecovery:
    """Test CFM training moves samples onto the data distribution."""

    def test_frechet_distance_drops(self):
        """Test trained samples sit much closer to held-out data than noise."""
        heldout = make_mixture_dataset(SPEC, 256, seed=1).latents
        grid = BinGrid()
        reference, _ = featurize(heldout, grid, frame_vectors)

        untrained, _ = featurize(
            generate(init_params(DIMS, seed=0), 256, seed=100), grid, frame_vectors
        )
        checkpoint = pretrain(5000)
        trained, _ = featurize(
            generate(checkpoint.params, 256, seed=100), grid, frame_vectors
        )

        before = frechet_distance(untrained, reference)
        after = frechet_distance(trained, reference)
        assert before > 1.0
        assert after <= RECOVERY_RATIO * before


@pytest.mark.slow
class TestPreferenceShift:
    """Test DPO against a mode-affinity scorer moves mass to the target mode."""

    def test_target_mode_rate_rises(self):
        """Test the target-mode fraction of fixed-seed samples increases."""
        checkpoint = pretrain(2000)
        scorer = ModeAffinityScorer(SPEC.means()[TARGET], sigma=2.0)
        dpo_cfg = DpoConfig(lr=1e-3, batch_size=8)

        prompt = Prompt.null(SEQ_LEN, 2)
        pairs = []
        for index in range(64):
            candidates = generate(checkpoint.params, 8, seed=10_000 + 8 * index)
            scored = [(x, s) for _, x, s in score_batch(scorer, candidates, prompt)]
            pair = build_pairs(scored, prompt, dpo_cfg)
            if pair is not None:
                pairs.append(pair)
        assert len(pairs) > 16

        tuned = dpo_train(dpo_cfg, pairs, checkpoint)
        before = target_rate(generate(checkpoint.params, 500, seed=0))
        after = target_rate(generate(tuned.params, 500, seed=0))
        assert after >= before + PREFERENCE_SHIFT
