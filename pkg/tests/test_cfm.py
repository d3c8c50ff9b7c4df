"""Tests for the flow-matching objective and staged training."""

import numpy as np
import pytest

from flowpref.cfm import (
    STAGE_LEARNING_RATES,
    CfmLoss,
    Stage,
    TrainConfig,
    cfm_loss,
    sample_path_point,
    stack_latents,
    train,
)
from flowpref.conditioning import ConditionEncoder, StylePrompt
from flowpref.data import (
    Dataset,
    LatentSeq,
    LyricAlignment,
    MixtureMode,
    MixtureSpec,
    make_mixture_dataset,
)
from flowpref.errors import ContractViolation, InputError
from flowpref.vectorfield import (
    FieldDims,
    PreparedBatch,
    evaluate_prepared,
    init_params,
    loss_and_grad,
)

DIMS = FieldDims(latent_dim=2, style_dim=4, lyric_dim=4, hidden=16, layers=1)


def make_encoder():
    return ConditionEncoder.create(2, 4, 4, tag_vocab=8, token_vocab=32, seed=0)


def make_dataset(n=16, seed=0):
    spec = MixtureSpec(
        [MixtureMode((-1.5, -1.5), 0.3, 0.5), MixtureMode((1.5, 1.5), 0.3, 0.5)],
        seq_len=8,
        dim=2,
    )
    return make_mixture_dataset(spec, n, seed)


def make_batch(encoder, tags, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (
            LatentSeq(rng.standard_normal((6, 2))),
            encoder.encode(
                StylePrompt.from_tags({tag}), LyricAlignment((tag,), (1,)), 6
            ),
        )
        for tag in tags
    ]


class TestPathPoint:
    """Test points on the straight noise-to-data path."""

    def test_endpoints(self):
        """Test t=0 is the noise and t=1 is the data."""
        noise = np.full((3, 2), -1.0)
        data = np.full((3, 2), 2.0)
        assert np.array_equal(sample_path_point(noise, data, 0.0).y_t, noise)
        assert np.array_equal(sample_path_point(noise, data, 1.0).y_t, data)

    def test_midpoint_and_velocity(self):
        """Test the interpolant and its constant target velocity."""
        point = sample_path_point(np.zeros((2, 2)), np.full((2, 2), 4.0), 0.25)
        assert np.allclose(point.y_t, 1.0)
        assert np.array_equal(point.u_t, np.full((2, 2), 4.0))

    def test_shape_mismatch(self):
        """Test noise and data of different shapes."""
        with pytest.raises(ContractViolation):
            sample_path_point(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)

    def test_t_out_of_range(self):
        """Test t below zero."""
        with pytest.raises(InputError):
            sample_path_point(np.zeros((2, 2)), np.zeros((2, 2)), -0.1)


class TestTrainConfig:
    """Test training configuration defaults and validation."""

    def test_stage_learning_rates(self):
        """Test each stage falls back to its own learning rate."""
        assert TrainConfig(stage=Stage.PRETRAIN).learning_rate == 1e-4
        assert TrainConfig(stage="sft").learning_rate == STAGE_LEARNING_RATES[Stage.SFT]

    def test_string_stage_is_coerced(self):
        """Test stage names become enum members."""
        assert TrainConfig(stage="sft").stage is Stage.SFT

    def test_explicit_learning_rate(self):
        """Test an explicit lr wins over the stage default."""
        assert TrainConfig(stage="sft", lr=3e-3).learning_rate == 3e-3

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lr": 0.0},
            {"epochs": -1},
            {"batch_size": 0},
            {"dropout": 1.5},
            {"max_len": 0},
            {"max_steps": -1},
            {"prompt_modality": "video"},
        ],
    )
    def test_invalid_values(self, kwargs):
        """Test out-of-range hyperparameters."""
        with pytest.raises(InputError):
            TrainConfig(**kwargs)

    def test_unknown_stage(self):
        """Test a stage that does not exist."""
        with pytest.raises(ValueError):
            TrainConfig(stage="dpo")


class TestCfmLoss:
    """Test the velocity regression loss."""

    def test_deterministic_per_seed(self):
        """Test the same seed gives the same loss and another seed does not."""
        encoder = make_encoder()
        theta = init_params(DIMS, seed=0, zero_output=False)
        batch = make_batch(encoder, [1, 2, 3])
        assert cfm_loss(theta, batch, seed=5) == cfm_loss(theta, batch, seed=5)
        assert cfm_loss(theta, batch, seed=5) != cfm_loss(theta, batch, seed=6)

    def test_zero_field_loss_is_target_energy(self):
        """Test a zero velocity field scores the mean squared target."""
        encoder = make_encoder()
        theta = init_params(DIMS, seed=0)
        batch = make_batch(encoder, [1, 2, 3, 4])
        prepared = CfmLoss(seed=9).prepare(batch)
        expected = np.mean(prepared.arrays["target"] ** 2)
        assert np.isclose(cfm_loss(theta, batch, seed=9), expected, rtol=1e-12)

    def test_targets_are_data_minus_noise(self):
        """Test interpolants lie on the straight path for their t."""
        encoder = make_encoder()
        batch = make_batch(encoder, [1, 2])
        prepared = CfmLoss(seed=3).prepare(batch)
        data = stack_latents([item[0] for item in batch])
        noise = data - prepared.arrays["target"]
        t = prepared.arrays["t"][:, None, None]
        y_t = prepared.features[..., :2]
        np.testing.assert_allclose(y_t, t * data + (1.0 - t) * noise, atol=1e-12)

    def test_full_dropout_ignores_prompt(self):
        """Test dropout 1.0 makes gradients independent of the prompt."""
        encoder = make_encoder()
        theta = init_params(DIMS, seed=1, zero_output=False)
        first = make_batch(encoder, [1, 2, 3])
        second = make_batch(encoder, [5, 6, 7])
        _, grads_a = loss_and_grad(theta, first, CfmLoss(seed=2, dropout=1.0))
        _, grads_b = loss_and_grad(theta, second, CfmLoss(seed=2, dropout=1.0))
        for name in grads_a:
            assert np.array_equal(grads_a[name], grads_b[name])

    def test_prompt_matters_without_dropout(self):
        """Test different prompts change the gradient when nothing is dropped."""
        encoder = make_encoder()
        theta = init_params(DIMS, seed=1, zero_output=False)
        _, grads_a = loss_and_grad(theta, make_batch(encoder, [1]), CfmLoss(seed=2))
        _, grads_b = loss_and_grad(theta, make_batch(encoder, [5]), CfmLoss(seed=2))
        assert not np.array_equal(grads_a["in.weight"], grads_b["in.weight"])

    def test_prepared_rows_can_be_reordered(self):
        """Test permuting a prepared batch leaves the mean loss and gradient alone."""
        encoder = make_encoder()
        theta = init_params(DIMS, seed=0, zero_output=False)
        loss_fn = CfmLoss(seed=3, dropout=0.5)
        prepared = loss_fn.prepare(make_batch(encoder, [1, 2, 3, 4]))
        order = np.array([2, 0, 3, 1])
        permuted = PreparedBatch(
            prepared.features[order],
            {key: value[order] for key, value in prepared.arrays.items()},
            prepared.meta,
        )
        loss, grads = evaluate_prepared(theta, prepared, loss_fn)
        reordered, reordered_grads = evaluate_prepared(
            theta, permuted, loss_fn, shards=2
        )
        assert np.isclose(loss, reordered, rtol=1e-12, atol=0)
        for name in grads:
            np.testing.assert_allclose(
                grads[name], reordered_grads[name], rtol=1e-10, atol=1e-12
            )

    def test_draws_follow_batch_position(self):
        """Test time draws belong to positions, not to items."""
        encoder = make_encoder()
        batch = make_batch(encoder, [1, 2, 3])
        loss_fn = CfmLoss(seed=3)
        forward_order = loss_fn.prepare(batch)
        backward_order = loss_fn.prepare(batch[::-1])
        assert np.array_equal(forward_order.arrays["t"], backward_order.arrays["t"])
        assert not np.array_equal(
            forward_order.arrays["target"], backward_order.arrays["target"][::-1]
        )

    def test_mixed_lengths_rejected(self):
        """Test a batch mixing sequence lengths."""
        with pytest.raises(ContractViolation):
            stack_latents([np.zeros((4, 2)), np.zeros((5, 2))])

    def test_empty_batch(self):
        """Test an empty batch."""
        with pytest.raises(InputError):
            CfmLoss(seed=0).prepare([])


class TestTrain:
    """Test staged training."""

    def config(self, **overrides):
        values = {"lr": 1e-2, "epochs": 2, "batch_size": 4, "ema_interval": 2}
        values.update(overrides)
        return TrainConfig(**values)

    def test_deterministic(self):
        """Test two runs from the same seed are bitwise identical."""
        dataset = make_dataset()
        encoder = make_encoder()
        theta0 = init_params(DIMS, seed=0)
        a = train(self.config(), dataset, theta0, encoder)
        b = train(self.config(), dataset, theta0, encoder)
        assert a.params.equals(b.params)
        assert a.ema.shadow.equals(b.ema.shadow)
        assert a.history == b.history

    def test_leaves_initial_params_untouched(self):
        """Test training works on a copy of theta0."""
        theta0 = init_params(DIMS, seed=0)
        before = theta0.copy()
        train(self.config(), make_dataset(), theta0, make_encoder())
        assert theta0.equals(before)

    def test_checkpoint_fields(self):
        """Test the returned checkpoint records stage, steps and history."""
        checkpoint = train(
            self.config(stage="sft"),
            make_dataset(),
            init_params(DIMS, 0),
            make_encoder(),
        )
        assert checkpoint.stage == "sft"
        assert checkpoint.rng_state == {"seed": 0, "epoch": 2, "step": 8}
        assert len(checkpoint.history) == 2
        assert checkpoint.optim.step == 8
        assert checkpoint.ema.counter == 8

    def test_max_steps(self):
        """Test training stops after max_steps optimizer steps."""
        checkpoint = train(
            self.config(epochs=5, max_steps=3),
            make_dataset(),
            init_params(DIMS, 0),
            make_encoder(),
        )
        assert checkpoint.optim.step == 3
        assert checkpoint.rng_state["epoch"] == 1

    def test_zero_epochs(self):
        """Test zero epochs returns the initial parameters."""
        theta0 = init_params(DIMS, seed=0)
        cfg = self.config(epochs=0)
        checkpoint = train(cfg, make_dataset(), theta0, make_encoder())
        assert checkpoint.params.equals(theta0)
        assert checkpoint.history == []

    def test_max_len_crops(self):
        """Test cropped windows still train."""
        checkpoint = train(
            self.config(max_len=4), make_dataset(), init_params(DIMS, 0), make_encoder()
        )
        assert checkpoint.params.is_finite()

    def test_log_lines(self, tmp_path):
        """Test one tab-separated log line per epoch."""
        log_path = tmp_path / "train_log.tsv"
        train(
            self.config(epochs=3, log_path=str(log_path)),
            make_dataset(),
            init_params(DIMS, 0),
            make_encoder(),
        )
        lines = log_path.read_text().splitlines()
        assert len(lines) == 3
        epoch, stage, loss, seconds = lines[2].split("\t")
        assert epoch == "2"
        assert stage == "pretrain"
        assert float(loss) > 0
        assert float(seconds) >= 0

    def test_loss_decreases(self):
        """Test the epoch loss falls over a short run."""
        checkpoint = train(
            self.config(epochs=30, ema_interval=100),
            make_dataset(n=32),
            init_params(DIMS, 0),
            make_encoder(),
        )
        assert np.mean(checkpoint.history[-5:]) < checkpoint.history[0]

    def test_shards_match_single_pass(self):
        """Test sharded training tracks the unsharded run closely."""
        dataset = make_dataset()
        encoder = make_encoder()
        theta0 = init_params(DIMS, seed=0)
        single = train(self.config(), dataset, theta0, encoder)
        sharded = train(self.config(shards=2, workers=2), dataset, theta0, encoder)
        for name, value in single.params.items():
            np.testing.assert_allclose(sharded.params[name], value, atol=1e-8)

    def test_empty_dataset(self):
        """Test training on no data."""
        with pytest.raises(InputError):
            train(self.config(), Dataset([]), init_params(DIMS, 0), make_encoder())

    def test_snapshot_is_stored(self):
        """Test a caller-supplied config snapshot lands in the checkpoint."""
        checkpoint = train(
            self.config(epochs=1),
            make_dataset(),
            init_params(DIMS, 0),
            make_encoder(),
            snapshot={"seed": 4},
        )
        assert checkpoint.config == {"seed": 4}
