"""Tests for the vector field, its gradients, AdamW and EMA."""

import math

import numpy as np
import pytest

from flowpref.cfm import CfmLoss
from flowpref.conditioning import (
    ConditionBundle,
    ConditionEncoder,
    StyleEmbedding,
    StylePrompt,
)
from flowpref.data import LatentSeq, LyricAlignment
from flowpref.errors import ContractViolation, InputError, NumericalError
from flowpref.vectorfield import (
    TIME_FEATURES,
    EmaState,
    FieldDims,
    LossFunction,
    ModelParams,
    OptimState,
    PreparedBatch,
    adamw_step,
    build_features,
    ema_update,
    evaluate_prepared,
    forward,
    forward_batch,
    gradient_check,
    init_params,
    loss_and_grad,
    timestep_features,
)

DIMS = FieldDims(latent_dim=2, style_dim=4, lyric_dim=3, hidden=16, layers=1)


def make_batch(n=3, length=5, seed=0):
    encoder = ConditionEncoder.create(2, 4, 3, tag_vocab=8, token_vocab=10, seed=0)
    rng = np.random.default_rng(seed)
    batch = []
    for i in range(n):
        x = LatentSeq(rng.standard_normal((length, 2)) + 1.0)
        c = encoder.encode(
            StylePrompt.from_tags({i % 8}), LyricAlignment((i, 9), (0, 2)), length
        )
        batch.append((x, c))
    return batch


class ScaledLoss(LossFunction):
    """CFM loss times a constant."""

    def __init__(self, inner, k):
        self.inner = inner
        self.k = k

    def prepare(self, batch):
        return self.inner.prepare(batch)

    def head(self, velocity, prepared):
        losses, d_velocity = self.inner.head(velocity, prepared)
        return self.k * losses, self.k * d_velocity


class ZeroLoss(CfmLoss):
    """Identically zero loss on CFM inputs."""

    def head(self, velocity, prepared):
        return np.zeros(velocity.shape[0]), np.zeros_like(velocity)


class NanLoss(CfmLoss):
    """Non-finite loss at batch element 1."""

    def head(self, velocity, prepared):
        losses = np.zeros(velocity.shape[0])
        losses[1] = np.nan
        return losses, np.zeros_like(velocity)


class TestFieldDims:
    """Test parameter layout."""

    def test_in_features(self):
        """Test the per-frame input width."""
        assert DIMS.in_features == 2 + 4 + 3 + TIME_FEATURES

    def test_shapes_order(self):
        """Test parameter names come in forward order."""
        assert list(DIMS.shapes()) == [
            "in.weight",
            "in.bias",
            "hidden0.weight",
            "hidden0.bias",
            "out.weight",
            "out.bias",
        ]

    def test_no_hidden_layers(self):
        """Test layers=0 leaves only the input and output projections."""
        dims = FieldDims(layers=0)
        expected = ["in.weight", "in.bias", "out.weight", "out.bias"]
        assert list(dims.shapes()) == expected


class TestModelParams:
    """Test parameter containers and initialization."""

    def test_init_is_seeded(self):
        """Test the same seed gives the same parameters."""
        assert init_params(DIMS, seed=1).equals(init_params(DIMS, seed=1))
        assert not init_params(DIMS, seed=1).equals(init_params(DIMS, seed=2))

    def test_output_starts_at_zero(self):
        """Test the default initialization zeroes the output projection."""
        theta = init_params(DIMS, seed=0)
        assert not np.any(theta["out.weight"])
        assert not np.any(theta["out.bias"])
        assert np.any(theta["in.weight"])

    def test_nonzero_output(self):
        """Test zero_output=False initializes every tensor."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        assert np.any(theta["out.weight"])

    def test_rejects_wrong_shape(self):
        """Test a tensor of the wrong shape."""
        tensors = dict(init_params(DIMS, seed=0).tensors)
        tensors["in.bias"] = np.zeros(3)
        with pytest.raises(ContractViolation, match="in.bias"):
            ModelParams(DIMS, tensors)

    def test_rejects_missing_tensor(self):
        """Test a missing tensor."""
        tensors = dict(init_params(DIMS, seed=0).tensors)
        del tensors["out.bias"]
        with pytest.raises(ContractViolation):
            ModelParams(DIMS, tensors)

    def test_copy_is_independent(self):
        """Test copies do not share memory."""
        theta = init_params(DIMS, seed=0)
        clone = theta.copy()
        clone.tensors["in.bias"][0] += 1.0
        assert not theta.equals(clone)


class TestFeatures:
    """Test timestep and per-frame features."""

    def test_timestep_features_at_zero(self):
        """Test t=0 gives sines of 0 and cosines of 1."""
        feats = timestep_features(np.array([0.0]))
        assert feats.shape == (1, TIME_FEATURES)
        half = TIME_FEATURES // 2
        assert np.array_equal(feats[0, :half], np.zeros(half))
        assert np.array_equal(feats[0, half:], np.ones(half))

    def test_timestep_frequencies(self):
        """Test frequencies 10 * 10000^(-j/4), sines before cosines."""
        t = np.array([0.25, 1.0])
        freqs = 10.0 * 10_000.0 ** (-np.arange(4) / 4)
        feats = timestep_features(t)
        np.testing.assert_allclose(feats[:, :4], np.sin(t[:, None] * freqs), atol=1e-12)
        np.testing.assert_allclose(feats[:, 4:], np.cos(t[:, None] * freqs), atol=1e-12)
        # the lowest frequency turns through 0.01 rad over the unit interval
        assert np.isclose(freqs[-1], 0.01)

    def test_build_features_shape(self):
        """Test (N, L, F) output."""
        features = build_features(
            np.zeros((2, 5, 2)),
            np.zeros((2, 4)),
            np.zeros((2, 5, 3)),
            np.array([0.1, 0.9]),
        )
        assert features.shape == (2, 5, DIMS.in_features)

    def test_build_features_rejects_t_outside_unit_interval(self):
        """Test t > 1."""
        with pytest.raises(InputError, match="t must"):
            build_features(
                np.zeros((1, 5, 2)),
                np.zeros((1, 4)),
                np.zeros((1, 5, 3)),
                np.array([1.5]),
            )

    def test_build_features_rejects_mismatch(self):
        """Test lyric frames disagreeing with the latent length."""
        with pytest.raises(ContractViolation):
            build_features(
                np.zeros((1, 5, 2)),
                np.zeros((1, 4)),
                np.zeros((1, 4, 3)),
                np.array([0.5]),
            )


class TestForward:
    """Test evaluating the field."""

    def test_zero_output_gives_zero_velocity(self):
        """Test freshly initialized weights predict zero velocity."""
        x, c = make_batch(1)[0]
        v = forward(init_params(DIMS, seed=0), 0.3, x, c)
        assert v.shape == (5, 2)
        assert not np.any(v)

    def test_forward_matches_forward_batch(self):
        """Test single and batched evaluation agree."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        (x, c), _ = make_batch(2)
        single = forward(theta, 0.4, x, c)
        batched = forward_batch(
            theta,
            np.array([0.4]),
            x.frames[None],
            c.style.vec[None],
            c.lyric_frames[None],
        )
        np.testing.assert_allclose(single, batched[0], rtol=1e-12, atol=1e-14)

    def test_frames_are_independent(self):
        """Test changing one frame leaves other frames' velocities unchanged."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        x, c = make_batch(1)[0]
        before = forward(theta, 0.5, x, c)
        frames = x.frames.copy()
        frames[0] += 3.0
        after = forward(theta, 0.5, LatentSeq(frames), c)
        assert not np.allclose(before[0], after[0])
        np.testing.assert_allclose(before[1:], after[1:], rtol=1e-12, atol=1e-14)

    def test_matches_elementwise_network(self):
        """Test a tiny network against a frame-by-frame scalar evaluation."""
        dims = FieldDims(latent_dim=2, style_dim=2, lyric_dim=1, hidden=3, layers=1)
        theta = init_params(dims, seed=5, zero_output=False)
        rng = np.random.default_rng(2)
        frames = rng.standard_normal((4, 2))
        style = np.array([0.6, -0.8])
        lyrics = rng.standard_normal((4, 1))
        t = 0.37
        c = ConditionBundle(StyleEmbedding(style), lyrics)

        def layer(inputs, name):
            weight, bias = theta[f"{name}.weight"], theta[f"{name}.bias"]
            return [
                sum(inputs[i] * weight[i, k] for i in range(len(inputs))) + bias[k]
                for k in range(weight.shape[1])
            ]

        angles = [t * 10.0 * 10_000.0 ** (-j / 4) for j in range(4)]
        time = [math.sin(a) for a in angles] + [math.cos(a) for a in angles]
        expected = []
        for row in range(4):
            x = list(frames[row]) + list(style) + list(lyrics[row]) + time
            h = [math.tanh(v) for v in layer(x, "in")]
            h = [math.tanh(v) for v in layer(h, "hidden0")]
            expected.append(layer(h, "out"))

        v = forward(theta, t, LatentSeq(frames), c)
        np.testing.assert_allclose(v, np.array(expected), rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        """Test a condition of another length."""
        theta = init_params(DIMS, seed=0)
        x, _ = make_batch(1, length=5)[0]
        _, c = make_batch(1, length=6)[0]
        with pytest.raises(ContractViolation, match="frames"):
            forward(theta, 0.5, x, c)


class TestGradients:
    """Test analytic gradients."""

    def test_finite_difference_agreement(self):
        """Test central differences agree with backprop on 100 parameters."""
        theta = init_params(DIMS, seed=3, zero_output=False)
        worst = gradient_check(
            theta, make_batch(4), CfmLoss(seed=11, dropout=0.3), n_params=100, h=1e-5
        )
        assert worst <= 1e-4

    def test_deeper_network(self):
        """Test gradients through two hidden layers."""
        dims = FieldDims(latent_dim=2, style_dim=4, lyric_dim=3, hidden=8, layers=2)
        theta = init_params(dims, seed=5, zero_output=False)
        worst = gradient_check(theta, make_batch(3), CfmLoss(seed=2), n_params=100)
        assert worst <= 1e-4

    def test_zero_loss_gives_zero_gradients(self):
        """Test an identically zero loss has zero gradients."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        loss, grads = loss_and_grad(theta, make_batch(3), ZeroLoss(seed=0))
        assert loss == 0.0
        for value in grads.values():
            assert not np.any(value)

    def test_gradient_is_linear_in_loss(self):
        """Test scaling the loss by k scales the gradient by k."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        batch = make_batch(3)
        _, grads = loss_and_grad(theta, batch, CfmLoss(seed=4))
        _, scaled = loss_and_grad(theta, batch, ScaledLoss(CfmLoss(seed=4), 3.0))
        for name in grads:
            np.testing.assert_allclose(
                scaled[name], 3.0 * grads[name], rtol=1e-12, atol=1e-12
            )

    def test_loss_and_grad_leaves_theta_untouched(self):
        """Test gradient evaluation does not modify the parameters."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        before = theta.copy()
        loss_and_grad(theta, make_batch(3), CfmLoss(seed=4))
        assert theta.equals(before)

    def test_shards_agree_with_single_pass(self):
        """Test sharded evaluation matches the unsharded mean."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        loss_fn = CfmLoss(seed=8)
        prepared = loss_fn.prepare(make_batch(5))
        loss, grads = evaluate_prepared(theta, prepared, loss_fn)
        sharded, sharded_grads = evaluate_prepared(
            theta, prepared, loss_fn, shards=3, workers=2
        )
        assert np.isclose(loss, sharded, rtol=1e-12)
        for name in grads:
            np.testing.assert_allclose(
                grads[name], sharded_grads[name], rtol=1e-10, atol=1e-12
            )

    def test_sharded_reduction_is_deterministic(self):
        """Test repeated sharded runs are bitwise identical."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        loss_fn = CfmLoss(seed=8)
        prepared = loss_fn.prepare(make_batch(6))
        a = evaluate_prepared(theta, prepared, loss_fn, shards=3, workers=3)
        b = evaluate_prepared(theta, prepared, loss_fn, shards=3, workers=3)
        assert a[0] == b[0]
        for name in a[1]:
            assert np.array_equal(a[1][name], b[1][name])

    def test_non_finite_loss_names_batch_element(self):
        """Test a NaN loss raises NumericalError with its batch index."""
        theta = init_params(DIMS, seed=0)
        with pytest.raises(NumericalError) as exc_info:
            loss_and_grad(theta, make_batch(3), NanLoss(seed=21))
        assert exc_info.value.batch_index == 1
        assert exc_info.value.seed == 21

    def test_prepared_batch_split(self):
        """Test splitting keeps every element in order."""
        prepared = PreparedBatch(np.arange(5.0)[:, None], {"t": np.arange(5.0)})
        parts = prepared.split(2)
        assert [len(p) for p in parts] == [3, 2]
        assert np.array_equal(parts[1].arrays["t"], [3.0, 4.0])
        assert len(prepared.split(10)) == 5


def scalar_dims():
    return FieldDims(latent_dim=1, style_dim=1, lyric_dim=1, hidden=1, layers=0)


class TestAdamW:
    """Test the AdamW update."""

    def test_zero_gradient_without_decay(self):
        """Test parameters stay put with zero gradients and no decay."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        state = OptimState.create(theta, lr=1e-3, weight_decay=0.0)
        _, updated = adamw_step(state, theta, theta.zeros_like().tensors)
        assert updated.equals(theta)

    def test_decoupled_weight_decay(self):
        """Test zero gradient with decay gives theta - lr * wd * theta."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        lr, wd = 1e-3, 0.1
        state = OptimState.create(theta, lr=lr, weight_decay=wd)
        _, updated = adamw_step(state, theta, theta.zeros_like().tensors)
        for name, value in theta.items():
            assert np.array_equal(updated[name], value - lr * wd * value)

    def test_first_step_closed_form(self):
        """Test the bias-corrected first step moves each weight by about lr."""
        theta = init_params(scalar_dims(), seed=0, zero_output=False)
        state = OptimState.create(theta, lr=1e-4, weight_decay=0.0, eps=1e-8)
        grads = {name: np.full_like(value, 0.5) for name, value in theta.items()}
        new_state, updated = adamw_step(state, theta, grads)
        expected_step = 1e-4 * 0.5 / (0.5 + 1e-8)
        for name, value in theta.items():
            np.testing.assert_allclose(
                value - updated[name], expected_step, rtol=1e-9
            )
        assert new_state.step == 1

    def test_does_not_modify_inputs(self):
        """Test the step returns new state and parameters."""
        theta = init_params(DIMS, seed=0, zero_output=False)
        before = theta.copy()
        state = OptimState.create(theta, lr=1e-3)
        grads = {name: np.ones_like(value) for name, value in theta.items()}
        adamw_step(state, theta, grads)
        assert theta.equals(before)
        assert state.step == 0
        assert not np.any(state.m["in.weight"])

    def test_rejects_mismatched_gradient(self):
        """Test a gradient of the wrong shape."""
        theta = init_params(DIMS, seed=0)
        grads = theta.zeros_like().tensors
        grads["in.bias"] = np.zeros(2)
        with pytest.raises(ContractViolation):
            adamw_step(OptimState.create(theta, lr=1e-3), theta, grads)


class TestEma:
    """Test the EMA shadow weights."""

    def constant_params(self, value):
        dims = scalar_dims()
        return ModelParams(
            dims, {name: np.full(shape, value) for name, shape in dims.shapes().items()}
        )

    def test_k_step_closed_form(self):
        """Test k updates toward constant p from zero give p * (1 - 0.99^k)."""
        p = 2.5
        theta = self.constant_params(p)
        ema = EmaState(self.constant_params(0.0), decay=0.99, update_interval=1)
        for _ in range(40):
            ema = ema_update(ema, theta)
        expected = p * (1.0 - 0.99**40)
        for _, value in ema.shadow.items():
            np.testing.assert_allclose(value, expected, atol=1e-12, rtol=0)
        assert ema.counter == 40

    def test_interval(self):
        """Test the shadow only moves when the interval fires."""
        theta = self.constant_params(1.0)
        ema = EmaState(self.constant_params(0.0), decay=0.5, update_interval=3)
        ema = ema_update(ema_update(ema, theta), theta)
        assert not np.any(ema.shadow["in.bias"])
        ema = ema_update(ema, theta)
        np.testing.assert_allclose(ema.shadow["in.bias"], 0.5)

    def test_shadow_stays_in_hull_of_seen_weights(self):
        """Test every shadow coordinate stays between the extremes seen so far."""
        initial = init_params(DIMS, seed=0, zero_output=False)
        ema = EmaState(initial.copy(), decay=0.9, update_interval=1)
        low = {name: value.copy() for name, value in initial.items()}
        high = {name: value.copy() for name, value in initial.items()}
        for seed in range(1, 21):
            theta = init_params(DIMS, seed=seed, zero_output=False)
            ema = ema_update(ema, theta)
            for name, value in theta.items():
                low[name] = np.minimum(low[name], value)
                high[name] = np.maximum(high[name], value)
            for name, value in ema.shadow.items():
                assert np.all(value >= low[name] - 1e-12)
                assert np.all(value <= high[name] + 1e-12)

    def test_create_copies_theta(self):
        """Test the shadow starts equal to but separate from theta."""
        theta = init_params(DIMS, seed=0)
        ema = EmaState.create(theta, 0.99, 100)
        assert ema.shadow.equals(theta)
        assert ema.shadow.tensors["in.bias"] is not theta.tensors["in.bias"]

    def test_invalid_decay(self):
        """Test decay outside (0, 1)."""
        with pytest.raises(InputError, match="decay"):
            EmaState(init_params(DIMS, seed=0), decay=1.0)
