"""Per-frame conditional vector field with hand-written gradients.

The field maps [y_frame | style | lyric_frame | timestep features] through a
tanh MLP to a velocity frame. Frames are independent, so any batch of
sequences is evaluated as one (rows, features) matrix.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .conditioning import ConditionBundle
from .data import LatentSeq
from .errors import ContractViolation, InputError, NumericalError

logger = logging.getLogger(__name__)

TIME_FREQUENCIES = 4
TIME_FEATURES = 2 * TIME_FREQUENCIES
TIME_BASE = 10_000.0
TIME_SCALE = 10.0


@dataclass(frozen=True)
class FieldDims:
    """Widths of the vector field and its conditioning inputs."""

    latent_dim: int = 2
    style_dim: int = 8
    lyric_dim: int = 8
    hidden: int = 64
    layers: int = 2

    @property
    def in_features(self) -> int:
        return self.latent_dim + self.style_dim + self.lyric_dim + TIME_FEATURES

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {
            "in.weight": (self.in_features, self.hidden),
            "in.bias": (self.hidden,),
        }
        for k in range(self.layers):
            shapes[f"hidden{k}.weight"] = (self.hidden, self.hidden)
            shapes[f"hidden{k}.bias"] = (self.hidden,)
        shapes["out.weight"] = (self.hidden, self.latent_dim)
        shapes["out.bias"] = (self.latent_dim,)
        return shapes


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, dims: FieldDims, tensors: Dict[str, np.ndarray]):
        expected = dims.shapes()
        if list(tensors) != list(expected):
            raise ContractViolation(
                f"parameter names {list(tensors)} do not match {list(expected)}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractViolation(
                    f"{name} has shape {tensors[name].shape}, expected {shape}"
                )
        self.dims = dims
        self.tensors = {
            name: np.asarray(value, dtype=np.float64) for name, value in tensors.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self) -> List[Tuple[str, np.ndarray]]:
        return list(self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            self.dims, {k: np.zeros_like(v) for k, v in self.tensors.items()}
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )

    @property
    def hidden_names(self) -> List[str]:
        return [f"hidden{k}" for k in range(self.dims.layers)]


def init_params(dims: FieldDims, seed: int, zero_output: bool = True) -> ModelParams:
    """Uniform fan-in initialization; the output projection starts at zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in dims.shapes().items():
        if name.startswith("out.") and zero_output:
            tensors[name] = np.zeros(shape)
            continue
        fan_in = dims.shapes()[name.replace(".bias", ".weight")][0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dims, tensors)


def timestep_features(t: np.ndarray) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]: (N,) -> (N, 8).

    Frequencies are TIME_SCALE * TIME_BASE**(-j / TIME_FREQUENCIES), sines
    first. TIME_SCALE stretches t so the lowest frequency still turns within
    the unit interval.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = TIME_SCALE * TIME_BASE ** (-np.arange(TIME_FREQUENCIES) / TIME_FREQUENCIES)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def build_features(
    y: np.ndarray, style: np.ndarray, lyrics: np.ndarray, t: np.ndarray
) -> np.ndarray:
    """Concatenate per-frame inputs: (N,L,D),(N,S),(N,L,E),(N,) -> (N,L,F)."""
    if y.ndim != 3 or lyrics.ndim != 3 or style.ndim != 2:
        raise ContractViolation(
            f"expected (N,L,D), (N,S), (N,L,E); got {y.shape}, {style.shape}, "
            f"{lyrics.shape}"
        )
    n, length, _ = y.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if style.shape[0] != n or lyrics.shape[:2] != (n, length):
        raise ContractViolation(
            f"batch/frames mismatch: y {y.shape}, style {style.shape}, "
            f"lyrics {lyrics.shape}"
        )
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InputError("t must lie in [0, 1]")
    time = timestep_features(t)
    return np.concatenate(
        [
            y,
            np.broadcast_to(style[:, None, :], (n, length, style.shape[1])),
            lyrics,
            np.broadcast_to(time[:, None, :], (n, length, TIME_FEATURES)),
        ],
        axis=2,
    )


@dataclass
class _Cache:
    inputs: np.ndarray
    activations: List[np.ndarray]
    lead_shape: Tuple[int, ...]


def forward_features(
    theta: ModelParams, features: np.ndarray
) -> Tuple[np.ndarray, _Cache]:
    """Run the MLP on (..., F) features, returning (..., D) and a backward cache."""
    if features.shape[-1] != theta.dims.in_features:
        raise ContractViolation(
            f"feature width {features.shape[-1]} != {theta.dims.in_features}"
        )
    lead = features.shape[:-1]
    x = features.reshape(-1, features.shape[-1])
    h = np.tanh(x @ theta["in.weight"] + theta["in.bias"])
    activations = [h]
    for layer in theta.hidden_names:
        h = np.tanh(h @ theta[f"{layer}.weight"] + theta[f"{layer}.bias"])
        activations.append(h)
    out = h @ theta["out.weight"] + theta["out.bias"]
    return out.reshape(*lead, theta.dims.latent_dim), _Cache(x, activations, lead)


def backward(
    theta: ModelParams, cache: _Cache, d_out: np.ndarray
) -> Dict[str, np.ndarray]:
    """Gradients of a scalar with respect to every parameter, given dL/d(output)."""
    d_out = d_out.reshape(-1, theta.dims.latent_dim)
    grads: Dict[str, np.ndarray] = {}
    h = cache.activations[-1]
    grads["out.weight"] = h.T @ d_out
    grads["out.bias"] = d_out.sum(axis=0)
    d_h = d_out @ theta["out.weight"].T

    layers = ["in"] + theta.hidden_names
    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        h = cache.activations[index]
        d_pre = d_h * (1.0 - h * h)
        prev = cache.inputs if index == 0 else cache.activations[index - 1]
        grads[f"{layer}.weight"] = prev.T @ d_pre
        grads[f"{layer}.bias"] = d_pre.sum(axis=0)
        if index > 0:
            d_h = d_pre @ theta[f"{layer}.weight"].T

    return {name: grads[name] for name in theta}


def forward(
    theta: ModelParams, t: float, y: LatentSeq, c: ConditionBundle
) -> np.ndarray:
    """Velocity v_theta(t, y, c) for one sequence: an L x D matrix."""
    frames = y.frames if isinstance(y, LatentSeq) else np.asarray(y, dtype=np.float64)
    if frames.shape[0] != c.length:
        raise ContractViolation(
            f"sequence has {frames.shape[0]} frames, condition has {c.length}"
        )
    features = build_features(
        frames[None], c.style.vec[None], c.lyric_frames[None], np.array([t])
    )
    out, _ = forward_features(theta, features)
    return out[0]


def forward_batch(
    theta: ModelParams,
    t: np.ndarray,
    y: np.ndarray,
    style: np.ndarray,
    lyrics: np.ndarray,
) -> np.ndarray:
    """Velocities for a stacked batch: (N,L,D) in, (N,L,D) out."""
    out, _ = forward_features(theta, build_features(y, style, lyrics, t))
    return out


@dataclass
class PreparedBatch:
    """Model inputs plus whatever the loss head needs; every array shares dim 0."""

    features: np.ndarray
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def split(self, shards: int) -> List["PreparedBatch"]:
        shards = max(1, min(shards, len(self)))
        bounds = np.array_split(np.arange(len(self)), shards)
        return [
            PreparedBatch(
                self.features[idx[0] : idx[-1] + 1],
                {k: v[idx[0] : idx[-1] + 1] for k, v in self.arrays.items()},
                self.meta,
            )
            for idx in bounds
        ]


class LossFunction:
    """Base class for losses that can be backpropagated through the field."""

    def prepare(self, batch: Sequence[Any]) -> PreparedBatch:
        """Draw all randomness and build model inputs for a batch."""
        raise NotImplementedError("Subclasses must implement prepare")

    def head(
        self, velocity: np.ndarray, prepared: PreparedBatch
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Per-element losses and d(sum of losses)/d(velocity)."""
        raise NotImplementedError("Subclasses must implement head")


def _shard_loss(
    theta: ModelParams, shard: PreparedBatch, loss_fn: LossFunction, with_grad: bool
) -> Tuple[np.ndarray, Optional[Dict[str, np.ndarray]]]:
    velocity, cache = forward_features(theta, shard.features)
    losses, d_velocity = loss_fn.head(velocity, shard)
    if not with_grad or not np.all(np.isfinite(losses)):
        return losses, None
    return losses, backward(theta, cache, d_velocity)


def evaluate_prepared(
    theta: ModelParams,
    prepared: PreparedBatch,
    loss_fn: LossFunction,
    with_grad: bool = True,
    shards: int = 1,
    workers: int = 1,
) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Mean loss (and gradient) over an already prepared batch."""
    parts = prepared.split(shards)

    def run(shard: PreparedBatch) -> Tuple[np.ndarray, Optional[Dict[str, np.ndarray]]]:
        return _shard_loss(theta, shard, loss_fn, with_grad)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(part) for part in parts]

    total = len(prepared)
    offset = 0
    loss_sum = 0.0
    grads: Optional[Dict[str, np.ndarray]] = None
    # fixed shard order keeps the reduction deterministic
    for losses, shard_grads in results:
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            raise NumericalError(
                "non-finite loss",
                batch_index=int(offset + bad[0]),
                seed=prepared.meta.get("seed"),
            )
        loss_sum += float(losses.sum())
        if with_grad:
            assert shard_grads is not None
            if grads is None:
                grads = {k: v.copy() for k, v in shard_grads.items()}
            else:
                for name, value in shard_grads.items():
                    grads[name] += value
        offset += len(losses)

    if grads is not None:
        grads = {name: value / total for name, value in grads.items()}
    return loss_sum / total, grads


def loss_and_grad(
    theta: ModelParams,
    batch: Sequence[Any],
    loss_fn: LossFunction,
    shards: int = 1,
    workers: int = 1,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient with respect to every parameter."""
    prepared = loss_fn.prepare(batch)
    loss, grads = evaluate_prepared(theta, prepared, loss_fn, True, shards, workers)
    assert grads is not None
    return loss, grads


def gradient_check(
    theta: ModelParams,
    batch: Sequence[Any],
    loss_fn: LossFunction,
    n_params: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor) over `n_params` randomly
    chosen scalar parameters.
    """
    prepared = loss_fn.prepare(batch)
    _, grads = evaluate_prepared(theta, prepared, loss_fn)
    assert grads is not None

    rng = np.random.default_rng(seed)
    names = list(theta)
    sizes = np.array([theta[name].size for name in names])
    total = int(sizes.sum())
    flat_choices = rng.choice(total, size=min(n_params, total), replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    worst = 0.0
    for flat in flat_choices:
        which = int(np.searchsorted(starts, flat, side="right") - 1)
        name = names[which]
        index = np.unravel_index(int(flat - starts[which]), theta[name].shape)

        shifted = theta.copy()
        original = shifted[name][index]
        shifted.tensors[name][index] = original + h
        plus, _ = evaluate_prepared(shifted, prepared, loss_fn, with_grad=False)
        shifted.tensors[name][index] = original - h
        minus, _ = evaluate_prepared(shifted, prepared, loss_fn, with_grad=False)

        numeric = (plus - minus) / (2.0 * h)
        analytic = grads[name][index]
        scale = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / scale)

    logger.debug(
        "gradient check over %d parameters: max rel err %.3e", len(flat_choices), worst
    )
    return worst


@dataclass
class OptimState:
    """AdamW moments and hyperparameters."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    lr: float = 1e-4
    weight_decay: float = 0.01
    eps: float = 1e-8

    @classmethod
    def create(
        cls,
        theta: ModelParams,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.95,
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ) -> "OptimState":
        zeros = {name: np.zeros_like(value) for name, value in theta.items()}
        return cls(
            m=zeros,
            v={k: v.copy() for k, v in zeros.items()},
            beta1=beta1,
            beta2=beta2,
            lr=lr,
            weight_decay=weight_decay,
            eps=eps,
        )

    def copy(self) -> "OptimState":
        return OptimState(
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
            self.beta1,
            self.beta2,
            self.lr,
            self.weight_decay,
            self.eps,
        )


def adamw_step(
    s: OptimState, theta: ModelParams, grads: Dict[str, np.ndarray]
) -> Tuple[OptimState, ModelParams]:
    """One AdamW update with bias correction and decoupled weight decay."""
    step = s.step + 1
    correction1 = 1.0 - s.beta1**step
    correction2 = 1.0 - s.beta2**step

    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    updated: Dict[str, np.ndarray] = {}
    for name, param in theta.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ContractViolation(f"gradient {name} has shape {grad.shape}")
        m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * grad
        v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * grad * grad
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2

        if s.weight_decay != 0.0:
            param = param - s.lr * s.weight_decay * param
        updated[name] = param - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)

    new_state = OptimState(
        m, v, step, s.beta1, s.beta2, s.lr, s.weight_decay, s.eps
    )
    return new_state, ModelParams(theta.dims, updated)


@dataclass
class EmaState:
    """Shadow weights refreshed every `update_interval` batches."""

    shadow: ModelParams
    decay: float = 0.99
    update_interval: int = 100
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise InputError(f"EMA decay must be in (0, 1), got {self.decay}")
        if self.update_interval < 1:
            raise InputError(f"EMA interval must be >= 1, got {self.update_interval}")

    @classmethod
    def create(cls, theta: ModelParams, decay: float, interval: int) -> "EmaState":
        return cls(theta.copy(), decay, interval, 0)


def ema_update(e: EmaState, theta: ModelParams) -> EmaState:
    """Count one batch; blend the shadow toward theta when the interval fires."""
    counter = e.counter + 1
    if counter % e.update_interval != 0:
        return EmaState(e.shadow, e.decay, e.update_interval, counter)

    rate = 1.0 - e.decay
    shadow = {
        name: value + rate * (theta[name] - value) for name, value in e.shadow.items()
    }
    shadow_params = ModelParams(e.shadow.dims, shadow)
    return EmaState(shadow_params, e.decay, e.update_interval, counter)
