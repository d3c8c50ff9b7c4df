"""Bit-exact checkpoint persistence (the DRPC format).

Layout, little-endian:

    magic "DRPC" | u32 version | u32 tensor count
    per tensor: u16 name length | name | u8 ndim | u32 dims... | f64 payload
    u32 meta length | UTF-8 JSON meta
    u32 CRC32 of every byte after the 12-byte header
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .binio import ByteReader, atomic_write
from .conditioning import ConditionEncoder
from .errors import PersistenceError
from .vectorfield import EmaState, FieldDims, ModelParams, OptimState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DRPC"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sII")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Model, EMA and optimizer state plus what is needed to resume."""

    params: ModelParams
    ema: EmaState
    optim: OptimState
    encoder: ConditionEncoder
    stage: str = "init"
    config: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, int] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        # normalized to what the JSON meta block stores
        self.config = json.loads(json.dumps(self.config))
        self.rng_state = json.loads(json.dumps(self.rng_state))
        self.history = [float(h) for h in self.history]

    def tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for name, value in self.params.items():
            tensors[f"params.{name}"] = value
        for name, value in self.ema.shadow.items():
            tensors[f"ema.{name}"] = value
        for name, value in self.optim.m.items():
            tensors[f"optim.m.{name}"] = value
        for name, value in self.optim.v.items():
            tensors[f"optim.v.{name}"] = value
        tensors.update(self.encoder.tensors())
        return tensors

    def meta(self) -> Dict[str, Any]:
        dims = self.params.dims
        return {
            "stage": self.stage,
            "dims": {
                "latent_dim": dims.latent_dim,
                "style_dim": dims.style_dim,
                "lyric_dim": dims.lyric_dim,
                "hidden": dims.hidden,
                "layers": dims.layers,
            },
            "optim": {
                "step": self.optim.step,
                "beta1": self.optim.beta1,
                "beta2": self.optim.beta2,
                "lr": self.optim.lr,
                "weight_decay": self.optim.weight_decay,
                "eps": self.optim.eps,
            },
            "ema": {
                "decay": self.ema.decay,
                "update_interval": self.ema.update_interval,
                "counter": self.ema.counter,
            },
            "config": self.config,
            "rng_state": self.rng_state,
            "history": self.history,
        }

    def sampling_params(self, use_ema: bool) -> ModelParams:
        """EMA weights once the shadow has absorbed an update, else the raw ones."""
        if use_ema and self.ema.counter >= self.ema.update_interval:
            return self.ema.shadow
        return self.params

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor and state field."""
        mine, theirs = self.tensors(), other.tensors()
        return (
            list(mine) == list(theirs)
            and all(np.array_equal(mine[k], theirs[k]) for k in mine)
            and self.meta() == other.meta()
        )


def fresh_checkpoint(
    params: ModelParams,
    encoder: ConditionEncoder,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
    ema_decay: float = 0.99,
    ema_interval: int = 100,
    stage: str = "init",
    config: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Checkpoint whose EMA equals `params` and whose optimizer is untouched."""
    return Checkpoint(
        params=params.copy(),
        ema=EmaState.create(params, ema_decay, ema_interval),
        optim=OptimState.create(params, lr, beta1, beta2, weight_decay, eps),
        encoder=encoder,
        stage=stage,
        config=dict(config or {}),
    )


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_U16.pack(len(encoded)), encoded, _U8.pack(value.ndim)]
    parts.extend(_U32.pack(d) for d in value.shape)
    parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(c: Checkpoint, path: str) -> None:
    """Write `c` atomically; load_checkpoint(path) reproduces it bit for bit."""
    tensors = c.tensors()
    body = b"".join(_pack_tensor(name, value) for name, value in tensors.items())
    meta = json.dumps(c.meta(), sort_keys=True).encode("utf-8")
    body += _U32.pack(len(meta)) + meta
    blob = (
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))
        + body
        + _U32.pack(zlib.crc32(body))
    )

    atomic_write(path, blob)
    logger.info("saved %s checkpoint (%d tensors) to %s", c.stage, len(tensors), path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a DRPC file; nothing is returned unless every check passes."""
    with open(path, "rb") as f:
        blob = f.read()

    reader = ByteReader(blob, path)
    magic, version, count = reader.unpack(_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise PersistenceError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise PersistenceError(f"{path}: unsupported checkpoint version {version}")

    if len(blob) < _HEADER.size + _U32.size:
        raise PersistenceError(f"{path}: truncated")
    body = blob[_HEADER.size : -_U32.size]
    (stored_crc,) = _U32.unpack(blob[-_U32.size :])
    if zlib.crc32(body) != stored_crc:
        raise PersistenceError(f"{path}: checksum mismatch")

    reader = ByteReader(body, path)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(size * 8)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(
            np.float64
        )
    (meta_len,) = reader.unpack(_U32)
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PersistenceError(f"{path}: unreadable metadata: {e}")
    if reader.remaining:
        raise PersistenceError(f"{path}: {reader.remaining} trailing bytes")

    return _assemble(tensors, meta, path)


def _assemble(
    tensors: Dict[str, np.ndarray], meta: Dict[str, Any], path: str
) -> Checkpoint:
    try:
        dims = FieldDims(**meta["dims"])

        def group(prefix: str) -> Dict[str, np.ndarray]:
            return {name: tensors[prefix + name] for name in dims.shapes()}

        params = ModelParams(dims, group("params."))
        ema_meta = meta["ema"]
        ema = EmaState(
            ModelParams(dims, group("ema.")),
            ema_meta["decay"],
            ema_meta["update_interval"],
            ema_meta["counter"],
        )
        optim_meta = meta["optim"]
        optim = OptimState(
            group("optim.m."),
            group("optim.v."),
            optim_meta["step"],
            optim_meta["beta1"],
            optim_meta["beta2"],
            optim_meta["lr"],
            optim_meta["weight_decay"],
            optim_meta["eps"],
        )
        encoder = ConditionEncoder.from_tensors(tensors)
        return Checkpoint(
            params=params,
            ema=ema,
            optim=optim,
            encoder=encoder,
            stage=meta["stage"],
            config=meta["config"],
            rng_state=meta["rng_state"],
            history=meta["history"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise PersistenceError(f"{path}: inconsistent checkpoint contents: {e}")
