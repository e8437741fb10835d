"""Dense embedding network, projection head and binary checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointChecksumError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
)
from .tensor import Tensor

BRANCHES = ("clean", "adversarial")

# pixels are shifted to [-0.5, 0.5] before the first layer so that the
# shared mean intensity does not dominate every pre-activation
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 256
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    project_dim: int = 32
    use_dual_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        for name in ("input_dim", "embed_dim", "project_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"/{name}", "must be >= 1")
        if not self.hidden_dims:
            raise ConfigError("/hidden_dims", "at least one hidden layer is required")
        for i, h in enumerate(self.hidden_dims):
            if h < 1:
                raise ConfigError(f"/hidden_dims/{i}", "must be >= 1")
        if self.embed_dim > self.hidden_dims[-1]:
            raise ConfigError("/embed_dim", "must not exceed the last hidden width")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in declaration order."""
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_dims):
            shapes[f"enc.{i}.weight"] = (fan_in, width)
            shapes[f"enc.{i}.bias"] = (width,)
            if self.use_dual_norm:
                for branch in BRANCHES:
                    shapes[f"enc.{i}.norm_{branch}.scale"] = (width,)
                    shapes[f"enc.{i}.norm_{branch}.shift"] = (width,)
            fan_in = width
        shapes["enc.out.weight"] = (fan_in, self.embed_dim)
        shapes["enc.out.bias"] = (self.embed_dim,)
        shapes["proj.0.weight"] = (self.embed_dim, self.embed_dim)
        shapes["proj.0.bias"] = (self.embed_dim,)
        shapes["proj.1.weight"] = (self.embed_dim, self.project_dim)
        shapes["proj.1.bias"] = (self.project_dim,)
        return shapes


class EncoderParams:
    """Ordered mapping of parameter name to trainable tensor.

    Holds the shared weights and, with dual normalisation, the per-branch
    normalisation affines (``*.norm_adversarial.*`` is the adversarial set).
    Instances are treated as immutable; updates build a new instance.
    """

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        expected = config.parameter_shapes()
        if list(tensors) != list(expected):
            raise DimensionError(f"parameter names {list(tensors)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        return cls(config, {k: Tensor(np.asarray(v, np.float32), requires_grad=True) for k, v in arrays.items()})

    def equals(self, other: "EncoderParams") -> bool:
        """Bitwise equality of every parameter array."""
        if self.config != other.config or list(self) != list(other):
            return False
        return all(
            self[k].data.dtype == other[k].data.dtype and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self
        )


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Weights ~ N(0, 1/fan_in), zero biases, unit/zero normalisation affines."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".weight"):
            arrays[name] = (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(np.float32)
        elif name.endswith(".scale"):
            arrays[name] = np.ones(shape, np.float32)
        else:
            arrays[name] = np.zeros(shape, np.float32)
    return EncoderParams.from_arrays(config, arrays)


def _dense(params: EncoderParams, prefix: str, h: Tensor) -> Tensor:
    return T.add_rowvec(T.matmul(h, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def forward_embed(params: EncoderParams, x: Tensor, branch: str = "clean") -> Tensor:
    """Unit-norm embeddings of a batch of flattened images in [0, 1]."""
    cfg = params.config
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"expected input of shape [batch x {cfg.input_dim}], got {x.shape}")
    if x.data.min() < 0 or x.data.max() > 1:
        raise ValueError("encoder inputs must lie in [0, 1]")
    h = T.add(x, -INPUT_CENTER)
    for i in range(len(cfg.hidden_dims)):
        h = _dense(params, f"enc.{i}", h)
        if cfg.use_dual_norm:
            h = T.layer_norm(h)
            h = T.mul_rowvec(h, params[f"enc.{i}.norm_{branch}.scale"])
            h = T.add_rowvec(h, params[f"enc.{i}.norm_{branch}.shift"])
        h = T.relu(h)
    return T.l2_normalize(_dense(params, "enc.out", h))


def forward_project(params: EncoderParams, embed: Tensor) -> Tensor:
    """Two-layer projection head (dense, relu, dense) with unit-norm output."""
    cfg = params.config
    if embed.ndim != 2 or embed.shape[1] != cfg.embed_dim:
        raise DimensionError(f"expected embeddings of shape [batch x {cfg.embed_dim}], got {embed.shape}")
    h = T.relu(_dense(params, "proj.0", embed))
    return T.l2_normalize(_dense(params, "proj.1", h))


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"RFL1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, body length


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: EncoderParams
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    seed: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def _array_block(arrays: dict[str, np.ndarray]) -> tuple[list, bytes]:
    index, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        index.append([name, list(arr.shape)])
        chunks.append(arr.tobytes())
    return index, b"".join(chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    param_index, param_bytes = _array_block(ckpt.params.arrays())
    vel_index, vel_bytes = _array_block(ckpt.velocity)
    block = {
        "config": ckpt.config.to_dict(),
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "params": param_index,
        "velocity": vel_index,
    }
    config_bytes = json.dumps(block, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(config_bytes)) + config_bytes + param_bytes + vel_bytes
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, len(body)) + body
    return head + struct.pack("<I", zlib.crc32(head))


def _read_arrays(index, buf: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    out = {}
    for name, shape in index:
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + n > len(buf):
            raise CheckpointTruncatedError(f"array {name!r} runs past the end of the body")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += n
    return out, offset


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError("file shorter than the checkpoint header")
    magic, version, body_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic bytes {magic!r}; not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    end = _HEADER.size + body_len
    if len(raw) < end + 4:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(raw)} bytes, expected {end + 4}")
    (crc,) = struct.unpack_from("<I", raw, end)
    if zlib.crc32(raw[:end]) != crc:
        raise CheckpointChecksumError("checkpoint CRC32 mismatch; file is corrupted")

    body = raw[_HEADER.size:end]
    (clen,) = struct.unpack_from("<I", body)
    block = json.loads(body[4:4 + clen].decode("utf-8"))
    config = EncoderConfig.from_dict(block["config"])
    params, offset = _read_arrays(block["params"], body, 4 + clen)
    velocity, _ = _read_arrays(block["velocity"], body, offset)
    return Checkpoint(
        config=config,
        params=EncoderParams.from_arrays(config, params),
        velocity=velocity,
        rng_state=block["rng_state"],
        seed=block["seed"],
        epoch=block["epoch"],
        meta=block["meta"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
