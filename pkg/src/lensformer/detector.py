"""Lens detector models: CNN backbone -> sequence -> encoder stack -> FFN
head with a single sigmoid neuron, plus the parallel two-tower variant.

``ModelConfig`` is the declarative description; ``build`` turns it into a
``DetectorModel`` with Xavier-uniform weights and zero biases, fully
determined by the seed. ``num_encoders = 0`` gives the matched CNN-only
model (backbone flattened straight into the head), which is the
comparison baseline for the encoder variants.

Checkpoints are a small versioned binary container: magic, format
version, build seed, the config as canonical JSON, then each named
tensor as little-endian float32 with explicit shape. Round-trips are
byte-exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor
from .transformer import (
    AttentionConfig,
    EncoderLayer,
    PositionalEncoding,
    encoder_stack_forward,
    xavier_uniform,
    zeros_param,
)

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    """One backbone convolution: 3x3 same-padding by default, optional
    non-overlapping max pool (pool=1 means none)."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 1

    def to_dict(self) -> dict:
        return {"out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "pool": self.pool}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    """Declarative detector architecture.

    The backbone's final channel count D must equal the attention width
    when encoders are present; the residual stream runs at that width.
    """

    input_bands: int
    input_size: int
    backbone: tuple[ConvSpec, ...]
    attention: Optional[AttentionConfig]
    num_encoders: int
    ffn_head: tuple[int, ...]
    towers: int = 1
    pe_base: float = 12800.0
    ffn_hidden: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "ffn_head", tuple(self.ffn_head))
        if self.input_bands < 1:
            raise ConfigError(f"input_bands must be >= 1, got {self.input_bands}")
        if self.input_size < 1:
            raise ConfigError(f"input_size must be >= 1, got {self.input_size}")
        if not self.backbone:
            raise ConfigError("backbone needs at least one conv layer")
        if self.num_encoders < 0:
            raise ConfigError(f"num_encoders must be >= 0, got {self.num_encoders}")
        if self.towers not in (1, 2):
            raise ConfigError(f"towers must be 1 or 2, got {self.towers}")
        if any(w < 1 for w in self.ffn_head):
            raise ConfigError(f"ffn_head widths must be positive, got {self.ffn_head}")
        if self.towers == 2 and not self.ffn_head:
            raise ConfigError("a two-tower model needs at least one ffn_head layer for its penultimate features")
        if self.num_encoders > 0:
            if self.attention is None:
                raise ConfigError("encoder layers requested but no attention config given")
            d = self.backbone[-1].out_channels
            if d != self.attention.model_dim:
                raise ConfigError(
                    f"final backbone channels {d} must equal attention model_dim {self.attention.model_dim}")
        h, w = self.spatial_after_backbone()
        if h < 1 or w < 1:
            raise ConfigError("backbone reduces the input to an empty feature map")

    def spatial_after_backbone(self) -> tuple[int, int]:
        h = w = self.input_size
        for spec in self.backbone:
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if spec.pool > 1:
                h //= spec.pool
                w //= spec.pool
            if h < 1 or w < 1:
                return h, w
        return h, w

    @property
    def sequence_length(self) -> int:
        h, w = self.spatial_after_backbone()
        return h * w

    def to_dict(self) -> dict:
        return {
            "input_bands": self.input_bands,
            "input_size": self.input_size,
            "backbone": [s.to_dict() for s in self.backbone],
            "attention": None if self.attention is None else
                {"num_heads": self.attention.num_heads, "head_dim": self.attention.head_dim},
            "num_encoders": self.num_encoders,
            "ffn_head": list(self.ffn_head),
            "towers": self.towers,
            "pe_base": self.pe_base,
            "ffn_hidden": self.ffn_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        att = d.get("attention")
        return cls(
            input_bands=d["input_bands"],
            input_size=d["input_size"],
            backbone=tuple(ConvSpec.from_dict(s) for s in d["backbone"]),
            attention=None if att is None else AttentionConfig(att["num_heads"], att["head_dim"]),
            num_encoders=d["num_encoders"],
            ffn_head=tuple(d["ffn_head"]),
            towers=d.get("towers", 1),
            pe_base=d.get("pe_base", 12800.0),
            ffn_hidden=d.get("ffn_hidden"),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def reference_config(bands: int = 4) -> ModelConfig:
    """The LD15-like reference: 8 conv layers pooled every second layer
    down to D = 128, 8 heads of width 16, 4 encoders, small FFN head."""
    widths = (16, 16, 32, 32, 64, 64, 128, 128)
    backbone = tuple(ConvSpec(w, pool=2 if i % 2 == 1 else 1) for i, w in enumerate(widths))
    return ModelConfig(
        input_bands=bands, input_size=101, backbone=backbone,
        attention=AttentionConfig.from_notation(8, 128), num_encoders=4,
        ffn_head=(256, 64))


def desk_config(bands: int = 4, num_encoders: int = 1) -> ModelConfig:
    """Small configuration for fast CPU experiments: 32x32 stamps,
    2 conv layers, 2 heads over a width-16 stream. ``num_encoders = 0``
    gives the matched CNN-only baseline."""
    return ModelConfig(
        input_bands=bands, input_size=32,
        backbone=(ConvSpec(8, pool=2), ConvSpec(16, pool=2)),
        attention=AttentionConfig.from_notation(2, 16), num_encoders=num_encoders,
        ffn_head=(32,))


class _Tower:
    """Backbone + optional encoder stack + head hidden layers for one tower."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype):
        self.config = config
        self.convs: list[tuple[ConvSpec, Tensor, Tensor]] = []
        ch = config.input_bands
        for spec in config.backbone:
            fan_in = ch * spec.kernel * spec.kernel
            fan_out = spec.out_channels * spec.kernel * spec.kernel
            kern = xavier_uniform(rng, (spec.out_channels, ch, spec.kernel, spec.kernel), fan_in, fan_out, dtype)
            bias = zeros_param((spec.out_channels,), dtype)
            self.convs.append((spec, kern, bias))
            ch = spec.out_channels
        h, w = config.spatial_after_backbone()
        self.encoders: list[EncoderLayer] = []
        self.pe: Optional[PositionalEncoding] = None
        if config.num_encoders > 0:
            self.encoders = [EncoderLayer(config.attention, rng, ffn_hidden=config.ffn_hidden, dtype=dtype)
                             for _ in range(config.num_encoders)]
            with T.precision(np.dtype(dtype).name):
                self.pe = PositionalEncoding(config.attention.model_dim, max_len=h * w, base=config.pe_base)
        flat = ch * h * w
        self.hidden: list[tuple[Tensor, Tensor]] = []
        width = flat
        for out_width in config.ffn_head:
            self.hidden.append((xavier_uniform(rng, (width, out_width), width, out_width, dtype),
                                zeros_param((out_width,), dtype)))
            width = out_width
        self.feature_width = width

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (_, kern, bias) in enumerate(self.convs):
            params[f"backbone.{i}.kernels"] = kern
            params[f"backbone.{i}.bias"] = bias
        for i, layer in enumerate(self.encoders):
            for name, p in layer.parameters().items():
                params[f"encoder.{i}.{name}"] = p
        for i, (w, b) in enumerate(self.hidden):
            params[f"head.{i}.w"] = w
            params[f"head.{i}.b"] = b
        return params

    def features(self, x: Tensor) -> Tensor:
        """[B, bands, S, S] -> [B, feature_width] penultimate activations."""
        for spec, kern, bias in self.convs:
            x = T.conv2d(x, kern, stride=spec.stride, padding=spec.padding)
            x = T.add(x, T.reshape(bias, (bias.shape[0], 1, 1)))
            x = T.elu(x)
            if spec.pool > 1:
                x = T.max_pool2d(x, spec.pool)
        batch, d = x.shape[0], x.shape[1]
        length = x.shape[2] * x.shape[3]
        if self.encoders:
            seq = T.transpose(T.reshape(x, (batch, d, length)), (0, 2, 1))
            seq = T.add(seq, self.pe.for_length(length))
            seq = encoder_stack_forward(seq, self.encoders)
            flat = T.reshape(seq, (batch, length * d))
        else:
            flat = T.reshape(x, (batch, d * length))
        for w, b in self.hidden:
            flat = T.elu(T.dense(flat, w, b))
        return flat


class DetectorModel:
    """A built detector: config, named parameters, and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int, towers: list[_Tower],
                 out_w: Tensor, out_b: Tensor):
        self.config = config
        self.seed = seed
        self._towers = towers
        self._out_w = out_w
        self._out_b = out_b
        self.params: dict[str, Tensor] = {}
        if len(towers) == 1:
            self.params.update(towers[0].parameters())
        else:
            for t, tower in enumerate(towers, start=1):
                for name, p in tower.parameters().items():
                    self.params[f"tower{t}.{name}"] = p
        self.params["out.w"] = out_w
        self.params["out.b"] = out_b

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return self._out_w.data.dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        """[B, bands, S, S] -> [B] lens probabilities, strictly inside (0, 1).

        The final sigmoid runs at float64 (probabilities are clamped one
        step inside the interval) so scores never collapse to 0 or 1.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=self.dtype)
        if x.ndim != 4:
            raise DimensionError(f"forward expects [B, bands, S, S], got {x.shape}")
        cfg = self.config
        if x.shape[1] != cfg.input_bands or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise DimensionError(
                f"forward: batch {x.shape[1:]} does not match config "
                f"({cfg.input_bands}, {cfg.input_size}, {cfg.input_size})")
        feats = [tower.features(x) for tower in self._towers]
        joined = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
        logits = T.dense(joined, self._out_w, self._out_b)
        probs = T.sigmoid(T.cast(logits, np.float64))
        probs.data = np.clip(probs.data, 5e-324, np.nextafter(1.0, 0.0))
        return T.reshape(probs, (x.shape[0],))

    def __call__(self, batch) -> Tensor:
        return self.forward(batch)

    # -- checkpoint io ------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(struct.pack("<q", self.seed))
        blob = self.config.canonical_json().encode("utf-8")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.params)))
        for name, p in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", p.ndim))
            for extent in p.shape:
                buf.write(struct.pack("<I", extent))
            buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DetectorModel":
        raw = Path(path).read_bytes()
        buf = io.BytesIO(raw)
        if buf.read(4) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a detector checkpoint")
        version = struct.unpack("<I", buf.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        seed = struct.unpack("<q", buf.read(8))[0]
        jlen = struct.unpack("<I", buf.read(4))[0]
        config = ModelConfig.from_dict(json.loads(buf.read(jlen).decode("utf-8")))
        model = build(config, seed, dtype=np.float32)
        count = struct.unpack("<I", buf.read(4))[0]
        if count != len(model.params):
            raise ContractError(f"{path}: {count} tensors but config implies {len(model.params)}")
        for expected_name, p in model.params.items():
            nlen = struct.unpack("<H", buf.read(2))[0]
            name = buf.read(nlen).decode("utf-8")
            if name != expected_name:
                raise ContractError(f"{path}: tensor {name!r} does not match expected {expected_name!r}")
            ndim = struct.unpack("<B", buf.read(1))[0]
            shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
            if shape != p.shape:
                raise ContractError(f"{path}: tensor {name} has shape {shape}, expected {p.shape}")
            n = int(np.prod(shape)) if shape else 1
            p.data = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape).copy()
        return model


def build(config: ModelConfig, seed: int, dtype=np.float32) -> DetectorModel:
    """Initialize a detector: Xavier-uniform weights, zero biases,
    bit-reproducible under the seed."""
    rng = np.random.default_rng(seed)
    towers = [_Tower(config, rng, dtype) for _ in range(config.towers)]
    in_width = sum(t.feature_width for t in towers)
    out_w = xavier_uniform(rng, (in_width, 1), in_width, 1, dtype)
    out_b = zeros_param((1,), dtype)
    return DetectorModel(config, seed, towers, out_w, out_b)


def build_two_tower(config: ModelConfig, seed: int, dtype=np.float32) -> DetectorModel:
    """Two independently initialized towers, concatenated penultimate
    features, one dense + sigmoid combining head."""
    if config.towers != 2:
        raise ConfigError(f"build_two_tower needs towers == 2, got {config.towers}")
    return build(config, seed, dtype=dtype)


def classify(probabilities: Union[Tensor, np.ndarray], threshold: float) -> np.ndarray:
    """Label 1 iff probability >= threshold (the boundary counts as a lens)."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must be in [0, 1], got {threshold}")
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    return (p >= threshold).astype(np.int64)
