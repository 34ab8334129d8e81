"""Self-attention building blocks: positional encoding, multi-head
attention, and the encoder layer / stack.

Layers own their parameters as plain Tensors and expose them through
``parameters()``; the detector module composes and initializes them.
Everything here is stateless given the weights, so concurrent read-only
forward passes are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    """Weight tensor drawn from U(-sqrt(6/(fan_in+fan_out)), +sqrt(...))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

@dataclass
class PositionalEncoding:
    """Fixed sinusoidal position table.

    table[pos, 2i]   = sin(pos / base^(2i / d_model))
    table[pos, 2i+1] = cos(pos / base^(2i / d_model))

    The default base is 12800; 10000 is available for cross-checks
    against the more common convention.
    """

    d_model: int
    max_len: int
    base: float = 12800.0
    table: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.d_model % 2 != 0 or self.d_model < 2:
            raise ConfigError(f"positional encoding needs an even d_model >= 2, got {self.d_model}")
        if self.max_len < 1:
            raise ConfigError(f"positional encoding needs max_len >= 1, got {self.max_len}")
        pos = np.arange(self.max_len, dtype=np.float64)[:, None]
        even = np.arange(0, self.d_model, 2, dtype=np.float64)
        angles = pos / np.power(self.base, even / self.d_model)
        tab = np.empty((self.max_len, self.d_model), dtype=np.float64)
        tab[:, 0::2] = np.sin(angles)
        tab[:, 1::2] = np.cos(angles)
        self.table = Tensor(tab.astype(T.default_dtype()), requires_grad=False)

    def for_length(self, length: int) -> Tensor:
        if not 1 <= length <= self.max_len:
            raise DimensionError(f"sequence length {length} outside [1, {self.max_len}]")
        return Tensor(self.table.data[:length], requires_grad=False)


def positional_encoding(d_model: int, max_len: int, base: float = 12800.0) -> PositionalEncoding:
    return PositionalEncoding(d_model=d_model, max_len=max_len, base=base)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head geometry: ``model_dim = num_heads * head_dim``."""

    num_heads: int
    head_dim: int

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError(f"attention needs positive heads/head_dim, got {self.num_heads}/{self.head_dim}")

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def from_notation(cls, heads: int, dim: int, dim_is_total: bool = True) -> "AttentionConfig":
        """Build from "<heads> H_<dim>" style notation.

        ``dim_is_total=True`` reads dim as the full attention width split
        across heads; False reads it as the per-head width.
        """
        if dim_is_total:
            if dim % heads != 0:
                raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
            return cls(num_heads=heads, head_dim=dim // heads)
        return cls(num_heads=heads, head_dim=dim)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Every output row is a convex combination of V's rows, so a single
    query row (L = 1) returns V itself.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: Q {q.shape} and K {k.shape} disagree on d_k")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: K {k.shape} and V {v.shape} disagree on sequence length")
    d_k = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.mul(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax(scores, axis=-1), v)


class MultiHeadAttention:
    """Per-head Q/K/V projections, per-head attention, concat, output projection.

    Weights are stored as fused [model_dim, model_dim] matrices whose
    column blocks are the individual heads.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=None):
        dtype = dtype or T.default_dtype()
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = xavier_uniform(rng, (d, d), d, d, dtype)
        self.wk = xavier_uniform(rng, (d, d), d, d, dtype)
        self.wv = xavier_uniform(rng, (d, d), d, d, dtype)
        self.wo = xavier_uniform(rng, (d, d), d, d, dtype)
        self.bq = zeros_param((d,), dtype)
        self.bk = zeros_param((d,), dtype)
        self.bv = zeros_param((d,), dtype)
        self.bo = zeros_param((d,), dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}

    def _split_heads(self, x: Tensor) -> Tensor:
        h, dh = self.cfg.num_heads, self.cfg.head_dim
        if x.ndim == 2:
            return T.transpose(T.reshape(x, (x.shape[0], h, dh)), (1, 0, 2))
        return T.transpose(T.reshape(x, (x.shape[0], x.shape[1], h, dh)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        d = self.cfg.model_dim
        if x.ndim == 3:
            return T.reshape(T.transpose(x, (1, 0, 2)), (x.shape[1], d))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (x.shape[0], x.shape[2], d))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.model_dim:
            raise DimensionError(f"attention input {x.shape} does not end in model_dim {self.cfg.model_dim}")
        q = self._split_heads(T.add(T.matmul(x, self.wq), self.bq))
        k = self._split_heads(T.add(T.matmul(x, self.wk), self.bk))
        v = self._split_heads(T.add(T.matmul(x, self.wv), self.bv))
        att = self._merge_heads(scaled_dot_attention(q, k, v))
        return T.add(T.matmul(att, self.wo), self.bo)


# ---------------------------------------------------------------------------
# encoder layer / stack
# ---------------------------------------------------------------------------

class EncoderLayer:
    """Post-norm residual block: LN(x + MHA(x)) then LN(y + FFN(y)).

    The FFN is dense -> ELU -> dense with hidden width ``ffn_hidden``
    (2 x model_dim unless overridden).
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 ffn_hidden: Optional[int] = None, dtype=None):
        dtype = dtype or T.default_dtype()
        d = cfg.model_dim
        hidden = ffn_hidden if ffn_hidden is not None else 2 * d
        if hidden < 1:
            raise ConfigError(f"encoder ffn hidden width must be positive, got {hidden}")
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg, rng, dtype=dtype)
        self.w1 = xavier_uniform(rng, (d, hidden), d, hidden, dtype)
        self.b1 = zeros_param((hidden,), dtype)
        self.w2 = xavier_uniform(rng, (hidden, d), hidden, d, dtype)
        self.b2 = zeros_param((d,), dtype)
        self.ln1_gain = ones_param((d,), dtype)
        self.ln1_bias = zeros_param((d,), dtype)
        self.ln2_gain = ones_param((d,), dtype)
        self.ln2_bias = zeros_param((d,), dtype)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"attn.{k}": v for k, v in self.attn.parameters().items()}
        params.update({"ffn.w1": self.w1, "ffn.b1": self.b1, "ffn.w2": self.w2, "ffn.b2": self.b2,
                       "ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
                       "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias})
        return params

    def __call__(self, x: Tensor) -> Tensor:
        y = T.layer_norm(T.add(x, self.attn(x)), self.ln1_gain, self.ln1_bias)
        ffn = T.add(T.matmul(T.elu(T.add(T.matmul(y, self.w1), self.b1)), self.w2), self.b2)
        return T.layer_norm(T.add(y, ffn), self.ln2_gain, self.ln2_bias)


def encoder_stack_forward(x: Tensor, layers: list[EncoderLayer]) -> Tensor:
    """Sequential composition of encoder layers; at least one required."""
    if not layers:
        raise ConfigError("encoder stack needs at least one layer")
    for layer in layers:
        x = layer(x)
    return x
