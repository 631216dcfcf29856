"""Transformer building blocks.

Tokens are rows: a feature sequence is an (N, C) tensor. Attention follows
the scaled-dot-product form with softmax over the key axis, so every query's
weights sum to 1. Encoder and decoder layers are pre-norm residual blocks;
the decoder carries no self-attention and no positional term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError

_MASKED_LOGIT = -1e30


@dataclass
class AttentionConfig:
    channels: int
    heads: int
    mlp_ratio: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigError(f"{self.heads} heads do not divide {self.channels} channels")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unsupported MLP activation {self.activation!r}")

    @property
    def head_dim(self):
        return self.channels // self.heads


def uniform_init(rng, shape, fan_in, dtype):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def attention_head(q, k, v, key_mask=None, return_weights=False):
    """One attention head: q (Nq, d), k/v (Nk, d) -> (Nq, d).

    The softmax runs over the key axis, so each query row's weights sum to 1.
    """
    d = q.shape[1]
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, _MASKED_LOGIT)
        logits = logits + Tensor(bias.astype(logits.dtype))
    weights = ad.softmax(logits, axis=-1)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention:
    """h parallel heads, channel-concatenated and projected back to C.

    Queries come from the first input; keys and values from the second.
    Self-attention is the special case of passing the same tensor twice.
    """

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32, prefix="attn"):
        c, d = cfg.channels, cfg.head_dim
        self.cfg = cfg
        self.wq, self.wk, self.wv = [], [], []
        self.bq, self.bk, self.bv = [], [], []
        for i in range(cfg.heads):
            self.wq.append(Parameter(uniform_init(rng, (c, d), c, dtype), name=f"{prefix}.wq{i}"))
            self.wk.append(Parameter(uniform_init(rng, (c, d), c, dtype), name=f"{prefix}.wk{i}"))
            self.wv.append(Parameter(uniform_init(rng, (c, d), c, dtype), name=f"{prefix}.wv{i}"))
            self.bq.append(Parameter(np.zeros(d, dtype), name=f"{prefix}.bq{i}"))
            self.bk.append(Parameter(np.zeros(d, dtype), name=f"{prefix}.bk{i}"))
            self.bv.append(Parameter(np.zeros(d, dtype), name=f"{prefix}.bv{i}"))
        hd = cfg.heads * d
        self.wo = Parameter(uniform_init(rng, (hd, c), hd, dtype), name=f"{prefix}.wo")
        self.bo = Parameter(np.zeros(c, dtype), name=f"{prefix}.bo")

    def __call__(self, x_q, x_kv, key_mask=None):
        if x_q.shape[1] != self.cfg.channels or x_kv.shape[1] != self.cfg.channels:
            raise ContractError(
                f"attention expects {self.cfg.channels} channels, got {x_q.shape} and {x_kv.shape}"
            )
        heads = []
        for i in range(self.cfg.heads):
            q = ad.matmul(x_q, self.wq[i]) + self.bq[i]
            k = ad.matmul(x_kv, self.wk[i]) + self.bk[i]
            v = ad.matmul(x_kv, self.wv[i]) + self.bv[i]
            heads.append(attention_head(q, k, v, key_mask))
        joined = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return ad.matmul(joined, self.wo) + self.bo

    def parameters(self):
        return [*self.wq, *self.wk, *self.wv, *self.bq, *self.bk, *self.bv, self.wo, self.bo]

    def zero_output_projection(self):
        self.wo.data[:] = 0
        self.bo.data[:] = 0


class Mlp:
    """linear(C -> ratio*C), activation, linear(-> C)."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32, prefix="mlp"):
        c, hidden = cfg.channels, cfg.mlp_ratio * cfg.channels
        self.activation = cfg.activation
        self.w1 = Parameter(uniform_init(rng, (c, hidden), c, dtype), name=f"{prefix}.w1")
        self.b1 = Parameter(np.zeros(hidden, dtype), name=f"{prefix}.b1")
        self.w2 = Parameter(uniform_init(rng, (hidden, c), hidden, dtype), name=f"{prefix}.w2")
        self.b2 = Parameter(np.zeros(c, dtype), name=f"{prefix}.b2")

    def __call__(self, x):
        h = ad.matmul(x, self.w1) + self.b1
        h = ad.relu(h) if self.activation == "relu" else ad.tanh(h)
        return ad.matmul(h, self.w2) + self.b2

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def zero_output_projection(self):
        self.w2.data[:] = 0
        self.b2.data[:] = 0


class _Norm:
    def __init__(self, channels, rng, dtype, name):
        self.gamma = Parameter(np.ones(channels, dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype), name=f"{name}.beta")

    def __call__(self, x):
        return ad.layernorm(x, self.gamma, self.beta, axis=-1)

    def parameters(self):
        return [self.gamma, self.beta]


class TransformerEncoderLayer:
    """Pre-norm residual pair: y = (x+p) + attn(norm(x+p)); out = y + mlp(norm(y))."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32, prefix="enc"):
        self.attn = MultiHeadAttention(cfg, rng, dtype, prefix=f"{prefix}.attn")
        self.mlp = Mlp(cfg, rng, dtype, prefix=f"{prefix}.mlp")
        self.norm1 = _Norm(cfg.channels, rng, dtype, f"{prefix}.norm1")
        self.norm2 = _Norm(cfg.channels, rng, dtype, f"{prefix}.norm2")

    def __call__(self, x, pos=None, key_mask=None):
        base = x + pos if pos is not None else x
        normed = self.norm1(base)
        y = base + self.attn(normed, normed, key_mask)
        return y + self.mlp(self.norm2(y))

    def parameters(self):
        return self.attn.parameters() + self.mlp.parameters() \
            + self.norm1.parameters() + self.norm2.parameters()

    def zero_output_projections(self):
        self.attn.zero_output_projection()
        self.mlp.zero_output_projection()


class TransformerDecoderLayer:
    """Cross-attention block: y = x + attn(norm(x), memory); out = y + mlp(norm(y))."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32, prefix="dec"):
        self.attn = MultiHeadAttention(cfg, rng, dtype, prefix=f"{prefix}.attn")
        self.mlp = Mlp(cfg, rng, dtype, prefix=f"{prefix}.mlp")
        self.norm1 = _Norm(cfg.channels, rng, dtype, f"{prefix}.norm1")
        self.norm2 = _Norm(cfg.channels, rng, dtype, f"{prefix}.norm2")

    def __call__(self, x, memory, key_mask=None):
        y = x + self.attn(self.norm1(x), memory, key_mask)
        return y + self.mlp(self.norm2(y))

    def parameters(self):
        return self.attn.parameters() + self.mlp.parameters() \
            + self.norm1.parameters() + self.norm2.parameters()

    def zero_output_projections(self):
        self.attn.zero_output_projection()
        self.mlp.zero_output_projection()


class PositionalConv2d:
    """3x3 depthwise convolution over a (C, H, W) map, padding 1."""

    def __init__(self, channels, rng, dtype=np.float32, prefix="pos2d"):
        self.weight = Parameter(uniform_init(rng, (channels, 3, 3), 9, dtype), name=f"{prefix}.weight")
        self.bias = Parameter(np.zeros(channels, dtype), name=f"{prefix}.bias")

    def __call__(self, x):
        return ad.depthwise_conv2d(x, self.weight, self.bias, pad=1)

    def parameters(self):
        return [self.weight, self.bias]


class PositionalConv1d:
    """Depthwise 1-D convolution along a (N, C) token sequence, kernel 3, padding 1."""

    def __init__(self, channels, rng, dtype=np.float32, prefix="pos1d"):
        self.weight = Parameter(uniform_init(rng, (channels, 3), 3, dtype), name=f"{prefix}.weight")
        self.bias = Parameter(np.zeros(channels, dtype), name=f"{prefix}.bias")

    def __call__(self, x):
        return ad.depthwise_conv1d(x, self.weight, self.bias, pad=1)

    def parameters(self):
        return [self.weight, self.bias]
