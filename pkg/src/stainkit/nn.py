"""Neural layers assembled from the autodiff primitives.

Attention/MLP output projections are zero-initialized so residual blocks
start as identities; everything else uses Glorot-uniform fan-in/fan-out.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Module:
    """Base for parameterized components; collects parameters by dotted name."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in sorted(vars(self)):
            val = getattr(self, name)
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for key, p in val.named_parameters().items():
                    out[f"{name}.{key}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for key, p in item.named_parameters().items():
                            out[f"{name}.{i}.{key}"] = p
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        else:
            w = glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.shift)


class ChannelNorm(Module):
    """LayerNorm over the channel axis of a (batch, channel, h, w) map."""

    def __init__(self, channels: int):
        self.norm = LayerNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        moved = ad.transpose(x, (0, 2, 3, 1))
        return ad.transpose(self.norm(moved), (0, 3, 1, 2))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = Tensor(glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.padding, self.bias)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = Tensor(glorot_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in, fan_out),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.stride, self.padding, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (tokens, dim) matrices."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.to_query = Linear(dim, dim, rng)
        self.to_key = Linear(dim, dim, rng)
        self.to_value = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng, zero_init=True)
        self.last_attention: np.ndarray | None = None

    def __call__(self, query_tokens: Tensor, context_tokens: Tensor) -> Tensor:
        if query_tokens.shape[-1] != self.dim or context_tokens.shape[-1] != self.dim:
            raise ShapeError("token width does not match attention dim")
        t = query_tokens.shape[0]
        s = context_tokens.shape[0]
        dh = self.dim // self.heads
        q = ad.transpose(ad.reshape(self.to_query(query_tokens), (t, self.heads, dh)), (1, 0, 2))
        k = ad.transpose(ad.reshape(self.to_key(context_tokens), (s, self.heads, dh)), (1, 0, 2))
        v = ad.transpose(ad.reshape(self.to_value(context_tokens), (s, self.heads, dh)), (1, 0, 2))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        weights = ad.softmax(scores, axis=2)
        self.last_attention = np.array(weights.data)
        mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (t, self.dim))
        return self.out_proj(mixed)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class StainBlock(Module):
    """Residual block: self-attention, cross-attention into color tokens, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm_self = LayerNorm(dim)
        self.attn_self = MultiHeadAttention(dim, heads, rng)
        self.norm_cross = LayerNorm(dim)
        self.attn_cross = MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = FeedForward(dim, dim * mlp_ratio, rng)

    def __call__(self, x: Tensor, color_tokens: Tensor) -> Tensor:
        h = self.norm_self(x)
        x = ad.add(x, self.attn_self(h, h))
        x = ad.add(x, self.attn_cross(self.norm_cross(x), color_tokens))
        return ad.add(x, self.mlp(self.norm_mlp(x)))


class Encoder(Module):
    """Three stride-2 conv stages: (1, 3, s, s) down to (1, d, s/8, s/8).

    The final stage has no activation so features keep both signs, which
    matters for the cosine-based losses downstream.
    """

    def __init__(self, feature_dim: int, rng: np.random.Generator):
        if feature_dim % 4 != 0:
            raise ShapeError(f"feature dim {feature_dim} must be divisible by 4")
        d = feature_dim
        self.conv1 = Conv2d(3, d // 4, 3, rng, stride=2, padding=1)
        self.norm1 = ChannelNorm(d // 4)
        self.conv2 = Conv2d(d // 4, d // 2, 3, rng, stride=2, padding=1)
        self.norm2 = ChannelNorm(d // 2)
        self.conv3 = Conv2d(d // 2, d, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.gelu(self.norm1(self.conv1(x)))
        x = ad.gelu(self.norm2(self.conv2(x)))
        return self.conv3(x)


class Decoder(Module):
    """Three stride-2 transposed-conv stages back to a sigmoid RGB image."""

    def __init__(self, feature_dim: int, rng: np.random.Generator):
        d = feature_dim
        self.deconv1 = ConvTranspose2d(d, d // 2, 4, rng, stride=2, padding=1)
        self.norm1 = ChannelNorm(d // 2)
        self.deconv2 = ConvTranspose2d(d // 2, d // 4, 4, rng, stride=2, padding=1)
        self.norm2 = ChannelNorm(d // 4)
        self.deconv3 = ConvTranspose2d(d // 4, 3, 4, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.gelu(self.norm1(self.deconv1(x)))
        x = ad.gelu(self.norm2(self.deconv2(x)))
        return ad.sigmoid(self.deconv3(x))
