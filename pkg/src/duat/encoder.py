"""Toy pyramid vision transformer producing a four-level feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Tuple

from . import ops
from .nn import Conv2d, LayerNorm, Module, _rng
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    dims: Tuple[int, ...] = (32, 64, 96, 128)
    heads: Tuple[int, ...] = (1, 2, 4, 8)
    reductions: Tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratios: Tuple[int, ...] = (4, 4, 4, 4)

    def __post_init__(self):
        fields = (self.depths, self.dims, self.heads, self.reductions, self.mlp_ratios)
        if any(len(f) != 4 for f in fields):
            raise ValueError("encoder config needs four entries per field")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ValueError(f"embed dim {d} not divisible by {h} heads")
        for r in self.reductions:
            if r < 1 or r & (r - 1):
                raise ValueError(f"reduction ratio {r} is not a power of two")


class FeaturePyramid(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


class PatchEmbed(Module):
    """Overlapping strided-conv embedding followed by LayerNorm."""

    def __init__(self, c_in, dim, stride, rng=None):
        kernel = 7 if stride == 4 else 3
        self.stride = stride
        self.proj = Conv2d(c_in, dim, kernel, stride=stride, padding=kernel // 2, rng=rng)
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} not divisible by patch stride {self.stride}")
        return self.norm(self.proj(x))


class SRAttention(Module):
    """Multi-head attention whose keys/values come from a strided
    projection of the token grid. Includes the pre-norm and residual."""

    def __init__(self, dim, heads, reduction, rng=None):
        rng = _rng(rng)
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.norm = LayerNorm(dim)
        self.q = Conv2d(dim, dim, 1, rng=rng)
        self.kv = Conv2d(dim, 2 * dim, 1, rng=rng)
        self.proj = Conv2d(dim, dim, 1, rng=rng)
        if reduction > 1:
            self.sr = Conv2d(dim, dim, reduction, stride=reduction, padding=0, rng=rng)
            self.sr_norm = LayerNorm(dim)

    def _to_heads(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        d = c // self.heads
        x = ops.reshape(x, (n, self.heads, d, h * w))
        return ops.transpose(x, (0, 1, 3, 2))  # (n, heads, tokens, d)

    def attention_weights(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Return (weights (n, heads, q_tokens, kv_tokens), values)."""
        n, c, h, w = x.shape
        if c != self.dim:
            raise ShapeError(f"attention configured for {self.dim} channels, got {c}")
        if h % self.reduction or w % self.reduction:
            raise ShapeError(f"token grid {h}x{w} not divisible by reduction {self.reduction}")
        y = self.norm(x)
        q = self._to_heads(self.q(y))
        src = self.sr_norm(self.sr(y)) if self.reduction > 1 else y
        k, v = ops.split_channels(self.kv(src), self.dim)
        k, v = self._to_heads(k), self._to_heads(v)
        scale = (c // self.heads) ** -0.5
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), scale)
        return ops.softmax(logits, axis=-1), v

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        attn, v = self.attention_weights(x)
        out = ops.matmul(attn, v)  # (n, heads, tokens, d)
        out = ops.reshape(ops.transpose(out, (0, 1, 3, 2)), (n, c, h, w))
        return ops.add(x, self.proj(out))


class MixFFN(Module):
    """Pre-norm MLP with a depthwise 3x3 conv for positional information."""

    def __init__(self, dim, ratio, rng=None):
        rng = _rng(rng)
        hidden = dim * ratio
        self.norm = LayerNorm(dim)
        self.fc1 = Conv2d(dim, hidden, 1, rng=rng)
        self.dw = Conv2d(hidden, hidden, 3, groups=hidden, rng=rng)
        self.fc2 = Conv2d(hidden, dim, 1, rng=rng)

    def forward(self, x):
        return ops.add(x, self.fc2(ops.gelu(self.dw(self.fc1(self.norm(x))))))


class Block(Module):
    def __init__(self, dim, heads, reduction, ratio, rng=None):
        self.attn = SRAttention(dim, heads, reduction, rng=rng)
        self.ffn = MixFFN(dim, ratio, rng=rng)

    def forward(self, x):
        return self.ffn(self.attn(x))


class Stage(Module):
    def __init__(self, c_in, dim, stride, depth, heads, reduction, ratio, rng=None):
        self.embed = PatchEmbed(c_in, dim, stride, rng=rng)
        self.blocks = [Block(dim, heads, reduction, ratio, rng=rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x):
        x = self.embed(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class PyramidEncoder(Module):
    def __init__(self, config: EncoderConfig = EncoderConfig(), rng=None, in_channels: int = 3):
        rng = _rng(rng)
        self.config = config
        self.in_channels = in_channels
        c_prev = in_channels
        self.stages = []
        for i in range(4):
            self.stages.append(Stage(c_prev, config.dims[i], 4 if i == 0 else 2, config.depths[i],
                                     config.heads[i], config.reductions[i], config.mlp_ratios[i], rng=rng))
            c_prev = config.dims[i]

    def forward(self, x: Tensor) -> FeaturePyramid:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)
