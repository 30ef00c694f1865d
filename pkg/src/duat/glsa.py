"""Global-to-local spatial aggregation: a global-context branch and a
local depthwise-attention branch over split channels, fused by a 1x1 conv."""
from __future__ import annotations

from . import ops
from .nn import Conv2d, ExpandMLP, Module, _rng
from .tensor import ShapeError, Tensor

ARRANGEMENTS = ("parallel", "gsa_only", "lsa_only", "serial_gsa_lsa", "serial_lsa_gsa")


class GlobalSpatialAttention(Module):
    """Softmax-over-positions pooling, an expand-2 MLP, residual add."""

    def __init__(self, channels: int = 32, rng=None, zero_init_mlp: bool = False):
        rng = _rng(rng)
        self.channels = channels
        self.mask = Conv2d(channels, 1, 1, rng=rng)
        self.mlp = ExpandMLP(channels, 2, rng=rng, zero_init_output=zero_init_mlp)

    def spatial_attention(self, x: Tensor) -> Tensor:
        """Attention over positions, shape (n, 1, h*w, 1)."""
        n, _, h, w = x.shape
        logits = ops.reshape(self.mask(x), (n, 1, h * w, 1))
        return ops.softmax(logits, axis=2)

    def context(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"GSA expects {self.channels} channels, got {c}")
        attn = self.spatial_attention(x)
        feats = ops.reshape(x, (n, 1, c, h * w))
        ctx = ops.matmul_spatial(feats, attn)  # (n, 1, c, 1)
        return ops.reshape(ctx, (n, c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.mlp(self.context(x)))


class LocalSpatialAttention(Module):
    """Sigmoid gate from three cascaded [1x1 conv, 3x3 depthwise conv]
    blocks at 32 channels; output is ``gate * x + x``."""

    width = 32

    def __init__(self, channels: int = 32, rng=None):
        rng = _rng(rng)
        self.channels = channels
        w = self.width
        self.pw = [Conv2d(channels if i == 0 else w, w, 1, rng=rng) for i in range(3)]
        self.dw = [Conv2d(w, w, 3, groups=w, rng=rng) for _ in range(3)]
        self.out = Conv2d(w, channels, 1, rng=rng)

    def attention(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"LSA expects {self.channels} channels, got {x.shape[1]}")
        y = x
        for pw, dw in zip(self.pw, self.dw):
            y = dw(pw(y))
        return ops.sigmoid(ops.add(self.out(y), x))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(self.attention(x), x), x)


class GLSA(Module):
    def __init__(self, channels: int = 64, out_channels: int = 32,
                 arrangement: str = "parallel", rng=None, zero_init_mlp: bool = False):
        rng = _rng(rng)
        if arrangement not in ARRANGEMENTS:
            raise ValueError(f"unknown arrangement {arrangement!r}; expected one of {ARRANGEMENTS}")
        if channels % 2:
            raise ShapeError(f"GLSA needs an even channel count, got {channels}")
        self.channels, self.arrangement = channels, arrangement
        # serial and single-branch variants run on the full map
        width = channels // 2 if arrangement == "parallel" else channels
        if arrangement != "lsa_only":
            self.gsa = GlobalSpatialAttention(width, rng=rng, zero_init_mlp=zero_init_mlp)
        if arrangement != "gsa_only":
            self.lsa = LocalSpatialAttention(width, rng=rng)
        self.fuse = Conv2d(channels, out_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"GLSA expects {self.channels} channels, got {x.shape[1]}")
        a = self.arrangement
        if a == "parallel":
            lo, hi = ops.split_channels(x, self.channels // 2)
            y = ops.concat_channels([self.gsa(lo), self.lsa(hi)])
        elif a == "gsa_only":
            y = self.gsa(x)
        elif a == "lsa_only":
            y = self.lsa(x)
        elif a == "serial_gsa_lsa":
            y = self.lsa(self.gsa(x))
        else:
            y = self.gsa(self.lsa(x))
        return self.fuse(y)

