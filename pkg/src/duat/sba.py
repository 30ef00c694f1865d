"""Selective boundary aggregation: two re-calibration attention units
mixing a deep semantic stream with a shallow boundary stream."""
from __future__ import annotations

from . import ops
from .nn import Conv2d, ConvBNReLU, Module, _rng
from .tensor import ShapeError, Tensor


class RAU(Module):
    """out = g1*t1 + g2*t2*(1-g1) + t1 with g1, g2 sigmoid(1x1 conv) gates."""

    def __init__(self, channels: int = 32, rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.theta = Conv2d(channels, channels, 1, rng=rng)
        self.phi = Conv2d(channels, channels, 1, rng=rng)

    def gates(self, t1: Tensor, t2: Tensor):
        return ops.sigmoid(self.theta(t1)), ops.sigmoid(self.phi(t2))

    def forward(self, t1: Tensor, t2: Tensor) -> Tensor:
        if t1.shape != t2.shape:
            raise ShapeError(f"RAU inputs differ in shape: {t1.shape} vs {t2.shape}")
        g1, g2 = self.gates(t1, t2)
        out = ops.mul(g1, t1)
        out = ops.add(out, ops.mul(ops.mul(g2, t2), ops.reverse(g1)))
        return ops.add(out, t1)


class SemanticFusion(Module):
    """Fuse the stride-16 and stride-32 GLSA outputs into the stride-8
    semantic stream: upsample, concat, 1x1 conv, upsample."""

    def __init__(self, channels: int = 32, rng=None, with_f2: bool = False):
        rng = _rng(rng)
        self.channels = channels
        self.fuse = Conv2d(2 * channels, channels, 1, rng=rng)
        if with_f2:
            self.fuse_f2 = Conv2d(2 * channels, channels, 1, rng=rng)

    def forward(self, f3: Tensor, f4: Tensor, f2: Tensor = None) -> Tensor:
        n, c, h3, w3 = f3.shape
        if c != self.channels or f4.shape[1] != self.channels:
            raise ShapeError(f"semantic fusion expects {self.channels}-channel inputs")
        if f4.shape[2] * 2 != h3 or f4.shape[3] * 2 != w3 or f4.shape[0] != n:
            raise ShapeError(f"f4 {f4.shape} is not half the resolution of f3 {f3.shape}")
        up4 = ops.resize_bilinear(f4, h3, w3)
        fused = self.fuse(ops.concat_channels([up4, f3]))
        fs = ops.resize_bilinear(fused, 2 * h3, 2 * w3)
        if f2 is not None:
            if not hasattr(self, "fuse_f2"):
                raise ShapeError("semantic fusion was built without the f2 input")
            fs = self.fuse_f2(ops.concat_channels([fs, f2]))
        return fs


class SBA(Module):
    def __init__(self, channels: int = 32, rng=None):
        rng = _rng(rng)
        self.channels = channels
        self.rau_sb = RAU(channels, rng=rng)
        self.rau_bs = RAU(channels, rng=rng)
        self.out = ConvBNReLU(2 * channels, channels, 3, rng=rng)

    def forward(self, f_s: Tensor, f_b: Tensor) -> Tensor:
        n, c, h, w = f_b.shape
        if c != self.channels or f_s.shape[1] != self.channels:
            raise ShapeError(f"SBA expects {self.channels}-channel inputs")
        if f_s.shape[0] != n or f_s.shape[2] * 2 != h or f_s.shape[3] * 2 != w:
            raise ShapeError(f"boundary stream {f_b.shape} must be twice the resolution of {f_s.shape}")
        f_s = ops.resize_bilinear(f_s, h, w)
        z = ops.concat_channels([self.rau_sb(f_s, f_b), self.rau_bs(f_b, f_s)])
        return self.out(z)
