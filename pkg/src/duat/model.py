"""Full network: encoder, per-level GLSA, semantic fusion, SBA and the two
side-output heads."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, NamedTuple

import numpy as np

from . import ops
from .encoder import EncoderConfig, PyramidEncoder
from .glsa import ARRANGEMENTS, GLSA
from .nn import Conv2d, Module, _rng
from .sba import SBA, SemanticFusion
from .tensor import ShapeError, Tensor, no_grad

DECODER_WIDTH = 64
FUSED_WIDTH = 32


@dataclass(frozen=True)
class DuatConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    arrangement: str = "parallel"
    use_sba: bool = True
    use_glsa: bool = True
    fuse_f2: bool = False
    input_size: int = 64
    seed: int = 0
    # initial foreground probability encoded in the head biases; 0 keeps zero bias
    head_prior: float = 0.05

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENTS:
            raise ValueError(f"unknown arrangement {self.arrangement!r}")
        if not self.use_glsa and self.arrangement != "parallel":
            raise ValueError("arrangement has no effect without GLSA; flags contradict")
        if not 0 <= self.head_prior < 1:
            raise ValueError(f"head_prior must lie in [0, 1), got {self.head_prior}")
        if self.input_size % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")


class Prediction(NamedTuple):
    s1: Tensor
    s2: Tensor

    def probability(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.s1.data))


class DuAT(Module):
    def __init__(self, config: DuatConfig = DuatConfig(), zero_init_gsa_mlp: bool = False):
        rng = _rng(config.seed)
        self.config = config
        enc = config.encoder
        self.encoder = PyramidEncoder(enc, rng=rng)
        levels = (1, 2, 3) if config.fuse_f2 else (2, 3)  # indices into f2..f4
        self.levels = levels
        self.proj = [Conv2d(enc.dims[i], DECODER_WIDTH, 1, rng=rng) for i in levels]
        if config.use_glsa:
            self.decoders = [GLSA(DECODER_WIDTH, FUSED_WIDTH, config.arrangement, rng=rng,
                                  zero_init_mlp=zero_init_gsa_mlp) for _ in levels]
        else:
            self.decoders = [Conv2d(DECODER_WIDTH, FUSED_WIDTH, 3, rng=rng) for _ in levels]
        self.fusion = SemanticFusion(FUSED_WIDTH, rng=rng, with_f2=config.fuse_f2)
        self.boundary = Conv2d(enc.dims[0], FUSED_WIDTH, 1, rng=rng)
        if config.use_sba:
            self.sba = SBA(FUSED_WIDTH, rng=rng)
        else:
            self.plain_fuse = Conv2d(2 * FUSED_WIDTH, FUSED_WIDTH, 3, rng=rng)
        self.head1 = Conv2d(FUSED_WIDTH, 1, 1, rng=rng)
        self.head2 = Conv2d(FUSED_WIDTH, 1, 1, rng=rng)
        if config.head_prior:
            prior_logit = np.log(config.head_prior / (1 - config.head_prior))
            self.head1.bias.data[...] = prior_logit
            self.head2.bias.data[...] = prior_logit

    def decode(self, pyramid) -> Dict[str, Tensor]:
        feats = [pyramid.f2, pyramid.f3, pyramid.f4]
        dec = {}
        for i, proj, block in zip(self.levels, self.proj, self.decoders):
            dec[i] = block(proj(feats[i - 1]))
        f_s = self.fusion(dec[2], dec[3], dec.get(1))
        f_b = self.boundary(pyramid.f1)
        if self.config.use_sba:
            z = self.sba(f_s, f_b)
        else:
            _, _, h, w = f_b.shape
            z = self.plain_fuse(ops.concat_channels([f_b, ops.resize_bilinear(f_s, h, w)]))
        return {"f_s": f_s, "f_b": f_b, "z": z}

    def forward(self, x: Tensor) -> Prediction:
        _, _, h, w = x.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        d = self.decode(self.encoder(x))
        s1 = ops.resize_bilinear(self.head1(d["z"]), h, w)
        s2 = ops.resize_bilinear(self.head2(d["f_s"]), h, w)
        return Prediction(s1, s2)

    def predict(self, x: Tensor) -> np.ndarray:
        """Binary mask from the SBA head; a logit of exactly 0 is foreground."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                pred = self.forward(x)
        finally:
            self.train(was)
        return threshold_logits(pred.s1.data)


def threshold_logits(logits: np.ndarray) -> np.ndarray:
    return (logits >= 0).astype(np.uint8)


def ablate(config: DuatConfig, variant: str) -> DuatConfig:
    """Map an ablation row name to a model configuration."""
    try:
        overrides = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}") from None
    return replace(config, **overrides)


VARIANTS: Dict[str, Dict] = {
    "+ GSA": dict(arrangement="gsa_only", use_glsa=True, use_sba=True),
    "+ LSA": dict(arrangement="lsa_only", use_glsa=True, use_sba=True),
    "+ GSA + LSA (Serial)": dict(arrangement="serial_gsa_lsa", use_glsa=True, use_sba=True),
    "+ LSA + GSA (Serial)": dict(arrangement="serial_lsa_gsa", use_glsa=True, use_sba=True),
    "w/o SBA": dict(arrangement="parallel", use_glsa=True, use_sba=False),
    "w/o GLSA": dict(arrangement="parallel", use_glsa=False, use_sba=True),
    "SBA + GLSA (Ours)": dict(arrangement="parallel", use_glsa=True, use_sba=True),
}
