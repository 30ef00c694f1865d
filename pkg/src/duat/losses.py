"""Boundary-weighted BCE + IoU deep-supervision loss and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor

REFERENCE_SIZE = 352


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 1.0
    lambda_bce: float = 1.0
    # None: scale 15 px at 352 px down to the mask size, floor 2
    radius: Optional[int] = None
    amplitude: float = 5.0

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_bce < 0 or (self.lambda_iou == 0 and self.lambda_bce == 0):
            raise ValueError("loss weights must be non-negative and not both zero")


def window_radius(height: int) -> int:
    return max(2, int(round(15 * height / REFERENCE_SIZE)))


def box_mean(a: np.ndarray, r: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window clipped to the image (normalized window).

    Works on the last two axes.
    """
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)]
    integral = np.pad(a.cumsum(-2).cumsum(-1), pad)
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    s = (integral[..., y1[:, None], x1[None, :]] - integral[..., y0[:, None], x1[None, :]]
         - integral[..., y1[:, None], x0[None, :]] + integral[..., y0[:, None], x0[None, :]])
    count = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return s / count


def pixel_weights(mask, radius: Optional[int] = None, amplitude: float = 5.0) -> np.ndarray:
    """w = 1 + amplitude * |boxmean(mask) - mask|; ones away from boundaries."""
    g = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.isin(g, (0, 1)).all():
        raise ValueError("pixel_weights needs a binary mask")
    r = window_radius(g.shape[-2]) if radius is None else radius
    return 1.0 + amplitude * np.abs(box_mean(g, r) - g)


def weighted_bce(logits: Tensor, mask: Tensor, weights: np.ndarray) -> Tensor:
    """Per-sample sum(w*bce)/sum(w), averaged over the batch."""
    n = logits.shape[0]
    w = Tensor(weights.astype(logits.dtype))
    num = ops.reduce_sum(ops.mul(ops.bce_with_logits(logits, mask), w), (1, 2, 3))
    den = Tensor(w.data.sum(axis=(1, 2, 3), keepdims=True))
    return ops.mul(ops.reduce_sum(ops.div(num, den)), 1.0 / n)


def weighted_iou(logits: Tensor, mask: Tensor, weights: np.ndarray, smooth: float = 1.0) -> Tensor:
    n = logits.shape[0]
    w = Tensor(weights.astype(logits.dtype))
    p = ops.sigmoid(logits)
    inter = ops.reduce_sum(ops.mul(ops.mul(p, mask), w), (1, 2, 3))
    total = ops.reduce_sum(ops.mul(ops.add(p, mask), w), (1, 2, 3))
    union = ops.sub(total, inter)
    ratio = ops.div(ops.add(inter, smooth), ops.add(union, smooth))
    return ops.reverse(ops.mul(ops.reduce_sum(ratio), 1.0 / n))


def loss(logits: Tensor, mask, cfg: LossConfig = LossConfig(), weights: Optional[np.ndarray] = None) -> Tensor:
    """lambda_iou * weighted IoU + lambda_bce * weighted BCE."""
    mask = as_tensor(mask)
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} vs mask {mask.shape}")
    if weights is None:
        weights = pixel_weights(mask.data, cfg.radius, cfg.amplitude)
    mask = Tensor(mask.data.astype(logits.dtype))
    terms = []
    if cfg.lambda_iou:
        terms.append(ops.mul(weighted_iou(logits, mask, weights), cfg.lambda_iou))
    if cfg.lambda_bce:
        terms.append(ops.mul(weighted_bce(logits, mask, weights), cfg.lambda_bce))
    return terms[0] if len(terms) == 1 else ops.add(*terms)


def total_loss(pred, mask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Deep supervision: loss(S1) + loss(S2)."""
    mask = as_tensor(mask)
    if pred.s1.shape != mask.shape or pred.s2.shape != mask.shape:
        raise ShapeError("prediction and mask shapes differ")
    weights = pixel_weights(mask.data, cfg.radius, cfg.amplitude)
    return ops.add(loss(pred.s1, mask, cfg, weights), loss(pred.s2, mask, cfg, weights))


# ---------------------------------------------------------------- metrics

def metrics(pred_mask: np.ndarray, gt: np.ndarray, prob: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """(dice, iou, mae) for one sample. MAE uses ``prob`` when given,
    otherwise the hard mask. Two empty masks score dice = iou = 1."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    inter = np.logical_and(p, g).sum()
    ps, gs = p.sum(), g.sum()
    union = ps + gs - inter
    if union == 0:
        dice = iou = 1.0
    else:
        dice = 2.0 * inter / (ps + gs)
        iou = inter / union
    soft = p.astype(np.float64) if prob is None else np.asarray(prob, dtype=np.float64)
    if soft.shape != g.shape:
        raise ShapeError(f"probability map {soft.shape} vs ground truth {g.shape}")
    mae = float(np.abs(soft - g).mean())
    return float(dice), float(iou), mae


DEFAULT_BIN_EDGES = (0.0, 0.05, 0.10, 0.15, 0.20, 0.30, 0.50, 1.0)


def bin_label(lo: float, hi: float) -> str:
    return f"{100 * lo:g}-{100 * hi:g}%"


def assign_bin(fraction: float, edges: Sequence[float] = DEFAULT_BIN_EDGES) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"area fraction {fraction} outside [0, 1]")
    for i in range(len(edges) - 1):
        last = i == len(edges) - 2
        if edges[i] <= fraction < edges[i + 1] or (last and fraction == edges[i + 1]):
            return i
    raise ValueError(f"area fraction {fraction} outside bin edges {edges}")


@dataclass
class SampleResult:
    sample_id: str
    dice: float
    iou: float
    mae: float
    area_fraction: float
    bin: str = ""


@dataclass
class EvalReport:
    samples: List[SampleResult]
    bin_edges: Tuple[float, ...] = DEFAULT_BIN_EDGES
    bins: List[Dict] = field(default_factory=list)

    @property
    def mdice(self) -> float:
        return float(np.mean([s.dice for s in self.samples]))

    @property
    def miou(self) -> float:
        return float(np.mean([s.iou for s in self.samples]))

    @property
    def mae(self) -> float:
        return float(np.mean([s.mae for s in self.samples]))

    def aggregate(self) -> Dict:
        return {"n": len(self.samples), "mdice": self.mdice, "miou": self.miou, "mae": self.mae}

    def bin_mean(self, label: str) -> Optional[float]:
        for b in self.bins:
            if b["bin"] == label:
                return b["mean_dice"]
        return None

    def to_lines(self) -> List[str]:
        lines = [json.dumps(asdict(s), sort_keys=True) for s in self.samples]
        for b in self.bins:
            lines.append(json.dumps({"record": "bin", **b}, sort_keys=True))
        lines.append(json.dumps({"record": "aggregate", **self.aggregate()}, sort_keys=True))
        return lines

    def curve_table(self) -> str:
        """Whitespace table: bin centre (%), mean dice, count, label."""
        out = ["# area_center_pct mean_dice count bin"]
        for b in self.bins:
            center = 50.0 * (b["lo"] + b["hi"])
            out.append(f"{center:.4f} {b['mean_dice']:.6f} {b['count']} {b['bin']}")
        return "\n".join(out) + "\n"


def size_stratified(results: Iterable[SampleResult], bin_edges: Sequence[float] = DEFAULT_BIN_EDGES) -> EvalReport:
    """Bucket samples by object area fraction; empty bins are omitted."""
    results = list(results)
    edges = tuple(bin_edges)
    groups: Dict[int, List[SampleResult]] = {}
    for r in results:
        i = assign_bin(r.area_fraction, edges)
        r.bin = bin_label(edges[i], edges[i + 1])
        groups.setdefault(i, []).append(r)
    bins = []
    for i in sorted(groups):
        members = groups[i]
        bins.append({
            "bin": bin_label(edges[i], edges[i + 1]),
            "lo": edges[i], "hi": edges[i + 1],
            "count": len(members),
            "mean_dice": float(np.mean([m.dice for m in members])),
        })
    return EvalReport(results, edges, bins)


SMALL_OBJECT_BIN = bin_label(0.0, 0.05)


def read_report(lines: Iterable[str]) -> Dict:
    """Parse report lines back into {'samples': [...], 'bins': [...], 'aggregate': {...}}."""
    out = {"samples": [], "bins": [], "aggregate": None}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        kind = rec.pop("record", "sample")
        if kind == "bin":
            out["bins"].append(rec)
        elif kind == "aggregate":
            out["aggregate"] = rec
        else:
            out["samples"].append(rec)
    return out
