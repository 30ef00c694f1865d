"""Flat dotted-key configuration: ``key = value`` lines, ``#`` comments.

Every accepted key and its default lives in :data:`DEFAULTS`; anything else
is rejected.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from .data import GenSpec
from .encoder import EncoderConfig
from .losses import DEFAULT_BIN_EDGES, LossConfig
from .model import VARIANTS, DuatConfig
from .train import TrainConfig

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    # synthetic data
    "data.n": 100,
    "data.size": 64,
    "data.count_min": 1,
    "data.count_max": 3,
    "data.fraction_min": 0.01,
    "data.fraction_max": 0.25,
    "data.blur": 1.0,
    "data.contrast": 0.35,
    "data.noise": 0.04,
    "data.split": (0.8, 0.1, 0.1),
    "data.dir": "",
    # model
    "model.depths": (2, 2, 2, 2),
    "model.dims": (32, 64, 96, 128),
    "model.heads": (1, 2, 4, 8),
    "model.reductions": (8, 4, 2, 1),
    "model.mlp_ratios": (4, 4, 4, 4),
    "model.use_sba": True,
    "model.use_glsa": True,
    "model.fuse_f2": False,
    "model.head_prior": 0.05,
    "glsa.arrangement": "parallel",
    # optimization
    "train.steps": 2000,
    "train.batch_size": 4,
    "train.lr": 1e-4,
    "train.weight_decay": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.schedule": "constant",
    "train.warmup": 0,
    "train.grad_clip": 0.0,
    "train.augment": True,
    "train.log_every": 10,
    # loss
    "loss.lambda_iou": 1.0,
    "loss.lambda_bce": 1.0,
    "loss.radius": 0,
    "loss.amplitude": 5.0,
    # evaluation and ablation
    "eval.bin_edges": DEFAULT_BIN_EDGES,
    "ablate.variants": tuple(VARIANTS),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, object]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def resolve(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
            seed: Optional[int] = None, base_text: str = "") -> Dict[str, object]:
    """Defaults, then ``base_text``, then the config file, then ``key=value``
    overrides, then --seed."""
    cfg = dict(DEFAULTS)
    if base_text:
        cfg.update(parse_lines(base_text.splitlines(), "<embedded>"))
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg.update(parse_lines(text.splitlines(), str(path)))
    cfg.update(parse_lines(overrides, "--set"))
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: Dict[str, object]) -> None:
    try:
        model_config(cfg)
        gen_spec(cfg)
        loss_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for v in cfg["ablate.variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    if cfg["train.schedule"] not in ("constant", "cosine"):
        raise ConfigError(f"train.schedule must be 'constant' or 'cosine', got {cfg['train.schedule']!r}")
    if not 0 <= cfg["train.warmup"] < max(1, cfg["train.steps"]):
        raise ConfigError(f"train.warmup must lie in [0, train.steps), got {cfg['train.warmup']}")
    if cfg["train.grad_clip"] < 0:
        raise ConfigError(f"train.grad_clip must be >= 0, got {cfg['train.grad_clip']}")


def dump(cfg: Dict[str, object]) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


def model_config(cfg) -> DuatConfig:
    enc = EncoderConfig(depths=cfg["model.depths"], dims=cfg["model.dims"], heads=cfg["model.heads"],
                        reductions=cfg["model.reductions"], mlp_ratios=cfg["model.mlp_ratios"])
    return DuatConfig(encoder=enc, arrangement=cfg["glsa.arrangement"], use_sba=cfg["model.use_sba"],
                      use_glsa=cfg["model.use_glsa"], fuse_f2=cfg["model.fuse_f2"],
                      input_size=cfg["data.size"], seed=cfg["seed"], head_prior=cfg["model.head_prior"])


def gen_spec(cfg, seed: Optional[int] = None) -> GenSpec:
    return GenSpec(size=cfg["data.size"], count_range=(cfg["data.count_min"], cfg["data.count_max"]),
                   fraction_range=(cfg["data.fraction_min"], cfg["data.fraction_max"]),
                   blur=cfg["data.blur"], contrast=cfg["data.contrast"], noise=cfg["data.noise"],
                   seed=cfg["seed"] if seed is None else seed)


def loss_config(cfg) -> LossConfig:
    return LossConfig(cfg["loss.lambda_iou"], cfg["loss.lambda_bce"],
                      cfg["loss.radius"] or None, cfg["loss.amplitude"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(steps=cfg["train.steps"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       weight_decay=cfg["train.weight_decay"], betas=(cfg["train.beta1"], cfg["train.beta2"]),
                       eps=cfg["train.eps"], augment=cfg["train.augment"], seed=cfg["seed"],
                       log_every=cfg["train.log_every"], schedule=cfg["train.schedule"],
                       warmup=cfg["train.warmup"], grad_clip=cfg["train.grad_clip"])


def split_key(cfg) -> Tuple[float, float, float]:
    return tuple(cfg["data.split"])
