"""Synthetic blob segmentation data, Netpbm I/O, augmentation and splits."""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage


@dataclass
class Sample:
    image: np.ndarray          # (3, h, w) float in [0, 1]
    mask: np.ndarray           # (1, h, w) uint8 in {0, 1}
    area_fraction: float
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, h, w), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")


@dataclass(frozen=True)
class GenSpec:
    size: int = 64
    count_range: Tuple[int, int] = (1, 3)
    fraction_range: Tuple[float, float] = (0.01, 0.25)
    blur: float = 1.0
    contrast: float = 0.35
    noise: float = 0.04
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        lo, hi = self.fraction_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"fraction range {self.fraction_range} must lie inside (0, 1)")
        if self.blur < 0:
            raise ValueError("blur radius must be non-negative")
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise ValueError(f"bad object count range {self.count_range}")


class DataError(ValueError):
    """Malformed or missing input data."""


class GenerationError(RuntimeError):
    pass


def _lowpass_noise(rng, shape, sigma):
    z = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return z / (z.std() + 1e-12)


def _blob_mask(rng, spec: GenSpec, target: float) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    k = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    field = np.zeros((s, s))
    # object scale follows the target area so single blobs can hit it
    base = math.sqrt(target * s * s / (math.pi * k))
    for _ in range(k):
        cy, cx = rng.uniform(0.15 * s, 0.85 * s, 2)
        sy, sx = base * rng.uniform(0.7, 1.4, 2)
        field += rng.uniform(0.7, 1.0) * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    field += 0.08 * _lowpass_noise(rng, (s, s), max(1.0, s / 16))
    n_fg = int(round(target * s * s))
    if n_fg < 1:
        return np.zeros((s, s), dtype=np.uint8)
    thr = np.sort(field.ravel())[-n_fg]
    return (field >= thr).astype(np.uint8)


def _render(rng, spec: GenSpec, mask: np.ndarray) -> np.ndarray:
    s = spec.size
    bg = rng.uniform(0.3, 0.7, 3)
    direction = rng.choice([-1.0, 1.0], 3) * rng.uniform(0.6, 1.0, 3)
    fg = bg + spec.contrast * direction
    alpha = mask.astype(np.float64)
    if spec.blur > 0:
        alpha = ndimage.gaussian_filter(alpha, spec.blur, mode="nearest")
    img = bg[:, None, None] * (1 - alpha) + fg[:, None, None] * alpha
    texture = _lowpass_noise(rng, (s, s), 1.5)
    img = img + spec.noise * texture[None] + 0.5 * spec.noise * rng.standard_normal((3, s, s))
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def generate_one(spec: GenSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    lo, hi = spec.fraction_range
    total = spec.size * spec.size
    for _ in range(spec.max_retries):
        mask = _blob_mask(rng, spec, rng.uniform(lo, hi))
        count = int(mask.sum())
        frac = count / total
        if count > 0 and lo <= frac <= hi:
            image = _render(rng, spec, mask)
            return Sample(image, mask[None], frac, f"s{spec.seed:04d}_{index:05d}")
    raise GenerationError(f"could not reach area fraction in {spec.fraction_range} after {spec.max_retries} tries")


def generate(spec: GenSpec, n: int, start: int = 0) -> List[Sample]:
    return [generate_one(spec, start + i) for i in range(n)]


# ---------------------------------------------------------------- Netpbm

class NetpbmError(DataError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise NetpbmError("malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval and raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: missing separator before raster")
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError("non-integer header field") from None
    if width < 1 or height < 1:
        raise NetpbmError("empty raster")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    return magic.decode(), width, height, pos + 1


def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary P5/P6 file to a uint8 array of shape (h, w) or (h, w, 3)."""
    buf = Path(path).read_bytes()
    magic, w, h, offset = _parse_header(buf)
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise NetpbmError(f"truncated raster: expected {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_netpbm(path: Union[str, Path], arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 raster, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot write array of shape {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes())


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image: np.ndarray) -> None:
    write_netpbm(path, image_to_bytes(image))


def read_image(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 3:
        raise NetpbmError(f"{path}: expected an RGB (P6) image")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    write_netpbm(path, (np.asarray(mask).reshape(mask.shape[-2:]) > 0).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise NetpbmError(f"{path}: expected a grayscale (P5) mask")
    return (arr > 127).astype(np.uint8)[None]


# ---------------------------------------------------------------- manifests

def save_samples(samples: Sequence[Sample], directory: Union[str, Path], manifest: Union[str, Path]) -> Path:
    """Write images/masks as Netpbm files plus a tab-separated manifest.

    Paths in the manifest are relative to the manifest's own directory.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = Path(manifest)
    lines = []
    for s in samples:
        img_path = directory / f"{s.id}.ppm"
        mask_path = directory / f"{s.id}_mask.pgm"
        write_image(img_path, s.image)
        write_mask(mask_path, s.mask)
        rel = [os.path.relpath(p, manifest.parent) for p in (img_path, mask_path)]
        lines.append(f"{s.id}\t{rel[0]}\t{rel[1]}\t{s.area_fraction!r}")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path: Union[str, Path]) -> List[Sample]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        sid, img_path, mask_path, frac = parts
        img_path, mask_path = Path(img_path), Path(mask_path)
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        if not mask_path.is_absolute():
            mask_path = path.parent / mask_path
        try:
            image, mask = read_image(img_path), read_mask(mask_path)
            samples.append(Sample(image, mask, float(frac), sid))
        except OSError as exc:
            raise DataError(f"{path}:{lineno}: {exc.strerror}: {exc.filename}") from None
        except NetpbmError:
            raise
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return samples


# ---------------------------------------------------------------- augmentation and splits

def transform(sample: Sample, flip: bool, quarter_turns: int) -> Sample:
    def apply(a):
        if flip:
            a = a[:, :, ::-1]
        return np.ascontiguousarray(np.rot90(a, quarter_turns, axes=(1, 2)))
    return Sample(apply(sample.image), apply(sample.mask), sample.area_fraction, sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Horizontal flip (p=0.5) and a random multiple-of-90-degree rotation."""
    flip = bool(rng.random() < 0.5)
    turns = int(rng.integers(0, 4))
    return transform(sample, flip, turns)


def split(samples: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle deterministically and cut into train/val/test partitions."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    idx = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([samples[i] for i in part] for part in idx)


def batch_arrays(samples: Sequence[Sample], dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    return images, masks
