"""Synthetic dermoscopy images, ISIC-layout I/O, preprocessing and augmentation.

Synthetic lesions are star-convex blobs: an ellipse whose radius is modulated
by a few cosine harmonics.  Melanoma samples get stronger, higher-order border
harmonics, a multi-tone interior with regression-like pale patches, a darker
streaky rim and finer texture; the mean color distribution is shared by both
classes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .morphology import mask_from_uint8, mask_to_uint8

__all__ = [
    "Sample",
    "SynthConfig",
    "generate_synthetic",
    "generate_splits",
    "blob_radius",
    "write_dataset",
    "load_isic",
    "preprocess",
    "fit_to_canvas",
    "augment",
    "apply_geometry",
    "geometry_source_coords",
    "IMAGE_EXTENSIONS",
]

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".ppm", ".pnm", ".pgm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")
MASK_SUFFIX = "_segmentation"
SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) bool
    label: int  # 0 non-melanoma, 1 melanoma
    id: str
    valid_hw: Optional[tuple] = None  # un-padded extent after preprocessing

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")
        if self.label not in (0, 1):
            raise ValueError(f"{self.id}: label must be 0 or 1, got {self.label}")
        if self.valid_hw is None:
            self.valid_hw = tuple(self.mask.shape)


@dataclass
class SynthConfig:
    train_per_class: int = 100
    test_per_class: int = 25
    image_size: int = 64
    radius_range: tuple = (12.0, 20.0)
    aspect_range: tuple = (0.75, 1.0)
    center_jitter: float = 6.0
    benign_amplitude: tuple = (0.0, 0.04)  # per-harmonic border irregularity
    melanoma_amplitude: tuple = (0.06, 0.11)
    benign_tone_spread: tuple = (0.0, 0.04)  # interior color variance
    melanoma_tone_spread: tuple = (0.10, 0.22)
    hair_probability: float = 0.3
    seed: int = 42

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.aspect_range = tuple(self.aspect_range)
        self.benign_amplitude = tuple(self.benign_amplitude)
        self.melanoma_amplitude = tuple(self.melanoma_amplitude)
        self.benign_tone_spread = tuple(self.benign_tone_spread)
        self.melanoma_tone_spread = tuple(self.melanoma_tone_spread)

    def validate(self) -> None:
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.melanoma_amplitude[0] <= self.benign_amplitude[1]:
            raise ValueError("melanoma irregularity range must lie strictly above the benign range")
        widest = self.radius_range[1] * (1 + _N_HARMONICS * self.melanoma_amplitude[1])
        if widest > self.image_size / 2:
            raise ValueError("lesion can be larger than the frame; reduce radius_range or amplitudes")
        if min(self.radius_range) <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValueError(f"invalid radius_range {self.radius_range}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("sample counts must be non-negative")


_N_HARMONICS = 3


@dataclass
class _Blob:
    cx: float
    cy: float
    a: float  # semi-axis along the rotated x direction
    b: float
    angle: float
    harmonics: list = field(default_factory=list)  # (order, amplitude, phase)


def blob_radius(blob: _Blob, theta: np.ndarray) -> np.ndarray:
    """Boundary radius of the blob along direction ``theta``."""
    t = theta - blob.angle
    ellipse = blob.a * blob.b / np.sqrt((blob.b * np.cos(t)) ** 2 + (blob.a * np.sin(t)) ** 2)
    mod = np.ones_like(theta)
    for order, amp, phase in blob.harmonics:
        mod = mod + amp * np.cos(order * theta + phase)
    return ellipse * mod


def _polar(blob: _Blob, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - blob.cx, yy - blob.cy
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def rasterize(blob: _Blob, size: int) -> np.ndarray:
    rho, theta = _polar(blob, size)
    return rho <= blob_radius(blob, theta)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _draw_hair(rng: np.random.Generator, image: np.ndarray, size: int) -> None:
    n = int(rng.integers(1, 4))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n):
        x0, y0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, math.pi)
        bend = rng.uniform(-0.02, 0.02)
        # signed distance to a gently curved line through (x0, y0)
        u = (xx - x0) * math.cos(ang) + (yy - y0) * math.sin(ang)
        v = -(xx - x0) * math.sin(ang) + (yy - y0) * math.cos(ang)
        dist = np.abs(v - bend * u * u)
        stroke = np.clip(1.0 - dist / 0.8, 0, 1)
        darkness = rng.uniform(0.55, 0.85)
        image *= 1 - darkness * stroke[None]


def _make_sample(config: SynthConfig, label: int, rng: np.random.Generator, sample_id: str) -> Sample:
    size = config.image_size
    r0 = rng.uniform(*config.radius_range)
    aspect = rng.uniform(*config.aspect_range)
    center = size / 2 - 0.5 + rng.uniform(-config.center_jitter, config.center_jitter, 2)
    amp_range = config.melanoma_amplitude if label else config.benign_amplitude
    orders = rng.choice(np.arange(3, 9) if label else np.arange(2, 5), size=_N_HARMONICS, replace=False)
    harmonics = [
        (int(m), float(rng.uniform(*amp_range)), float(rng.uniform(0, 2 * math.pi))) for m in orders
    ]
    blob = _Blob(center[0], center[1], r0, r0 * aspect, rng.uniform(0, math.pi), harmonics)
    mask = rasterize(blob, size)

    skin = np.array([0.86, 0.66, 0.55]) + rng.uniform(-0.07, 0.07, 3)
    shade = 1 + 0.05 * _smooth_noise(rng, size, 10)
    image = skin[:, None, None] * shade[None]

    lesion = np.array([0.48, 0.32, 0.22]) * rng.uniform(0.75, 1.2) + rng.uniform(-0.05, 0.05, 3)
    rho, theta = _polar(blob, size)
    rel = rho / np.maximum(blob_radius(blob, theta), 1e-6)  # 0 at center, 1 at the border
    spread_range = config.melanoma_tone_spread if label else config.benign_tone_spread
    spread = rng.uniform(*spread_range)
    tones = spread * _smooth_noise(rng, size, 3.0 if label else 6.0)
    body = lesion[:, None, None] * (1 + tones[None] - 0.08 * rel[None])
    if label:
        # pale regression patches and a darker, streaky periphery
        pale = np.clip(_smooth_noise(rng, size, 2.5) - 1.0, 0, None)
        body = body + 0.6 * pale[None] * (skin[:, None, None] - body)
        streaks = 0.5 + 0.5 * np.cos(rng.integers(8, 14) * theta + rng.uniform(0, 2 * math.pi))
        rim = np.clip((rel - 0.7) / 0.3, 0, 1) * (0.55 + 0.45 * streaks)
        body = body * (1 - 0.35 * rim[None])
        body = body * (1 + 0.06 * rng.standard_normal((size, size)))[None]
    # soft alpha so the boundary is not a hard step
    alpha = np.clip((1.0 - rel) * 6.0 + 0.5, 0, 1)
    image = image * (1 - alpha[None]) + body * alpha[None]

    if rng.random() < config.hair_probability:
        _draw_hair(rng, image, size)
    image = image + 0.02 * rng.standard_normal(image.shape)
    image = np.clip(image, 0, 1)
    return Sample(image=image, mask=mask, label=label, id=sample_id)


def generate_synthetic(config: Optional[SynthConfig] = None, split: str = "train") -> list[Sample]:
    """Deterministic synthetic split; each sample has its own derived RNG stream."""
    config = config or SynthConfig()
    config.validate()
    count = config.train_per_class if split == "train" else config.test_per_class
    code = SPLIT_CODES[split]
    samples = []
    for i in range(2 * count):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, code, i]))
        samples.append(_make_sample(config, i % 2, rng, f"SYN_{split}_{i:05d}"))
    return samples


def generate_splits(config: Optional[SynthConfig] = None) -> tuple[list[Sample], list[Sample]]:
    return generate_synthetic(config, "train"), generate_synthetic(config, "test")


# I/O ------------------------------------------------------------------------------


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_dataset(samples: Iterable[Sample], directory, image_format: str = "png") -> Path:
    """Write ``images/``, ``masks/<id>_segmentation.png`` and ``labels.csv``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        Image.fromarray(_to_uint8(s.image), mode="RGB").save(root / "images" / f"{s.id}.{image_format}")
        Image.fromarray(mask_to_uint8(s.mask), mode="L").save(root / "masks" / f"{s.id}{MASK_SUFFIX}.png")
        rows.append((s.id, s.label))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "melanoma"])
        writer.writerows(rows)
    return root


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return mask_from_uint8(np.asarray(im.convert("L")))


def _read_labels(root: Path) -> dict[str, int]:
    labels: dict[str, int] = {}
    for path in sorted(root.rglob("*.csv")):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"image_id", "melanoma"} <= set(reader.fieldnames):
                continue
            for row in reader:
                labels[row["image_id"].strip()] = int(float(row["melanoma"]))
    return labels


def load_isic(directory, errors: Optional[list] = None) -> list[Sample]:
    """Load images, ``*_segmentation`` masks and the ``image_id,melanoma`` CSV.

    Images missing a mask or a label are skipped and reported (appended to
    ``errors`` when given, and logged).  Unreadable image files raise.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    masks = {p.stem[: -len(MASK_SUFFIX)]: p for p in files if p.stem.lower().endswith(MASK_SUFFIX)}
    images = [p for p in files if not p.stem.lower().endswith(MASK_SUFFIX)]
    labels = _read_labels(root)
    if not images:
        log.warning("no images found under %s", root)
    report = errors if errors is not None else []
    samples = []
    for path in images:
        sid = path.stem
        if sid not in masks:
            report.append(f"{path}: missing mask {sid}{MASK_SUFFIX}.*")
            log.warning(report[-1])
            continue
        if sid not in labels:
            report.append(f"{path}: no label for image_id {sid}")
            log.warning(report[-1])
            continue
        try:
            image = read_image(path)
            mask = read_mask(masks[sid])
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc}") from exc
        samples.append(Sample(image=image, mask=mask, label=labels[sid], id=sid))
    return samples


# preprocessing -------------------------------------------------------------------


def _resize(image: np.ndarray, mask: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    planes = [
        np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in image
    ]
    m = Image.fromarray(mask_to_uint8(mask), mode="L").resize((w, h), Image.NEAREST)
    return np.stack(planes).astype(np.float64), np.asarray(m) >= 128


def preprocess(sample: Sample, max_extent: int = 512, multiple: int = 32) -> Sample:
    """Shrink so the longer side is at most ``max_extent``, then zero-pad to a multiple of 32."""
    h, w = sample.mask.shape
    scale = min(1.0, max_extent / max(h, w))
    image, mask = sample.image, sample.mask
    if scale < 1.0:
        nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        image, mask = _resize(image, mask, nh, nw)
        h, w = nh, nw
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        mask = np.pad(mask, ((0, ph), (0, pw)))
    return Sample(image=image, mask=mask, label=sample.label, id=sample.id, valid_hw=(h, w))


def fit_to_canvas(sample: Sample, size: int) -> Sample:
    """Shrink to fit a ``size`` x ``size`` square, then zero-pad to exactly that square.

    Used to batch real images of mixed aspect ratios; ``valid_hw`` keeps the
    un-padded extent.
    """
    if size % 32:
        raise ValueError(f"canvas size must be divisible by 32, got {size}")
    out = preprocess(sample, max_extent=size)
    h, w = out.mask.shape
    if (h, w) != (size, size):
        out = replace(
            out,
            image=np.pad(out.image, ((0, 0), (0, size - h), (0, size - w))),
            mask=np.pad(out.mask, ((0, size - h), (0, size - w))),
        )
    return out


# augmentation --------------------------------------------------------------------


def geometry_source_coords(
    shape: tuple[int, int], hflip: bool, vflip: bool, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) sampled by each output pixel: flips, then zoom about the center."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    src_y = (yy - cy) / scale + cy
    src_x = (xx - cx) / scale + cx
    if vflip:
        src_y = (h - 1) - src_y
    if hflip:
        src_x = (w - 1) - src_x
    return src_y, src_x


def apply_geometry(sample: Sample, hflip: bool = False, vflip: bool = False, scale: float = 1.0) -> Sample:
    coords = np.stack(geometry_source_coords(sample.mask.shape, hflip, vflip, scale))
    image = np.stack(
        [ndimage.map_coordinates(c, coords, order=1, mode="constant", cval=0.0) for c in sample.image]
    )
    mask = ndimage.map_coordinates(sample.mask.astype(np.uint8), coords, order=0, mode="constant") > 0
    return replace(sample, image=image, mask=mask)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal/vertical flips (p=0.5 each) and a zoom in [0.8, 1.2]."""
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.8, 1.2))
    return apply_geometry(sample, hflip, vflip, scale)
