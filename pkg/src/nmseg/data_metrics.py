"""Synthetic segmentation data, PGM/PPM I/O, augmentation, loss and metrics."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor_ops import Tensor, log


@dataclass(frozen=True)
class Shape2D:
    kind: str  # "ellipse" or "rect"
    cy: float
    cx: float
    ry: float  # half extent along rows
    rx: float

    def contains(self, row: float, col: float) -> bool:
        dy, dx = (row - self.cy) / self.ry, (col - self.cx) / self.rx
        if self.kind == "rect":
            return abs(dy) <= 1.0 and abs(dx) <= 1.0
        return dy * dy + dx * dx <= 1.0


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    shapes: tuple = ()

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ShapeError(f"expected image (C,H,W) and mask (1,H,W); got {self.image.shape}, {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ShapeError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 200
    size: int = 64
    channels: int = 3
    shapes_per_image: tuple = (1, 3)
    noise: float = 0.1
    fg_intensity: tuple = (0.55, 1.0)
    bg_intensity: tuple = (0.0, 0.35)
    extent: tuple = (0.12, 0.3)  # half-size as a fraction of the image side
    kinds: tuple = ("ellipse", "rect")


def rasterize(shapes: Sequence[Shape2D], size: int) -> np.ndarray:
    """Union of ``shapes`` sampled at pixel centres; (size, size) uint8."""
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((size, size), dtype=bool)
    for s in shapes:
        dy, dx = (rows - s.cy) / s.ry, (cols - s.cx) / s.rx
        if s.kind == "rect":
            out |= (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
        else:
            out |= dy * dy + dx * dx <= 1.0
    return out.astype(np.uint8)


def _sample(rng: np.random.Generator, spec: SynthSpec) -> Sample:
    n = spec.size
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(count):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        ry, rx = rng.uniform(*spec.extent, size=2) * n
        cy, cx = rng.uniform(0, n, size=2)
        shapes.append(Shape2D(kind, float(cy), float(cx), float(ry), float(rx)))
    mask = rasterize(shapes, n)
    bg = rng.uniform(*spec.bg_intensity, size=(spec.channels, 1, 1))
    fg = rng.uniform(*spec.fg_intensity, size=(spec.channels, 1, 1))
    image = np.where(mask[None].astype(bool), fg, bg)
    image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape) if spec.noise else image
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask[None].astype(np.float32), tuple(shapes))


def generate_synthetic(spec: SynthSpec) -> list[Sample]:
    """Random ellipses/rectangles over a flat background plus uniform noise."""
    rng = np.random.default_rng(spec.seed)
    return [_sample(rng, spec) for _ in range(spec.count)]


def corpus_digest(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(np.ascontiguousarray(s.mask).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# augmentation


def augment(s: Sample, seed, hflip: Optional[bool] = None, vflip: Optional[bool] = None, rot: Optional[int] = None) -> Sample:
    """Random H/V flips (p = 0.5 each) and a rotation by a multiple of 90
    degrees counter-clockwise.  Any of the three draws can be forced."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draw_h, draw_v, draw_r = rng.random() < 0.5, rng.random() < 0.5, int(rng.integers(4))
    hflip = draw_h if hflip is None else hflip
    vflip = draw_v if vflip is None else vflip
    rot = draw_r if rot is None else rot % 4
    return Sample(_transform(s.image, hflip, vflip, rot), _transform(s.mask, hflip, vflip, rot), s.shapes)


def _transform(a: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    if hflip:
        a = a[..., ::-1]
    if vflip:
        a = a[..., ::-1, :]
    if rot:
        a = np.rot90(a, rot, axes=(-2, -1))
    return np.ascontiguousarray(a)


# ---------------------------------------------------------------------------
# loss and metrics


def bce_dice_loss(pred, target, smooth: float = 1.0):
    """``0.5 * BCE + 0.5 * (1 - soft Dice)`` over every element.

    ``pred`` may be a :class:`Tensor` (result is a differentiable scalar
    Tensor) or an array (result is a float).
    """
    as_float = not isinstance(pred, Tensor)
    p = Tensor(np.asarray(pred, dtype=np.float64)) if as_float else pred
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    bce = -(log(p) * t + log(1.0 - p) * (1.0 - t)).mean()
    inter = (p * t).sum()
    dice = (2.0 * inter + smooth) / (p.sum() + float(t.sum()) + smooth)
    loss = 0.5 * bce + 0.5 * (1.0 - dice)
    return float(loss.data) if as_float else loss


def _binary_pair(pred, target):
    p, g = np.asarray(pred).astype(bool), np.asarray(target).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ")
    return p, g


def _iou(p, g) -> float:
    union = np.count_nonzero(p | g)
    return 1.0 if union == 0 else np.count_nonzero(p & g) / union


def miou(pred_mask, target) -> float:
    """Mean of foreground and background IoU; an empty class scores 1."""
    p, g = _binary_pair(pred_mask, target)
    return 0.5 * (_iou(p, g) + _iou(~p, ~g))


def dsc(pred_mask, target) -> float:
    p, g = _binary_pair(pred_mask, target)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    return 1.0 if total == 0 else 2.0 * np.count_nonzero(p & g) / total


def threshold(prob, level: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= level).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, img: np.ndarray) -> None:
    """Write (H, W) as binary PGM or (3, H, W)/(H, W, 3) as binary PPM, maxval 255."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] in (1, 3) and a.shape[-1] not in (1, 3):
        a = np.moveaxis(a, 0, -1)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[-1] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot store array of shape {np.shape(img)} as PGM/PPM")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary PGM/PPM; returns uint8 (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary P5/P6 supported")
    ch = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return raster.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def save_dataset(samples: Sequence[Sample], root, threads: int = 1) -> list[Path]:
    """Write ``images/NNNN.pgm|ppm`` and ``masks/NNNN.pgm`` under ``root``.

    File names depend only on the sample index, so writing with several
    threads produces the same tree as writing serially.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    def write(item):
        i, s = item
        ext = "ppm" if s.image.shape[0] == 3 else "pgm"
        img_path = root / "images" / f"{i:04d}.{ext}"
        mask_path = root / "masks" / f"{i:04d}.pgm"
        write_pnm(img_path, s.image[0] if s.image.shape[0] == 1 else s.image)
        write_pnm(mask_path, (s.mask[0] > 0).astype(np.uint8) * 255)
        return [img_path, mask_path]

    items = list(enumerate(samples))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            written = list(pool.map(write, items))
    else:
        written = [write(it) for it in items]
    return [p for pair in written for p in pair]


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    samples = []
    for img_path in sorted((root / "images").iterdir()):
        img = read_pnm(img_path).astype(np.float32) / 255.0
        img = img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)
        mask = (read_pnm(root / "masks" / f"{img_path.stem}.pgm") > 127).astype(np.float32)[None]
        samples.append(Sample(np.ascontiguousarray(img), mask))
    return samples


def stack_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
