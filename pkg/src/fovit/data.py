"""Datasets: class-per-folder image corpora and a synthetic off-center glyph task.

Synthetic images are a grid of 8x8-pixel blocks.  Each class owns a 2x2-block
glyph whose four quadrant textures sum to zero, so any pooling region that
covers the whole glyph averages the class identity away; only a
high-resolution look tells classes apart.  Glyph blocks also carry a color
marker whose hue drifts with the class plus per-image jitter.  Hue survives
pooling, so the periphery can locate the glyph and narrow the label down to
a few neighbours, but telling those apart needs a fixation.  The background
is filled with distractor blocks drawn from the same texture family but
without the marker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".ppm", ".tif", ".tiff"}


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    n_train: int = 5000
    n_val: int = 1000
    canvas: int = 112
    block: int = 8
    glyph_blocks: int = 2
    margin_blocks: int = 1
    center_exclusion: int = 2  # half-width in blocks of the central zone the glyph avoids
    texture_amplitude: float = 0.12
    marker: float = 0.2  # chroma amplitude
    hue_jitter: float = 1.5  # in units of the hue spacing between classes
    distractor_density: float = 0.4
    pixel_noise: float = 0.03
    seed: int = 0


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | folder
    root: str | None = None
    image_side: int = 112
    first_k_classes: int | None = None
    val_fraction: float = 0.2
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class Dataset:
    train_images: np.ndarray  # (N, H, W, 3) uint8
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    class_names: list[str]
    glyph_positions: dict[str, np.ndarray] | None = None  # top-left glyph block (x, y)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def glyph_textures(spec: SyntheticSpec) -> np.ndarray:
    """``(n_classes, 4, block, block)`` quadrant textures; quadrants sum to zero per class."""
    rng = np.random.default_rng([spec.seed, 1])
    z = rng.choice([-1.0, 1.0], size=(spec.n_classes, spec.glyph_blocks**2, spec.block, spec.block))
    return spec.texture_amplitude * (z - z.mean(axis=1, keepdims=True))


# two unit chroma axes orthogonal to gray (1, 1, 1)
_CHROMA_U = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
_CHROMA_V = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)


def marker_color(hue: float) -> np.ndarray:
    """Unit-chroma RGB offset at angle ``hue``; adds nothing to brightness."""
    return np.cos(hue) * _CHROMA_U + np.sin(hue) * _CHROMA_V


def _glyph_sites(spec: SyntheticSpec) -> np.ndarray:
    grid = spec.canvas // spec.block
    g = spec.glyph_blocks
    lo, hi = spec.margin_blocks, grid - spec.margin_blocks - g
    mid = grid / 2
    sites = []
    for y in range(lo, hi + 1):
        for x in range(lo, hi + 1):
            # reject glyphs that overlap the central zone
            overlap_x = x < mid + spec.center_exclusion and x + g > mid - spec.center_exclusion
            overlap_y = y < mid + spec.center_exclusion and y + g > mid - spec.center_exclusion
            if not (overlap_x and overlap_y):
                sites.append((x, y))
    return np.array(sites, dtype=np.int64)


def render_synthetic(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator):
    grid = spec.canvas // spec.block
    bs, g = spec.block, spec.glyph_blocks
    tex = glyph_textures(spec)
    flat_tex = tex.reshape(-1, bs, bs)
    sites = _glyph_sites(spec)
    n = len(labels)
    images = np.empty((n, spec.canvas, spec.canvas, 3), dtype=np.uint8)
    positions = np.empty((n, 2), dtype=np.int64)
    for i, label in enumerate(labels):
        lum = np.zeros((grid, grid, bs, bs))
        distract = rng.random((grid, grid)) < spec.distractor_density
        picks = rng.integers(0, len(flat_tex), size=(grid, grid))
        lum[distract] = flat_tex[picks[distract]]
        x0, y0 = sites[rng.integers(0, len(sites))]
        positions[i] = (x0, y0)
        marked = np.zeros((grid, grid))
        for q in range(g * g):
            qy, qx = divmod(q, g)
            lum[y0 + qy, x0 + qx] = tex[label, q]
            marked[y0 + qy, x0 + qx] = 1.0
        lum = lum.transpose(0, 2, 1, 3).reshape(spec.canvas, spec.canvas)
        marked = np.repeat(np.repeat(marked, bs, axis=0), bs, axis=1)
        hue = 2 * np.pi * (label + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) / spec.n_classes
        img = 0.5 + lum[..., None] + rng.normal(0.0, spec.pixel_noise, size=(spec.canvas, spec.canvas, 3))
        img += marked[..., None] * spec.marker * marker_color(hue)
        images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return images, positions


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced train/validation splits drawn from disjoint seeded streams."""

    def split(count: int, stream: int):
        rng = np.random.default_rng([spec.seed, stream])
        labels = np.arange(count) % spec.n_classes
        labels = labels[rng.permutation(count)]
        images, pos = render_synthetic(spec, labels, rng)
        return images, labels.astype(np.int64), pos

    tr_x, tr_y, tr_p = split(spec.n_train, 2)
    va_x, va_y, va_p = split(spec.n_val, 3)
    names = [f"glyph{c}" for c in range(spec.n_classes)]
    return Dataset(tr_x, tr_y, va_x, va_y, names, {"train": tr_p, "val": va_p})


# --- class-folder corpora --------------------------------------------------


def resize_and_crop(img, side: int):
    """Resize the shorter side to ``side`` then center-crop; no-op at the right size."""
    from PIL import Image

    img = img.convert("RGB")
    w, h = img.size
    if (w, h) != (side, side):
        scale = side / min(w, h)
        nw, nh = max(side, round(w * scale)), max(side, round(h * scale))
        img = img.resize((nw, nh), Image.BILINEAR)
        left, top = (nw - side) // 2, (nh - side) // 2
        img = img.crop((left, top, left + side, top + side))
    return np.asarray(img, dtype=np.uint8)


def _class_dirs(root: Path, first_k: int | None) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if first_k is not None:
        dirs = dirs[:first_k]
    return dirs


def _read_folder(class_dirs: list[Path], side: int):
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValueError(f"class folder {d} has no images")
        for f in files:
            from PIL import Image, UnidentifiedImageError

            try:
                with Image.open(f) as img:
                    images.append(resize_and_crop(img, side))
            except (UnidentifiedImageError, OSError) as exc:
                raise ValueError(f"cannot read image {f}: {exc}") from exc
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)


def load_folder(spec: DatasetSpec) -> Dataset:
    """``root/<class>/*`` or ``root/{train,val}/<class>/*``; labels follow sorted folder names."""
    root = Path(spec.root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    rng = np.random.default_rng([spec.seed, 11])
    if (root / "train").is_dir() and (root / "val").is_dir():
        dirs = _class_dirs(root / "train", spec.first_k_classes)
        names = [d.name for d in dirs]
        tr_x, tr_y = _read_folder(dirs, spec.image_side)
        va_x, va_y = _read_folder([root / "val" / n for n in names], spec.image_side)
    else:
        dirs = _class_dirs(root, spec.first_k_classes)
        names = [d.name for d in dirs]
        x, y = _read_folder(dirs, spec.image_side)
        perm = rng.permutation(len(y))
        n_val = int(round(spec.val_fraction * len(y)))
        va, tr = perm[:n_val], perm[n_val:]
        tr_x, tr_y, va_x, va_y = x[tr], y[tr], x[va], y[va]
    if not names:
        raise ValueError(f"no class folders under {root}")
    perm = rng.permutation(len(tr_y))
    return Dataset(tr_x[perm], tr_y[perm], va_x, va_y, names)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        return generate_synthetic(spec.synthetic)
    if spec.kind == "folder":
        if spec.root is None:
            raise ValueError("folder datasets need a root")
        return load_folder(spec)
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def iter_pairs(images: np.ndarray, labels: np.ndarray):
    """Stream ``(image, label)`` pairs in stored order."""
    for img, label in zip(images, labels):
        yield img, int(label)


def save_class_map(path, class_names: list[str]) -> None:
    Path(path).write_text(json.dumps({name: i for i, name in enumerate(class_names)}, indent=1) + "\n")
