"""Dataset layout, PNG ingestion, preprocessing, tiling and synthetic pairs.

On disk a dataset is a directory with ``A/`` (T1 images), ``B/`` (T2
images), ``label/`` (binary change maps, 0/255), and optionally
``labelA/``, ``labelB/`` (semantic class-index maps), with file stems
matched across subdirectories.  Images are 8-bit PNG scaled to [0,1] on
load; labels binarize any nonzero value to 1.

The synthetic generator draws seeded rectangles and ellipses of altered
color and texture onto an otherwise shared scene; the change label is the
exact altered-region mask, which makes near-perfect training fits
achievable by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import ShapeError, bilinear_resize_array
from .train import LabeledPair


@dataclass
class DatasetLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def dir_t1(self) -> Path:
        return self.root / "A"

    @property
    def dir_t2(self) -> Path:
        return self.root / "B"

    @property
    def dir_label(self) -> Path:
        return self.root / "label"

    def semantic_dir(self, t: int) -> Path:
        return self.root / ("labelA" if t == 1 else "labelB")

    def stems(self) -> list[str]:
        if not self.dir_t1.is_dir():
            raise FileNotFoundError(f"dataset has no A/ directory under {self.root}")
        stems = sorted(p.stem for p in self.dir_t1.glob("*.png"))
        for stem in stems:
            if not (self.dir_t2 / f"{stem}.png").exists():
                raise FileNotFoundError(
                    f"stem {stem!r}: {self.dir_t2 / (stem + '.png')} is missing")
        return stems


# -- PNG round trips ---------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """[3,H,W] floats in [0,1] to 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    """Binary [H,W] (or [1,H,W]) map to a 0/255 single-channel PNG."""
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray((arr > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr != 0).astype(np.float64)


def save_semantic(path, classes: np.ndarray) -> None:
    arr = np.asarray(classes)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("semantic indices must fit 8-bit PNG (0..255)")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_semantic(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int64)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode semantic map {path}: {exc}") from exc


def load_pair(stem: str, layout: DatasetLayout) -> LabeledPair:
    """One matched A/B/label trio; errors carry the stem and path."""
    img1 = load_image(layout.dir_t1 / f"{stem}.png")
    path_b = layout.dir_t2 / f"{stem}.png"
    if not path_b.exists():
        raise FileNotFoundError(f"stem {stem!r}: missing T2 image {path_b}")
    img2 = load_image(path_b)
    label = load_mask(layout.dir_label / f"{stem}.png")
    if img1.shape != img2.shape or label.shape != img1.shape[1:]:
        raise ShapeError(
            f"stem {stem!r}: shapes differ across A/B/label "
            f"({img1.shape} / {img2.shape} / {label.shape})")
    return LabeledPair(img1, img2, label)


# -- preprocessing -----------------------------------------------------------

def resize_to_patch_multiple(image: np.ndarray, patch: int) -> np.ndarray:
    """Bilinear resize down to the nearest patch multiple (512 -> 504 at 14)."""
    _, h, w = image.shape
    if h < patch or w < patch:
        raise ShapeError(f"image {h}x{w} smaller than one patch ({patch})")
    th, tw = (h // patch) * patch, (w // patch) * patch
    if (th, tw) == (h, w):
        return image
    return bilinear_resize_array(image, th, tw)


def tile_offsets(dim: int, window: int, stride: int) -> list[int]:
    """Offsets 0, stride, ... with a final offset clamped to dim - window."""
    offs = []
    x = 0
    while x + window < dim:
        offs.append(x)
        x += stride
    last = dim - window
    if not offs or offs[-1] != last:
        offs.append(last)
    return offs


def tile(image: np.ndarray, window: int, stride: int):
    """Row-major full-coverage tiles plus their (y, x) placements."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, h, w = image.shape
    if window > min(h, w):
        raise ShapeError(f"window {window} larger than image {h}x{w}")
    placements = [(y, x) for y in tile_offsets(h, window, stride)
                  for x in tile_offsets(w, window, stride)]
    tiles = [image[:, y:y + window, x:x + window].copy() for y, x in placements]
    return tiles, placements


def stitch(tiles, placements, out_shape) -> np.ndarray:
    """Overwrite-in-order reassembly of tiles onto the full grid."""
    out = np.zeros(out_shape)
    for piece, (y, x) in zip(tiles, placements):
        win_h, win_w = piece.shape[-2], piece.shape[-1]
        out[..., y:y + win_h, x:x + win_w] = piece
    return out


# -- synthetic data ----------------------------------------------------------

def synth_pair(rng: np.random.Generator, size: int,
               num_shapes: int | None = None):
    """One bi-temporal pair differing by altered rectangles/ellipses.

    Returns (img1, img2, label) where the label is exactly the union of the
    altered shapes (the generator's own mask, usable as an oracle).  With
    zero shapes the images are identical and the label all zero.
    """
    base = np.empty((3, size, size))
    for c in range(3):
        base[c] = rng.uniform(0.15, 0.85)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for c in range(3):
        base[c] += 0.15 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
    base += rng.normal(0.0, 0.02, base.shape)
    base = np.clip(base, 0.0, 1.0)

    img2 = base.copy()
    label = np.zeros((size, size))
    if num_shapes is None:
        num_shapes = int(rng.integers(1, 4))
    for _ in range(num_shapes):
        sh = int(rng.integers(max(32, size // 3), max(48, (2 * size) // 3)))
        sw = int(rng.integers(max(32, size // 3), max(48, (2 * size) // 3)))
        y0 = int(rng.integers(0, size - sh + 1))
        x0 = int(rng.integers(0, size - sw + 1))
        if rng.uniform() < 0.5:
            mask = np.zeros((size, size), dtype=bool)
            mask[y0:y0 + sh, x0:x0 + sw] = True
        else:
            cy, cx = y0 + sh / 2.0, x0 + sw / 2.0
            gy, gx = np.mgrid[0:size, 0:size]
            mask = (((gy - cy) / (sh / 2.0)) ** 2
                    + ((gx - cx) / (sw / 2.0)) ** 2) <= 1.0
        color = rng.uniform(0.0, 1.0, 3)
        texture = rng.normal(0.0, 0.03, (3, size, size))
        for c in range(3):
            img2[c][mask] = np.clip(color[c] + texture[c][mask], 0.0, 1.0)
        label[mask] = 1.0

    # quantize both to the 8-bit values that PNG storage will produce
    img1 = np.round(base * 255.0) / 255.0
    img2 = np.round(img2 * 255.0) / 255.0
    return img1, img2, label


def synth_dataset(n: int, size: int, seed: int, out_dir,
                  patch: int = 14, window: int = 3) -> DatasetLayout:
    """Write a seeded synthetic dataset in the standard layout.

    `size` must be a patch multiple whose token grid is even and whose
    pyramid levels divide the attention window.
    """
    if size % patch:
        raise ShapeError(f"size {size} is not a multiple of the patch size {patch}")
    grid = size // patch
    if grid % 2:
        raise ShapeError(f"token grid {grid} must be even")
    for scale in (4 * grid, 2 * grid, grid, grid // 2):
        if scale % window:
            raise ShapeError(
                f"pyramid size {scale} not divisible by window {window}")

    root = Path(out_dir)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n):
        img1, img2, label = synth_pair(rng, size)
        stem = f"pair{i:03d}"
        save_image(root / "A" / f"{stem}.png", img1)
        save_image(root / "B" / f"{stem}.png", img2)
        save_mask(root / "label" / f"{stem}.png", label)
        stems.append(stem)

    manifest = {"kind": "synthetic", "n": n, "size": size, "seed": seed,
                "stems": stems, "hashes": {}}
    for sub in ("A", "B", "label"):
        for stem in stems:
            path = root / sub / f"{stem}.png"
            manifest["hashes"][f"{sub}/{stem}.png"] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return DatasetLayout(root)


__all__ = [
    "DatasetLayout", "save_image", "load_image", "save_mask", "load_mask",
    "save_semantic", "load_semantic", "load_pair",
    "resize_to_patch_multiple", "tile_offsets", "tile", "stitch",
    "synth_pair", "synth_dataset",
]
