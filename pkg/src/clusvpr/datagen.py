"""Deterministic synthetic geo-tagged world.

Each place is a procedural texture (multi-scale colour noise plus random
rectangles, discs and stripes) on a planar grid of place centres. Variants
of a place are shifted crops with an illumination gain, solid occluding
rectangles and pixel noise; the crop shift also moves the geotag by at most
``jitter`` metres.

Images are binary PPM (``P6``): an ASCII header ``P6\\n<width> <height>\\n255\\n``
followed by ``height x width x 3`` bytes, row-major RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

from .config import WorldSpec
from .retrieval import ManifestRow, write_manifest

SPLITS = ("gallery", "train_queries", "val_queries")


def place_centers(spec: WorldSpec) -> np.ndarray:
    cols = math.ceil(math.sqrt(spec.places))
    idx = np.arange(spec.places)
    return np.stack([(idx % cols) * spec.spacing, (idx // cols) * spec.spacing], axis=1).astype(np.float64)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def place_texture(spec: WorldSpec, place: int) -> np.ndarray:
    """Float RGB canvas in [0, 1], ``max_shift`` pixels larger than the image on every side."""
    rng = _rng(spec.seed, place, 1_000_003)
    size = spec.image_size + 2 * spec.max_shift
    canvas = np.zeros((size, size, 3))
    for cells, amp in ((4, 0.5), (8, 0.3), (16, 0.2)):
        coarse = rng.random((cells, cells, 3))
        canvas += amp * zoom(coarse, (size / cells, size / cells, 1), order=1)[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        kind = int(rng.integers(0, 3))
        colour = rng.random(3)
        if kind == 0:
            h, w = rng.integers(size // 8, size // 3, size=2)
            r0, c0 = rng.integers(0, size - h), rng.integers(0, size - w)
            canvas[r0 : r0 + h, c0 : c0 + w] = colour
        elif kind == 1:
            r = rng.uniform(size / 12, size / 5)
            cy, cx = rng.uniform(0, size, size=2)
            canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = colour
        else:
            period = rng.uniform(size / 10, size / 4)
            angle = rng.uniform(0, np.pi)
            phase = np.cos(angle) * xx + np.sin(angle) * yy
            band = np.mod(phase, period) < period / 3
            mask = band & (np.abs(yy - size / 2) < size * rng.uniform(0.2, 0.5))
            canvas[mask] = 0.5 * canvas[mask] + 0.5 * colour
    return np.clip(canvas, 0.0, 1.0)


@dataclass(frozen=True)
class Variant:
    place: int
    index: int
    image: np.ndarray  # uint8 H x W x 3
    position: tuple[float, float]


def render_variant(spec: WorldSpec, place: int, variant: int, texture: np.ndarray | None = None) -> Variant:
    rng = _rng(spec.seed, place, variant)
    tex = place_texture(spec, place) if texture is None else texture
    s, ms = spec.image_size, spec.max_shift
    dy, dx = (int(v) for v in rng.integers(-ms, ms + 1, size=2))
    img = tex[ms + dy : ms + dy + s, ms + dx : ms + dx + s].copy()
    gain = rng.uniform(*spec.gain_range)
    tint = rng.uniform(0.9, 1.1, size=3)
    img = img * gain * tint
    side_cap = math.sqrt(spec.max_occlusion_frac / max(spec.max_occlusions, 1)) * s
    for _ in range(int(rng.integers(0, spec.max_occlusions + 1))):
        h, w = (int(v) for v in rng.integers(max(1, s // 8), max(2, int(side_cap)) + 1, size=2))
        r0, c0 = int(rng.integers(0, s - h + 1)), int(rng.integers(0, s - w + 1))
        img[r0 : r0 + h, c0 : c0 + w] = rng.random(3)
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    # the crop shift moves the camera: geotag offset proportional to it, norm <= jitter
    scale = spec.jitter / (math.sqrt(2) * ms) if ms else 0.0
    center = place_centers(spec)[place]
    pos = (float(center[0] + dx * scale), float(center[1] + dy * scale))
    return Variant(place, variant, img, pos)


def split_of(spec: WorldSpec, variant: int) -> str:
    n_gallery = max(1, int(round(spec.gallery_frac * spec.variants)))
    n_train = int(round(spec.train_query_frac * spec.variants))
    if variant < n_gallery:
        return "gallery"
    if variant < n_gallery + n_train:
        return "train_queries"
    return "val_queries"


def image_id(place: int, variant: int) -> str:
    return f"p{place:03d}_v{variant:02d}"


def write_ppm(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def synth_world(spec: WorldSpec, out_dir) -> dict[str, list[ManifestRow]]:
    """Write images and manifests (``manifest.csv`` plus one per split) under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = {name: [] for name in SPLITS}
    everything = []
    for place in range(spec.places):
        tex = place_texture(spec, place)
        for v in range(spec.variants):
            var = render_variant(spec, place, v, tex)
            rid = image_id(place, v)
            rel = f"images/{rid}.ppm"
            write_ppm(out / rel, var.image)
            row = ManifestRow(rid, rel, var.position[0], var.position[1], "planar")
            rows[split_of(spec, v)].append(row)
            everything.append(row)
    write_manifest(everything, out / "manifest.csv")
    for name in SPLITS:
        write_manifest(rows[name], out / f"{name}.csv")
    rows["all"] = everything
    return rows


def generate_arrays(spec: WorldSpec) -> dict[str, tuple[list[ManifestRow], np.ndarray]]:
    """In-memory equivalent of :func:`synth_world`: per split, rows and a uint8 image stack."""
    rows = {name: [] for name in SPLITS}
    images = {name: [] for name in SPLITS}
    for place in range(spec.places):
        tex = place_texture(spec, place)
        for v in range(spec.variants):
            var = render_variant(spec, place, v, tex)
            rid = image_id(place, v)
            split = split_of(spec, v)
            rows[split].append(ManifestRow(rid, f"images/{rid}.ppm", var.position[0], var.position[1], "planar"))
            images[split].append(var.image)
    s = spec.image_size
    return {
        name: (rows[name], np.stack(images[name]) if images[name] else np.zeros((0, s, s, 3), np.uint8))
        for name in SPLITS
    }


def load_images(rows, root) -> tuple[np.ndarray, list[str]]:
    """Read the images of manifest rows; returns the stack and the ids that failed."""
    root = Path(root)
    imgs, bad = [], []
    for r in rows:
        try:
            imgs.append(read_ppm(root / r.path))
        except (OSError, ValueError):
            bad.append(r.id)
    if not imgs:
        return np.zeros((0, 0, 0, 3), np.uint8), bad
    return np.stack(imgs), bad
