"""Synthetic shapes tiles, dataset directories and random splitters.

A dataset directory holds three TensorFile blobs plus a JSON manifest::

    images.dltn   float32 (N, 1, T, T) in [0, 1]
    labels.dltn   int32   (N, T, T)    0 = background, 1 + class index = shape
    classes.dltn  int32   (N,)         shape class per tile
    manifest.json counts, class names, seed, generation parameters
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensorfile import load_tensor, save_tensor

SHAPES = ("circle", "triangle", "rectangle", "annulus")
SIZE_RANGE = (0.2, 0.8)
ANNULUS_INNER = (0.3, 0.7)
RECT_ASPECT = (0.5, 1.0)


@dataclass
class ShapesSample:
    image: np.ndarray
    class_label: int
    seg_map: np.ndarray
    provenance: dict

    @property
    def class_name(self):
        return SHAPES[self.class_label]


def _tile_rng(seed, index):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def rasterize(kind, tile, center, size, rotation_deg, inner_frac=0.5, aspect=1.0):
    """Boolean mask of pixels whose centres fall inside the shape.

    ``size`` is the diameter of the circumscribing circle for every kind,
    which keeps rotated shapes inside the tile whenever the circle is.
    """
    yy, xx = np.mgrid[0:tile, 0:tile] + 0.5
    dy, dx = yy - center[0], xx - center[1]
    r = size / 2.0
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "annulus":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (inner_frac * r) ** 2)
    th = math.radians(rotation_deg)
    u = math.cos(th) * dx + math.sin(th) * dy
    v = -math.sin(th) * dx + math.cos(th) * dy
    if kind == "rectangle":
        # half-diagonal r, side ratio aspect
        half_w = r / math.sqrt(1 + aspect * aspect)
        half_h = half_w * aspect
        return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = math.radians(90 + 120 * k)
            # edge normal points at vertex direction + 180 deg; inradius r/2
            nx, ny = -math.cos(a), -math.sin(a)
            inside &= (u * nx + v * ny) <= r / 2.0
        return inside
    raise ConfigError(f"unknown shape {kind!r}")


def make_tile(seed, index, tile=64, noise_sigma=0.0):
    """Generate tile ``index`` of the stream identified by ``seed``."""
    if tile < 16:
        raise ConfigError(f"tile must be >= 16 pixels, got {tile}")
    rng = _tile_rng(seed, index)
    cls = int(rng.integers(len(SHAPES)))
    size = float(rng.uniform(*SIZE_RANGE)) * tile
    rot = float(rng.uniform(0.0, 360.0))
    r = size / 2.0
    center = (float(rng.uniform(r, tile - r)), float(rng.uniform(r, tile - r)))
    inner = float(rng.uniform(*ANNULUS_INNER))
    aspect = float(rng.uniform(*RECT_ASPECT))
    mask = rasterize(SHAPES[cls], tile, center, size, rot, inner, aspect)
    img = mask.astype(np.float64)
    if noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, noise_sigma, size=img.shape), 0.0, 1.0)
    seg = np.where(mask, cls + 1, 0).astype(np.int32)
    prov = {"seed": int(seed), "index": int(index), "size": size, "rotation_deg": rot,
            "center": list(center), "inner_frac": inner, "aspect": aspect}
    return ShapesSample(img[None].astype(np.float32), cls, seg, prov)


def gen_shapes(n, tile=64, noise_sigma=0.0, seed=0):
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    return [make_tile(seed, i, tile, noise_sigma) for i in range(n)]


# -- splitters ---------------------------------------------------------------------

def _check_fractions(fractions):
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0):
        raise ConfigError(f"split fractions must be non-negative, got {list(fractions)}")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fr.sum()}")
    return fr


def split_sizes(n, fractions):
    """Largest-remainder apportionment of ``n`` items; ties go to the lower index."""
    fr = _check_fractions(fractions)
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    order = sorted(range(len(fr)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return [int(s) for s in sizes]


def split_images(n_items, fractions, seed=0):
    """Random disjoint index lists, one per fraction."""
    sizes = split_sizes(n_items, fractions)
    perm = np.random.default_rng(seed).permutation(n_items)
    out, at = [], 0
    for s in sizes:
        out.append(np.sort(perm[at:at + s]))
        at += s
    return out


@dataclass
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray | None = None

    def as_list(self):
        return [m for m in (self.train, self.val, self.test) if m is not None]


def split_pixels(labels, fractions, seed=0, stratified=True):
    """Assign every labeled pixel to exactly one of the train/val(/test) masks.

    With ``stratified`` each class is apportioned separately so per-class
    fractions hold up to rounding. Unlabeled (``-1``) pixels land nowhere.
    """
    labels = np.asarray(labels)
    fr = _check_fractions(fractions)
    if len(fr) not in (2, 3):
        raise ConfigError("pixel splits take 2 or 3 fractions")
    flat = labels.ravel()
    labeled = np.flatnonzero(flat >= 0)
    if labeled.size == 0:
        raise ConfigError("label map has no labeled pixels to split")
    rng = np.random.default_rng(seed)
    assign = np.full(flat.size, -1, dtype=np.int64)
    groups = [labeled[flat[labeled] == c] for c in np.unique(flat[labeled])] if stratified else [labeled]
    if stratified:
        n_classes = int(flat[labeled].max()) + 1
        present = set(np.unique(flat[labeled]).tolist())
        missing = [c for c in range(n_classes) if c not in present]
        if missing:
            raise ConfigError(f"stratified pixel split: classes {missing} have no labeled pixels")
    for idx in groups:
        perm = idx[rng.permutation(idx.size)]
        at = 0
        for k, s in enumerate(split_sizes(idx.size, fr)):
            assign[perm[at:at + s]] = k
            at += s
    masks = [(assign == k).reshape(labels.shape) for k in range(len(fr))]
    return SplitMasks(masks[0], masks[1], masks[2] if len(fr) == 3 else None)


# -- dataset directories --------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    classes: np.ndarray | None = None
    manifest: dict | None = None

    def __len__(self):
        return len(self.images)

    def binary_labels(self):
        return np.where(self.labels < 0, -1, (self.labels > 0).astype(np.int32)).astype(np.int32)


def samples_to_dataset(samples, manifest=None):
    return Dataset(
        np.stack([s.image for s in samples]).astype(np.float32),
        np.stack([s.seg_map for s in samples]).astype(np.int32),
        np.array([s.class_label for s in samples], dtype=np.int32),
        manifest,
    )


def save_dataset(path, ds: Dataset):
    os.makedirs(path, exist_ok=True)
    save_tensor(os.path.join(path, "images.dltn"), ds.images.astype(np.float32))
    if ds.labels is not None:
        save_tensor(os.path.join(path, "labels.dltn"), ds.labels.astype(np.int32))
    if ds.classes is not None:
        save_tensor(os.path.join(path, "classes.dltn"), ds.classes.astype(np.int32))
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ds.manifest or {}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(path):
    def opt(name):
        p = os.path.join(path, name)
        return load_tensor(p) if os.path.exists(p) else None

    images = load_tensor(os.path.join(path, "images.dltn"))
    manifest = None
    mp = os.path.join(path, "manifest.json")
    if os.path.exists(mp):
        with open(mp, encoding="utf-8") as fh:
            manifest = json.load(fh)
    return Dataset(images.astype(np.float32), opt("labels.dltn"), opt("classes.dltn"), manifest)


def make_shapes_dataset(n, tile=64, noise_sigma=0.0, seed=0):
    samples = gen_shapes(n, tile, noise_sigma, seed)
    counts = np.bincount([s.class_label for s in samples], minlength=len(SHAPES))
    manifest = {
        "kind": "shapes",
        "count": n,
        "tile": tile,
        "noise_sigma": noise_sigma,
        "seed": int(seed),
        "class_names": ["background", *SHAPES],
        "class_counts": {name: int(c) for name, c in zip(SHAPES, counts)},
    }
    return samples_to_dataset(samples, manifest)
