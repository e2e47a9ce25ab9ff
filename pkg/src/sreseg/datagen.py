"""Seeded synthetic stand-ins for a tissue-texture classification set and a TMA cohort.

Every texture is white or sparse-impulse noise passed through a radially
symmetric frequency filter, so class identity does not depend on
orientation.  An optional, class-independent ``anisotropy`` stretches all
textures along the image x axis by the same factor; it mimics a shared
acquisition direction (sectioning or scanning) and gives a network that
can see orientation something to latch onto.

All randomness is drawn from numpy's PCG64 generator seeded through
:mod:`sreseg.seeding`.  Images are quantized to 8 bits at generation time,
so the arrays in memory equal what the PPM files hold.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .imaging import IGNORE, write_label_map, write_pnm

BLOB_DENSITY = "blob-density"
SPOT_SIZE = "spot-size"
RING_FREQUENCY = "ring-frequency"
SMOOTH_NOISE = "smooth-noise"
KINDS = (SMOOTH_NOISE, RING_FREQUENCY, BLOB_DENSITY, SPOT_SIZE)

DEFAULT_ANISOTROPY = 2.0
TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class TextureSpec:
    """One texture class.

    ``param_range`` is the uniform range of the kind's main parameter:
    correlation length (smooth-noise), centre frequency in cycles/pixel
    (ring-frequency), impulse density per pixel (blob-density) or blob
    radius in pixels (spot-size).  Pixels blend ``light`` into ``dark`` RGB
    by the normalized texture value.
    """

    class_id: int
    kind: str
    param_range: tuple
    light: tuple
    dark: tuple
    contrast: float = 0.22
    color_jitter: float = 0.02

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        lo, hi = self.param_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad parameter range {self.param_range}")


DEFAULT_SPECS = (
    TextureSpec(0, SMOOTH_NOISE, (5.0, 7.0), light=(0.86, 0.70, 0.80), dark=(0.66, 0.46, 0.62)),
    TextureSpec(1, RING_FREQUENCY, (0.11, 0.14), light=(0.78, 0.60, 0.76), dark=(0.50, 0.34, 0.58)),
    TextureSpec(2, BLOB_DENSITY, (0.012, 0.02), light=(0.76, 0.58, 0.72), dark=(0.30, 0.16, 0.42)),
    TextureSpec(3, SPOT_SIZE, (3.0, 4.0), light=(0.60, 0.40, 0.58), dark=(0.28, 0.14, 0.40)),
)


def _freq_radius(h, w, anisotropy):
    """Filter radius over the FFT grid; anisotropy > 1 elongates textures along x."""
    s = math.sqrt(anisotropy)
    ky = np.fft.fftfreq(h)[:, None] / s
    kx = np.fft.fftfreq(w)[None, :] * s
    return np.sqrt(kx * kx + ky * ky)


def texture_field(spec: TextureSpec, rng, h, w, anisotropy=1.0):
    """Zero-mean, unit-variance texture of shape (h, w)."""
    p = rng.uniform(*spec.param_range)
    kr = _freq_radius(h, w, anisotropy)
    if spec.kind == SMOOTH_NOISE:
        src = rng.standard_normal((h, w))
        H = np.exp(-2.0 * (math.pi * p * kr) ** 2)
    elif spec.kind == RING_FREQUENCY:
        src = rng.standard_normal((h, w))
        H = np.exp(-((kr - p) ** 2) / (2 * 0.015**2))
    elif spec.kind == BLOB_DENSITY:
        src = (rng.random((h, w)) < p).astype(np.float64)
        H = np.exp(-2.0 * (math.pi * 1.6 * kr) ** 2)
    else:  # SPOT_SIZE
        src = (rng.random((h, w)) < 0.006).astype(np.float64)
        H = np.exp(-2.0 * (math.pi * p * kr) ** 2)
    f = np.fft.irfft2(np.fft.rfft2(src) * H[:, : w // 2 + 1], s=(h, w))
    sd = f.std()
    f = f - f.mean()
    return f / sd if sd > 0 else f


def render_texture(spec: TextureSpec, rng, h, w, anisotropy=1.0):
    """Float RGB texture in [0, 1], shape (h, w, 3)."""
    t = np.clip(0.5 + spec.contrast * texture_field(spec, rng, h, w, anisotropy), 0.0, 1.0)
    jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
    light = np.asarray(spec.light) + jitter
    dark = np.asarray(spec.dark) + jitter
    return np.clip(light + t[..., None] * (dark - light), 0.0, 1.0)


def _quantize(img):
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# classification set


@dataclass
class ClassificationSet:
    """uint8 images (n, size, size, 3) and integer labels.

    ``test_context`` holds larger tiles centred on each test image, wide
    enough that any rotation followed by a centre crop stays inside real
    texture.
    """

    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    test_context: np.ndarray
    seed: int
    specs: tuple = field(default=DEFAULT_SPECS, repr=False)


def context_size(size):
    """Smallest side, of the same parity as ``size``, holding a ``size`` tile at any rotation."""
    c = math.ceil(size * math.sqrt(2.0))
    return c + (c - size) % 2


def center_crop(img, size):
    H, W = img.shape[:2]
    top, left = (H - size) // 2, (W - size) // 2
    return img[top : top + size, left : left + size]


def _balanced_labels(rng, n, classes):
    y = np.arange(n) % classes
    rng.shuffle(y)
    return y


def gen_classification_set(seed, classes=4, n_train=2000, n_test=500, size=64,
                           anisotropy=DEFAULT_ANISOTROPY, specs=DEFAULT_SPECS) -> ClassificationSet:
    """Balanced texture tiles; train and test come from separate seed streams."""
    if classes > len(specs):
        raise ValueError(f"only {len(specs)} texture specs available, asked for {classes}")
    specs = tuple(specs[:classes])
    ctx = context_size(size)

    def draw(stream, n, tile):
        rng = seeding.rng_for(seed, seeding.DATA, 0, stream)
        y = _balanced_labels(rng, n, classes)
        X = np.empty((n, tile, tile, 3), dtype=np.uint8)
        for i in range(n):
            X[i] = _quantize(render_texture(specs[y[i]], rng, tile, tile, anisotropy))
        return X, y

    X_train, y_train = draw(0, n_train, size)
    ctx_X, y_test = draw(1, n_test, ctx)
    X_test = np.ascontiguousarray(np.stack([center_crop(t, size) for t in ctx_X])) if n_test else (
        np.empty((0, size, size, 3), dtype=np.uint8))
    return ClassificationSet(X_train, y_train, X_test, y_test, ctx_X, int(seed), specs)


# ---------------------------------------------------------------------------
# TMA cohort


@dataclass
class SyntheticTma:
    subject_id: str
    image: np.ndarray  # (size, size, 3) uint8
    labels: np.ndarray  # (size, size) uint8, IGNORE outside the disc
    n_regions: int
    seed: int
    split: str = TEST


def _region_map(rng, size, n_regions):
    """Partition the inscribed disc into angular sectors, or a core plus sectors of a rim."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    theta = np.mod(np.arctan2(yy - c, xx - c), 2 * np.pi)
    radius = 0.46 * size
    disc = r <= radius
    region = np.full((size, size), -1, dtype=np.int64)
    start = rng.uniform(0, 2 * np.pi)
    radial = n_regions >= 2 and rng.random() < 0.5
    n_sectors = n_regions - 1 if radial else n_regions
    # sector cuts with every sector spanning at least 60 degrees
    spans = rng.dirichlet(np.full(n_sectors, 4.0)) * (2 * np.pi - n_sectors * np.pi / 3) + np.pi / 3
    cuts = start + np.concatenate([[0.0], np.cumsum(spans)[:-1]])
    sector = np.zeros((size, size), dtype=np.int64)
    rel = np.mod(theta - start, 2 * np.pi)
    for i, cut in enumerate(cuts[1:], start=1):
        sector[rel >= np.mod(cut - start, 2 * np.pi)] = i
    if radial:
        core = r <= rng.uniform(0.35, 0.55) * radius
        region[disc] = 1 + sector[disc] if n_sectors > 1 else 1
        region[disc & core] = 0
    else:
        region[disc] = sector[disc]
    return region, disc


def gen_tma_subject(seed, index, size=512, anisotropy=DEFAULT_ANISOTROPY, specs=DEFAULT_SPECS,
                    split=TEST) -> SyntheticTma:
    rng = seeding.rng_for(seed, seeding.DATA, 1, index)
    n_regions = int(rng.integers(2, min(4, len(specs)) + 1))
    region, disc = _region_map(rng, size, n_regions)
    classes = rng.choice(len(specs), size=n_regions, replace=False)
    img = np.ones((size, size, 3))
    labels = np.full((size, size), IGNORE, dtype=np.uint8)
    for reg, cls in enumerate(classes):
        sel = region == reg
        tex = render_texture(specs[cls], rng, size, size, anisotropy)
        img[sel] = tex[sel]
        labels[sel] = cls
    return SyntheticTma(f"subject_{index:03d}", _quantize(img), labels, n_regions, int(seed), split)


def gen_tma_cohort(seed, n_subjects=20, size=512, anisotropy=DEFAULT_ANISOTROPY,
                   specs=DEFAULT_SPECS) -> list:
    """Subjects ``0 .. n_subjects-1``; the first half is the train split, the rest test."""
    n_train = n_subjects // 2
    return [gen_tma_subject(seed, i, size, anisotropy, specs, TRAIN if i < n_train else TEST)
            for i in range(n_subjects)]


def write_cohort(directory, cohort, manifest_name="manifest.tsv"):
    """Write PPM images, PGM ground truth and a tab-separated manifest; returns its path."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "gt"), exist_ok=True)
    lines = []
    for s in cohort:
        img_rel = os.path.join("images", f"{s.subject_id}.ppm")
        gt_rel = os.path.join("gt", f"{s.subject_id}.pgm")
        write_pnm(os.path.join(directory, img_rel), s.image)
        write_label_map(os.path.join(directory, gt_rel), s.labels)
        lines.append(f"{s.subject_id}\t{img_rel}\t{gt_rel}\t{s.split}")
    path = os.path.join(directory, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
