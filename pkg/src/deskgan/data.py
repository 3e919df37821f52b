"""Synthetic datasets with controllable long-range structure.

Every rule ties together two distant image regions with a per-image color
that varies *within* each class (classes own disjoint hue arcs), so a model
can only match the regions by coordinating distant pixels — the label alone
does not determine them.  Local texture is noise.

corner_color_match — the top-left and bottom-right 4×4 patches share one
    sampled hue.
mirrored_blobs — a disc and its point-mirrored twin share one sampled hue.
ring_pairs — two rings at antipodal positions on a centered circle share
    one sampled hue.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict

import numpy as np

from .ppm import write_image, read_image, to_unit

RULES = ("corner_color_match", "mirrored_blobs", "ring_pairs")
CORNER = 4  # corner patch side for corner_color_match / hue measurement


@dataclass
class SyntheticSpec:
    resolution: int = 16
    num_classes: int = 4
    samples_per_class: int = 500
    long_range_rule: str = "corner_color_match"
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.resolution not in (16, 32):
            raise ValueError(f"resolution must be 16 or 32, got {self.resolution}")
        if self.long_range_rule not in RULES:
            raise ValueError(f"unknown long_range_rule {self.long_range_rule!r}; "
                             f"expected one of {RULES}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


def class_hue(cls: int, num_classes: int, u: float) -> float:
    """Per-image hue inside class ``cls``'s arc; u in [0,1) spans 80% of the
    arc with a 10% guard band on each side."""
    return (cls + 0.1 + 0.8 * u) / num_classes


def hsv_to_rgb(h: float, s: float = 1.0, v: float = 1.0) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb, dtype=np.float32)


def rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue in [0,1) of RGB values in [0,1]; vectorized over leading axes."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    h = np.zeros_like(mx)
    safe = d > 1e-12
    rmax = safe & (mx == r)
    gmax = safe & (mx == g) & ~rmax
    bmax = safe & (mx == b) & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / d[rmax]) % 6.0
    h[gmax] = (b - r)[gmax] / d[gmax] + 2.0
    h[bmax] = (r - g)[bmax] / d[bmax] + 4.0
    return h / 6.0


def _paint_background(rng: np.random.Generator, r: int) -> np.ndarray:
    return (0.2 + 0.6 * rng.random((r, r, 3))).astype(np.float32)


def _noise(img: np.ndarray, rng: np.random.Generator, level: float) -> np.ndarray:
    if level > 0:
        img = img + level * rng.standard_normal(img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _disc_mask(r: int, ci: float, cj: float, radius: float) -> np.ndarray:
    ii, jj = np.mgrid[0:r, 0:r]
    return (ii - ci) ** 2 + (jj - cj) ** 2 <= radius ** 2


def render_image(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    """One [H,W,3] float image in [0,1] for the given class."""
    r = spec.resolution
    hue = class_hue(cls, spec.num_classes, rng.random())
    color = hsv_to_rgb(hue)
    img = _paint_background(rng, r)
    if spec.long_range_rule == "corner_color_match":
        img[:CORNER, :CORNER] = color
        img[-CORNER:, -CORNER:] = color
    elif spec.long_range_rule == "mirrored_blobs":
        radius = r / 8.0
        ci = rng.uniform(radius, r / 2.0 - 1)
        cj = rng.uniform(radius, r - 1 - radius)
        for mi, mj in ((ci, cj), (r - 1 - ci, r - 1 - cj)):
            img[_disc_mask(r, mi, mj, radius)] = color
    else:  # ring_pairs
        orbit = r / 2.0 - r / 8.0 - 1
        theta = rng.uniform(0, 2 * np.pi)
        for ang in (theta, theta + np.pi):
            ci = r / 2.0 + orbit * np.sin(ang)
            cj = r / 2.0 + orbit * np.cos(ang)
            ring = _disc_mask(r, ci, cj, r / 8.0) & ~_disc_mask(r, ci, cj, r / 16.0)
            img[ring] = color
    return _noise(img, rng, spec.noise_level)


def generate_dataset(spec: SyntheticSpec, out_dir) -> str:
    """Write the dataset: images/*.ppm, labels.csv, spec.txt.

    Per-image Philox streams keyed by (seed, index) make generation
    deterministic and parallelizable; a fixed seed yields byte-identical
    files.
    """
    out_dir = str(out_dir)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    idx = 0
    for cls in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence([spec.seed & 0xFFFFFFFF, idx])))
            img = render_image(spec, cls, rng)
            name = f"img_{idx:05d}.ppm"
            write_image(os.path.join(img_dir, name),
                        np.round(img * 255).astype(np.uint8))
            rows.append((name, cls))
            idx += 1
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    with open(os.path.join(out_dir, "spec.txt"), "w") as f:
        for k, v in asdict(spec).items():
            f.write(f"{k} = {v}\n")
    return out_dir


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray, SyntheticSpec]:
    """Images as float32 [N,3,H,W] in [-1,1] plus int64 labels, in
    labels.csv order."""
    data_dir = str(data_dir)
    labels_path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(labels_path):
        raise FileNotFoundError(f"no labels.csv in dataset directory: {data_dir}")
    names, labels = [], []
    with open(labels_path, newline="") as f:
        for row in csv.DictReader(f):
            names.append(row["filename"])
            labels.append(int(row["label"]))
    images = np.stack([to_unit(read_image(os.path.join(data_dir, "images", n)))
                       for n in names])
    spec_kv = {}
    spec_path = os.path.join(data_dir, "spec.txt")
    if os.path.exists(spec_path):
        with open(spec_path) as f:
            for line in f:
                if "=" in line:
                    k, _, v = line.partition("=")
                    spec_kv[k.strip()] = v.strip()
    spec = SyntheticSpec(
        resolution=int(spec_kv.get("resolution", images.shape[-1])),
        num_classes=int(spec_kv.get("num_classes", int(max(labels)) + 1)),
        samples_per_class=int(spec_kv.get("samples_per_class",
                                          len(labels) // (int(max(labels)) + 1))),
        long_range_rule=spec_kv.get("long_range_rule", "corner_color_match"),
        noise_level=float(spec_kv.get("noise_level", 0.0)),
        seed=int(spec_kv.get("seed", 0)),
    )
    return images.astype(np.float32), np.asarray(labels, dtype=np.int64), spec


def corner_hues(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hue of the mean color of the top-left and bottom-right corner patches.

    Accepts [N,3,H,W] in [-1,1] (the model-side convention).
    """
    x = (images + 1.0) * 0.5
    tl = x[:, :, :CORNER, :CORNER].mean(axis=(2, 3))
    br = x[:, :, -CORNER:, -CORNER:].mean(axis=(2, 3))
    return rgb_to_hue(tl), rgb_to_hue(br)


def cross_corner_correlation(images: np.ndarray, labels: np.ndarray) -> dict[int, float]:
    """Within-class Pearson correlation between the two corner hues."""
    tl, br = corner_hues(images)
    out = {}
    for cls in np.unique(labels):
        mask = labels == cls
        a, b = tl[mask], br[mask]
        if a.size < 2 or a.std() < 1e-9 or b.std() < 1e-9:
            out[int(cls)] = 0.0
        else:
            out[int(cls)] = float(np.corrcoef(a, b)[0, 1])
    return out


def mean_cross_corner_correlation(images: np.ndarray, labels: np.ndarray) -> float:
    per_class = cross_corner_correlation(images, labels)
    return float(np.mean(list(per_class.values()))) if per_class else 0.0
