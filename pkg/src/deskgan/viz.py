"""Attention-map and sample-grid export.

Heatmap rendering is a documented linear blend so the written bytes are
testable: with the attention row rescaled to n = map / max(map), each
overlay pixel is

    out = (1 - n) * gray(base) + n * (255, 0, 0)

where gray(base) is the base pixel's luminance replicated to RGB.  Raw maps
are also written as P5 graymaps with value round(255 * n).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .ppm import write_image, from_unit
from .models import Generator, build_generator, sample
from .trainer import TrainerConfig, load_checkpoint, CheckpointError, Trainer

QUERY_DOT_COLORS = ((255, 255, 0), (0, 255, 255), (255, 0, 255),
                    (0, 255, 0), (255, 128, 0))


@dataclass
class AttentionOverlay:
    """One rendered query: base image, query location, attention map, blend."""

    base: np.ndarray          # uint8 [H,W,3]
    query: tuple
    attention: np.ndarray     # float [h,w], sums to 1
    rendered: np.ndarray      # uint8 [H,W,3]


def render_heatmap_overlay(base_rgb: np.ndarray, attn_map: np.ndarray) -> np.ndarray:
    """Blend an attention map over a base image per the module formula.

    The map is nearest-neighbor upscaled when coarser than the image.
    """
    h, w = base_rgb.shape[:2]
    mh, mw = attn_map.shape
    if (h % mh) or (w % mw):
        raise ValueError(f"attention map {attn_map.shape} does not tile image "
                         f"{base_rgb.shape[:2]}")
    scaled = np.repeat(np.repeat(attn_map, h // mh, axis=0), w // mw, axis=1)
    peak = scaled.max()
    n = scaled / peak if peak > 0 else scaled
    gray = (0.299 * base_rgb[..., 0] + 0.587 * base_rgb[..., 1]
            + 0.114 * base_rgb[..., 2])
    out = np.empty_like(base_rgb, dtype=np.float64)
    out[..., 0] = (1 - n) * gray + n * 255.0
    out[..., 1] = (1 - n) * gray
    out[..., 2] = (1 - n) * gray
    return np.round(np.clip(out, 0, 255)).astype(np.uint8)


def heatmap_to_gray(attn_map: np.ndarray) -> np.ndarray:
    peak = attn_map.max()
    n = attn_map / peak if peak > 0 else attn_map
    return np.round(255.0 * n).astype(np.uint8)


def draw_query_dot(base_rgb: np.ndarray, query: tuple, color: tuple) -> np.ndarray:
    out = base_rgb.copy()
    r, c = query
    h, w = out.shape[:2]
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"query {query} outside image {h}×{w}")
    out[max(0, r - 1):r + 2, max(0, c - 1):c + 2] = color
    return out


def save_image_grid(path, images: np.ndarray, cols: int = 8, gap: int = 1) -> None:
    """Tile [N,3,H,W] images (in [-1,1]) into a single P6 file."""
    n = len(images)
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    h, w = images.shape[2], images.shape[3]
    canvas = np.zeros((rows * (h + gap) - gap, cols * (w + gap) - gap, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (h + gap):r * (h + gap) + h,
               c * (w + gap):c * (w + gap) + w] = from_unit(images[i])
    write_image(path, canvas)


def _generator_from_checkpoint(checkpoint_path) -> tuple[Generator, TrainerConfig]:
    arrays, meta = load_checkpoint(checkpoint_path)
    if meta.get("kind") != "trainer":
        raise CheckpointError(f"{checkpoint_path} is not a trainer checkpoint")
    cfg = TrainerConfig.from_flat_dict(meta["config"])
    gen = build_generator(cfg.generator_config(), seed=cfg.seed)
    params = {k[len("g.param/"):]: v for k, v in arrays.items()
              if k.startswith("g.param/")}
    buffers = {k[len("g.buffer/"):]: v for k, v in arrays.items()
               if k.startswith("g.buffer/")}
    gen.load_state(params, buffers)
    return gen, cfg


def export_attention_figure(checkpoint_path, seed: int, query_points: list,
                            out_dir, cls: int = 0, n_images: int = 1) -> list:
    """Render attention maps of the generator's last attention layer.

    For each sampled image and query point (row, col in output pixels) this
    writes the source image with a color-coded dot plus the heatmap
    overlay, and the raw map as a P5 graymap.  Returns the written paths.
    """
    gen, _ = _generator_from_checkpoint(checkpoint_path)
    attn = gen.attention_blocks()
    if not attn:
        raise ValueError(f"checkpoint {checkpoint_path} has no attention block "
                         f"in the generator; nothing to visualize")
    stage_res, block = attn[-1]  # closest to the output pixels
    os.makedirs(out_dir, exist_ok=True)
    block.store_weights = True
    try:
        images, _ = sample(gen, n_images, cls, seed)
    finally:
        block.store_weights = False
    beta = block.last_beta
    bh, bw = block.last_hw
    out_res = images.shape[-1]
    scale = out_res // bh
    written = []
    for i in range(n_images):
        base = from_unit(images.data[i])
        for q, (r, c) in enumerate(query_points):
            if not (0 <= r < out_res and 0 <= c < out_res):
                raise IndexError(f"query {(r, c)} outside image {out_res}×{out_res}")
            qr, qc = r // scale, c // scale
            row = beta[i, qr * bw + qc].reshape(bh, bw)
            color = QUERY_DOT_COLORS[q % len(QUERY_DOT_COLORS)]
            dot_path = os.path.join(out_dir, f"img{i}_q{q}_query.ppm")
            overlay_path = os.path.join(out_dir, f"img{i}_q{q}_overlay.ppm")
            map_path = os.path.join(out_dir, f"img{i}_q{q}_map.pgm")
            write_image(dot_path, draw_query_dot(base, (r, c), color))
            write_image(overlay_path, render_heatmap_overlay(base, row))
            write_image(map_path, heatmap_to_gray(row))
            written += [dot_path, overlay_path, map_path]
    return written


def attention_rows_for_queries(checkpoint_path, seed: int, query_points: list,
                               cls: int = 0, n_images: int = 8) -> tuple[np.ndarray, tuple]:
    """Raw attention rows for analysis: [n_images × n_queries × h × w]."""
    gen, _ = _generator_from_checkpoint(checkpoint_path)
    attn = gen.attention_blocks()
    if not attn:
        raise ValueError("no attention block in the generator")
    _, block = attn[-1]
    block.store_weights = True
    try:
        images, _ = sample(gen, n_images, cls, seed)
    finally:
        block.store_weights = False
    bh, bw = block.last_hw
    out_res = images.shape[-1]
    scale = out_res // bh
    rows = np.stack([
        np.stack([block.last_beta[i, (r // scale) * bw + (c // scale)].reshape(bh, bw)
                  for (r, c) in query_points])
        for i in range(n_images)])
    return rows, (bh, bw)
