"""Region and attention rendering.

Three products, all plain raster images:

    initial segmentation   each token colored by the cell that pooled it
                           (the assignment before any sampling iteration):
                           by construction the regular grid of cells
    learned segmentation   each token colored by the argmax of its final
                           association row, restricted to slots that
                           address a real region; exact ties go to the
                           lowest slot index
    attention heatmap      one row of the dense effective attention map
                           (token x token), reshaped to the token grid and
                           scaled so the maximum maps to 255

Segmentations are written as color PPM with 1-pixel black region
boundaries; heatmaps as grayscale PGM. Everything is upsampled to image
resolution by integer-factor pixel replication.
"""

from __future__ import annotations

import numpy as np

from stattn.errors import ConfigError, ShapeError
from stattn.sta import (
    StaConfig,
    StaWeights,
    grid_geometry,
    slot_neighbors,
    sta_dense_oracle,
    sts,
)
from stattn.tensor import Tensor, as_tensor, no_grad


def _hsv_to_rgb(h: np.ndarray, s: float, v: float) -> np.ndarray:
    """Vectorized HSV -> RGB for hue array in [0, 1); returns float [n, 3]."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = np.stack(
        [
            np.stack([np.full_like(f, v), t, np.full_like(f, p)], axis=1),
            np.stack([q, np.full_like(f, v), np.full_like(f, p)], axis=1),
            np.stack([np.full_like(f, p), np.full_like(f, v), t], axis=1),
            np.stack([np.full_like(f, p), q, np.full_like(f, v)], axis=1),
            np.stack([t, np.full_like(f, p), np.full_like(f, v)], axis=1),
            np.stack([np.full_like(f, v), np.full_like(f, p), q], axis=1),
        ],
        axis=0,
    )
    return table[i, np.arange(len(h))]


def region_palette(m: int) -> np.ndarray:
    """[m, 3] u8 distinct colors; golden-ratio hue stepping keeps neighbors
    in index order visually far apart."""
    if m < 1:
        raise ConfigError(f"palette needs m >= 1, got {m}")
    hues = (0.12 + np.arange(m) * 0.6180339887498949) % 1.0
    sats = np.where(np.arange(m) % 2 == 0, 0.75, 0.55)
    rgb = np.stack(
        [_hsv_to_rgb(hues, float(s), 0.95)[i] for i, s in enumerate(sats)], axis=0
    )
    return np.round(rgb * 255.0).astype(np.uint8)


def initial_assignment(h: int, w: int, cell_h: int, cell_w: int) -> np.ndarray:
    """[h, w] int region ids of the pooling cells (row-major grid order)."""
    if h % cell_h or w % cell_w:
        raise ShapeError(f"token map {h}x{w} not divisible by cell {cell_h}x{cell_w}")
    q = w // cell_w
    ys = np.arange(h)[:, None] // cell_h
    xs = np.arange(w)[None, :] // cell_w
    return (ys * q + xs).astype(np.int64)


def learned_assignment(tokens, cfg: StaConfig) -> np.ndarray:
    """[h, w] int region ids: argmax over valid slots of the final
    association, lowest slot index on exact ties (argmax's tie rule)."""
    x = as_tensor(tokens)
    if x.shape[0] != 1:
        raise ShapeError(f"assignment expects batch 1, got {x.shape}")
    p, q = grid_geometry(x.shape, cfg)
    with no_grad():
        _, assoc = sts(x, cfg)
    w = np.asarray(assoc.weights.data)[0]  # [m, hw, 9]
    neighbors = slot_neighbors(p, q)  # [m, 9]
    masked = np.where(neighbors[:, None, :] >= 0, w, -1.0)
    best = masked.argmax(axis=2)  # [m, hw]
    region = np.take_along_axis(neighbors, best, axis=1)  # [m, hw]
    ch, cw = cfg.grid_h, cfg.grid_w
    grid = region.reshape(p, q, ch, cw)
    return grid.transpose(0, 2, 1, 3).reshape(p * ch, q * cw).astype(np.int64)


def effective_attention(tokens, cfg: StaConfig, w: StaWeights, rel_bias=None) -> np.ndarray:
    """Dense [N, N] effective attention for a batch-1 token map."""
    x = as_tensor(tokens)
    if x.shape[0] != 1:
        raise ShapeError(f"attention map expects batch 1, got {x.shape}")
    with no_grad():
        _, a_tilde = sta_dense_oracle(x, cfg, w, rel_bias=rel_bias)
    return a_tilde[0]


def upsample_nearest(a: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)
    return out


def render_segmentation(ids: np.ndarray, scale: int = 1) -> np.ndarray:
    """[h*scale, w*scale, 3] u8: palette fill plus black boundary pixels
    wherever the region id changes between vertical or horizontal neighbors."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be [h, w], got {ids.shape}")
    m = int(ids.max()) + 1
    pal = region_palette(m)
    big = upsample_nearest(ids, scale)
    img = pal[big]
    edge = np.zeros_like(big, dtype=bool)
    edge[1:, :] |= big[1:, :] != big[:-1, :]
    edge[:, 1:] |= big[:, 1:] != big[:, :-1]
    img[edge] = 0
    return img


def render_heatmap(values: np.ndarray, scale: int = 1) -> np.ndarray:
    """[h*scale, w*scale] u8 with the maximum mapped to 255.

    Attention rows are non-negative; scaling is v / max * 255 so zero stays
    zero. An all-zero map renders as black.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"heatmap values must be [h, w], got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ShapeError("heatmap contains non-finite values")
    top = v.max()
    u8 = np.zeros(v.shape, dtype=np.uint8) if top <= 0 else np.round(
        np.clip(v, 0.0, None) / top * 255.0
    ).astype(np.uint8)
    return upsample_nearest(u8, scale)


def attention_row_image(
    tokens, cfg: StaConfig, w: StaWeights, anchor: tuple[int, int], rel_bias=None
) -> np.ndarray:
    """[h, w] attention mass that the anchor token places on every token."""
    x = as_tensor(tokens)
    _, _, h, wd = x.shape
    ay, ax = anchor
    if not (0 <= ay < h and 0 <= ax < wd):
        raise ConfigError(f"anchor ({ay},{ax}) outside token map {h}x{wd}")
    a = effective_attention(tokens, cfg, w, rel_bias=rel_bias)
    return a[ay * wd + ax].reshape(h, wd)
