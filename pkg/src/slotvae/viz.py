"""PNG panels: sample grids, decomposition strips, traversal grids."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def to_uint8(x) -> np.ndarray:
    """(C, H, W) or (H, W) tensor/array in [0, 1] -> (H, W, 3) uint8."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    x = np.transpose(x, (1, 2, 0))
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def grid(rows: list[list[np.ndarray]], pad: int = 2, fill: int = 255) -> np.ndarray:
    """Tile equally sized (H, W, 3) uint8 tiles into a padded grid."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.full(
        (len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), fill, dtype=np.uint8
    )
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y : y + h, x : x + w] = tile
    return out


def save_png(array: np.ndarray, path, upscale: int = 2) -> None:
    img = Image.fromarray(array)
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path)


def scene_rows(scene, inputs=None) -> list[list[np.ndarray]]:
    """One row per image: [input], composed, then mask-weighted component per slot, then masks."""
    rows = []
    for b in range(scene.composed.shape[0]):
        row = []
        if inputs is not None:
            row.append(to_uint8(inputs[b]))
        row.append(to_uint8(scene.composed[b]))
        k = scene.masks.shape[1]
        for s in range(k):
            row.append(to_uint8(scene.components[b, s] * scene.masks[b, s]))
        for s in range(k):
            row.append(to_uint8(scene.masks[b, s]))
        rows.append(row)
    return rows
