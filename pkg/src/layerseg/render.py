"""Image grids for training dumps and the ``render`` command."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .images import make_grid, save_image


def save_foreground_grid(images: np.ndarray, masks: np.ndarray, composites: np.ndarray, path: str | Path) -> None:
    """Rows: input images, predicted masks, carved foreground, composites."""
    carved = images * masks
    rows = list(images) + list(masks) + list(carved) + list(composites)
    save_image(make_grid(rows, ncols=len(images)), path)


def save_hoc_grid(instances: np.ndarray, composites: np.ndarray, path: str | Path) -> None:
    """Rows: per-slot RGBA instances (appearance times mask), their masks, then composites."""
    app, mask = instances[:, :3], instances[:, 3:4]
    rows = list(app * mask) + list(mask) + list(composites)
    save_image(make_grid(rows, ncols=max(len(instances), 1)), path)


def save_mask_pairs(pred: np.ndarray, gt: np.ndarray, path: str | Path, limit: int = 16) -> None:
    rows = list(pred[:limit]) + list(gt[:limit])
    save_image(make_grid(rows, ncols=min(limit, len(pred))), path)
