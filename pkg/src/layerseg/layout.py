"""Layout priors: where provided instances end up in the composite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compositor import RgbaLayer, WarpParams, warp_layer

# padding per HOC image (crowd, fruit cluster, seed cluster)
DEFAULT_PADS = {"crowd": 30, "fruit": 32, "seed": 26}


@dataclass(frozen=True)
class LayoutPrior:
    kind: str = "identity"  # "identity" | "uniform-translate"
    pad: int = 0
    r_min: tuple[float, float] = (0.0, 0.0)
    r_max: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("identity", "uniform-translate"):
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")
        if np.any(np.asarray(self.r_min) > np.asarray(self.r_max)):
            raise ValueError(f"r_min {self.r_min} exceeds r_max {self.r_max}")

    @classmethod
    def pad_crop(cls, pad: int) -> "LayoutPrior":
        return cls("uniform-translate", pad, (-pad, -pad), (pad, pad))


def identity_layout(n_layers: int) -> list[WarpParams]:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    return [WarpParams.identity() for _ in range(n_layers)]


def pad_crop_offsets(n: int, pad: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Crop offsets (ox, oy), each uniform over the integers 0..2*pad."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    ox = rng.integers(0, 2 * pad + 1, size=n)
    oy = rng.integers(0, 2 * pad + 1, size=n)
    return ox, oy


def pad_crop(layer: RgbaLayer, pad: int, ox, oy) -> RgbaLayer:
    """Zero-pad by ``pad`` on every side, then crop the original size at (ox, oy).

    Identical to an integer translation by (pad - ox, pad - oy).
    """
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    ox, oy = np.asarray(ox), np.asarray(oy)
    if np.any(ox < 0) or np.any(oy < 0) or np.any(ox > 2 * pad) or np.any(oy > 2 * pad):
        raise ValueError(f"crop offsets must lie in [0, {2 * pad}]")
    return warp_layer(layer, WarpParams.translation(pad - ox, pad - oy))


def uniform_pad_crop(layer: RgbaLayer, pad: int, rng: np.random.Generator) -> RgbaLayer:
    n = layer.appearance.shape[0] if layer.appearance.ndim == 4 else 1
    ox, oy = pad_crop_offsets(n, pad, rng)
    return pad_crop(layer, pad, ox, oy)


def sample_pose_uniform(prior: LayoutPrior, rng: np.random.Generator, n: int = 1, size: tuple[int, int] | None = None) -> WarpParams:
    """Draw translations uniformly in [r_min, r_max] (pixels).

    Integer-valued bounds give an exact integer translation. Otherwise ``size``
    (H, W) is required and the pose becomes an affine translation.
    """
    lo = np.asarray(prior.r_min, dtype=float)
    hi = np.asarray(prior.r_max, dtype=float)
    integral = np.all(lo == np.round(lo)) and np.all(hi == np.round(hi))
    if integral:
        draws = np.stack([rng.integers(int(lo[i]), int(hi[i]) + 1, size=n) for i in range(2)], axis=1)
        return WarpParams.translation(draws[:, 0], draws[:, 1])
    if size is None:
        raise ValueError("sub-pixel poses need the layer size")
    draws = rng.uniform(lo, hi, size=(n, 2))
    return WarpParams.affine_map(translation_theta(draws[:, 0], draws[:, 1], size))


def translation_theta(dx, dy, size: tuple[int, int]) -> np.ndarray:
    """Affine maps that move content by (dx, dy) pixels."""
    h, w = size
    dx, dy = np.atleast_1d(dx), np.atleast_1d(dy)
    theta = np.zeros((len(dx), 2, 3))
    theta[:, 0, 0] = 1.0
    theta[:, 1, 1] = 1.0
    # output samples from (x - dx); convert the pixel shift to normalized units
    theta[:, 0, 2] = -2.0 * dx / max(w - 1, 1)
    theta[:, 1, 2] = -2.0 * dy / max(h - 1, 1)
    return theta
