"""Warping RGBA layers and compositing them by recursive alpha blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class RgbaLayer:
    """Appearance ``(N, 3, H, W)`` and soft mask ``(N, 1, H, W)``, both in [0, 1]."""

    appearance: Tensor
    mask: Tensor

    def __post_init__(self):
        self.appearance = T.as_tensor(self.appearance)
        self.mask = T.as_tensor(self.mask)
        a, m = self.appearance.shape, self.mask.shape
        if a[-3] != 3 or m[-3] != 1:
            raise ValueError(f"expected 3 appearance planes and 1 mask plane, got {a} and {m}")
        if a[-2:] != m[-2:] or a[:-3] != m[:-3]:
            raise ValueError(f"appearance {a} and mask {m} do not share layout")

    @classmethod
    def from_rgba(cls, rgba: Tensor) -> "RgbaLayer":
        return cls(rgba[:, 0:3], rgba[:, 3:4])

    @property
    def hw(self) -> tuple[int, int]:
        return self.appearance.shape[-2:]

    def in_unit_range(self, tol: float = 0.0) -> bool:
        lo = min(self.appearance.data.min(), self.mask.data.min())
        hi = max(self.appearance.data.max(), self.mask.data.max())
        return lo >= -tol and hi <= 1 + tol


@dataclass(frozen=True)
class WarpParams:
    """Either an integer translation (per batch element) or a 2x3 affine map.

    Affine maps act on normalized coordinates in [-1, 1] and say where each
    output pixel samples from, matching the usual spatial-transformer layout.
    """

    dx: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    dy: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    affine: Tensor | None = None

    @classmethod
    def identity(cls) -> "WarpParams":
        return cls()

    @classmethod
    def translation(cls, dx, dy) -> "WarpParams":
        fdx, fdy = np.atleast_1d(np.asarray(dx, dtype=float)), np.atleast_1d(np.asarray(dy, dtype=float))
        if not (np.all(np.isfinite(fdx)) and np.all(np.isfinite(fdy))):
            raise ValueError("translation must be finite")
        if np.any(fdx != np.round(fdx)) or np.any(fdy != np.round(fdy)):
            raise ValueError("translation warps take integer pixel offsets; use an affine map for sub-pixel shifts")
        return cls(fdx.astype(np.int64), fdy.astype(np.int64))

    @classmethod
    def affine_map(cls, theta) -> "WarpParams":
        theta = T.as_tensor(theta)
        if theta.ndim == 2:
            theta = T.reshape(theta, (1, 2, 3))
        if theta.shape[1:] != (2, 3):
            raise ValueError(f"affine map must be (N, 2, 3), got {theta.shape}")
        if not np.all(np.isfinite(theta.data)):
            raise ValueError("affine map must be finite")
        return cls(affine=theta)

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    @property
    def is_identity(self) -> bool:
        return not self.is_affine and not np.any(self.dx) and not np.any(self.dy)


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def warp_layer(layer: RgbaLayer, params: WarpParams) -> RgbaLayer:
    """Apply the same warp to appearance and mask; vacated pixels become zero."""
    if params.is_identity:
        return layer
    rgba, squeezed = _as_batched(T.concat([layer.appearance, layer.mask], axis=-3))
    n, _, h, w = rgba.shape
    if params.is_affine:
        theta = params.affine
        if theta.shape[0] not in (1, n):
            raise ValueError(f"affine batch {theta.shape[0]} does not match layer batch {n}")
        if theta.shape[0] != n:
            theta = T.broadcast_to(theta, (n, 2, 3))
        out = T.grid_sample_bilinear(rgba, T.affine_grid(theta, h, w))
    else:
        out = T.shift2d(rgba, params.dx, params.dy)
    if squeezed:
        out = T.reshape(out, out.shape[1:])
        return RgbaLayer(out[0:3], out[3:4])
    return RgbaLayer.from_rgba(out)


@dataclass
class LayerStack:
    """Warped layers in stacking order (later is on top) over a base image."""

    layers: list[RgbaLayer]
    base: Tensor | None = None

    def __post_init__(self):
        hws = {layer.hw for layer in self.layers}
        if self.base is not None:
            self.base = T.as_tensor(self.base)
            hws.add(tuple(self.base.shape[-2:]))
        if len(hws) > 1:
            raise ValueError(f"all layers must share H x W, got {sorted(hws)}")


def composite(stack: LayerStack) -> Tensor:
    """x_i = I_i * m_i + x_{i-1} * (1 - m_i), starting from a black base."""
    if stack.base is not None:
        x = stack.base
    elif stack.layers:
        x = Tensor(np.zeros(stack.layers[0].appearance.shape, dtype=stack.layers[0].appearance.dtype))
    else:
        raise ValueError("empty stack without a base image has no defined size")
    for layer in stack.layers:
        m = layer.mask
        x = layer.appearance * m + x * (1.0 - m)
    return x


def paste_foreground(fg: RgbaLayer, bg) -> Tensor:
    """Composite ``fg`` over a background whose mask covers every pixel."""
    bg = T.as_tensor(bg)
    if bg.shape != fg.appearance.shape:
        raise ValueError(f"background shape {bg.shape} does not match foreground {fg.appearance.shape}")
    full = Tensor(np.ones(fg.mask.shape, dtype=bg.dtype))
    return composite(LayerStack([RgbaLayer(bg, full), fg]))
