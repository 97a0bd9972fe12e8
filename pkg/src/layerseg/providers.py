"""Category-specific instance providers.

Each provider call sees only its own inputs: its own latent or image, its own
random stream, and read-only shared parameters. Nothing here reads another
slot's latent or output.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .compositor import RgbaLayer
from .tensor import Tensor

# stream tags keep per-purpose random streams apart for the same (seed, slot, step)
STREAM_LATENT = 1
STREAM_LAYOUT = 2
STREAM_BACKGROUND = 3
STREAM_DATA = 4
STREAM_AUGMENT = 5


class ProviderKind(enum.Enum):
    SEGMENTATION_NET = "segmentation-net"
    NOISE_GENERATOR = "noise-generator"
    BACKGROUND_PATCH = "background-patch"
    HOC_BACKGROUND = "hoc-background"


def slot_rng(seed: int, slot: int, step: int, stream: int = STREAM_LATENT) -> np.random.Generator:
    """Independent random stream for one provider slot at one training step."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(slot), int(step)]))


def segmentation_provider(image, unet) -> RgbaLayer:
    """Appearance is the input image itself; the mask is the segmenter's output."""
    image = T.as_tensor(image)
    return RgbaLayer(image, unet(image))


def sample_latents(n: int, dim_z: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, dim_z))


def noise_provider(generator, z) -> RgbaLayer:
    z = T.as_tensor(z)
    if z.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    if z.shape[1] != generator.dim_z:
        raise ValueError(f"latent has {z.shape[1]} dims, generator expects {generator.dim_z}")
    return RgbaLayer.from_rgba(generator(z))


def _corpus_list(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray) and corpus.ndim == 4:
        return list(corpus)
    return [np.asarray(c) for c in corpus]


def background_offsets(corpus, size: tuple[int, int], rng: np.random.Generator, n: int = 1):
    """Random (image index, top, left) for ``n`` crops of ``size``."""
    images = _corpus_list(corpus)
    if not images:
        raise ValueError("background corpus is empty")
    h, w = size
    picks = []
    for _ in range(n):
        k = int(rng.integers(len(images)))
        ih, iw = images[k].shape[-2:]
        if ih < h or iw < w:
            raise ValueError(f"corpus image {k} is {ih}x{iw}, smaller than the requested {h}x{w}")
        picks.append((k, int(rng.integers(ih - h + 1)), int(rng.integers(iw - w + 1))))
    return picks


def background_patch_sampler(corpus, size: tuple[int, int], rng: np.random.Generator, n: int = 1) -> RgbaLayer:
    """Uniformly random crops from a background corpus; masks cover every pixel."""
    images = _corpus_list(corpus)
    h, w = size
    crops = [images[k][:, top : top + h, left : left + w] for k, top, left in background_offsets(images, size, rng, n)]
    app = np.stack(crops).astype(T.get_dtype())
    return RgbaLayer(Tensor(app), Tensor(np.ones((n, 1, h, w))))


def disk_mask(h: int, w: int, radius: float, soft: bool = False) -> np.ndarray:
    """Centered disk indicator (1 inside). Soft edges use a one-pixel ramp."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if soft:
        return np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return (dist <= radius).astype(float)


def hoc_background_sampler(real_patch, radius: float, soft_edges: bool = False) -> RgbaLayer:
    """Real patch(es) with a black disk punched in the center; mask all ones."""
    patch = np.asarray(real_patch.data if isinstance(real_patch, Tensor) else real_patch)
    squeeze = patch.ndim == 3
    if squeeze:
        patch = patch[None]
    h, w = patch.shape[-2:]
    if radius < 0 or radius > min(h, w) / 2.0:
        raise ValueError(f"disk radius {radius} must lie in [0, {min(h, w) / 2.0}]")
    keep = 1.0 - disk_mask(h, w, radius, soft_edges) if radius > 0 else np.ones((h, w))
    app = (patch * keep).astype(T.get_dtype())
    mask = np.ones((app.shape[0], 1, h, w))
    if squeeze:
        return RgbaLayer(Tensor(app[0]), Tensor(mask[0]))
    return RgbaLayer(Tensor(app), Tensor(mask))


def hoc_backgrounds(real_patches: np.ndarray, radius: float, mode: str, rng: np.random.Generator, black_fraction: float = 0.5) -> RgbaLayer:
    """Backgrounds for a batch: ``black``, ``disk`` (punched real patches) or ``mixed``."""
    n, _, h, w = real_patches.shape
    if mode == "black":
        use_black = np.ones(n, bool)
    elif mode == "disk":
        use_black = np.zeros(n, bool)
    elif mode == "mixed":
        use_black = rng.uniform(size=n) < black_fraction
    else:
        raise ValueError(f"unknown background mode {mode!r}")
    layer = hoc_background_sampler(real_patches, radius)
    app = layer.appearance.data.copy()
    app[use_black] = 0.0
    return RgbaLayer(Tensor(app), layer.mask)


def provide_slots(generator, latents: Sequence[np.ndarray]) -> list[RgbaLayer]:
    """Run the shared generator once per slot on that slot's latents only."""
    return [noise_provider(generator, z) for z in latents]
