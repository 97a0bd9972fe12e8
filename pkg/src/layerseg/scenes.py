"""Synthetic scenes with known instance masks, and real-data preparation helpers.

Scenes are drawn ancestrally: the scene spec fixes the categories, poses are
drawn jointly given the scene, then each instance's appearance is drawn on its
own from its category's distribution. Layers are composited bottom-up over a
background layer whose mask covers every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .compositor import LayerStack, RgbaLayer, composite
from .tensor import Tensor

SHAPES = ("disk", "square", "triangle")


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str = "disk"
    size_range: tuple[float, float] = (8.0, 12.0)  # half-extent in pixels
    color_low: tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_high: tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture_amp: float = 0.05

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.size_range[0] <= 0 or self.size_range[0] > self.size_range[1]:
            raise ValueError(f"bad size range {self.size_range}")


@dataclass(frozen=True)
class BackgroundSpec:
    color_low: tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_high: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stripe_amp: float = 0.15
    stripe_period: tuple[float, float] = (6.0, 16.0)
    texture_amp: float = 0.05
    black: bool = False


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    categories: tuple[CategorySpec, ...]  # one entry per instance slot, bottom first
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    pose_rule: str = "free"  # "free" | "centered" | "non_overlap"
    center_jitter: float = 8.0
    max_tries: int = 1000

    def __post_init__(self):
        if self.pose_rule not in ("free", "centered", "non_overlap"):
            raise ValueError(f"unknown pose rule {self.pose_rule!r}")
        if self.image_size < 4:
            raise ValueError("image_size too small")

    @property
    def n_instances(self) -> int:
        return len(self.categories)


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W)
    background: np.ndarray  # (3, H, W)
    appearances: np.ndarray  # (N, 3, H, W)
    masks: np.ndarray  # (N, H, W) full masks
    visible: np.ndarray  # (N, H, W) visible masks
    categories: list[str]
    poses: np.ndarray  # (N, 3): center x, center y, half-extent
    seed: int | None = None

    def layer_stack(self) -> LayerStack:
        h, w = self.image.shape[1:]
        layers = [RgbaLayer(Tensor(self.background), Tensor(np.ones((1, h, w))))]
        layers += [RgbaLayer(Tensor(a), Tensor(m[None])) for a, m in zip(self.appearances, self.masks)]
        return LayerStack(layers)


def rasterize(shape: str, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    """Hard 0/1 mask of a shape centered at (cx, cy) with half-extent ``size``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        inside = dx * dx + dy * dy <= size * size
    elif shape == "square":
        inside = (np.abs(dx) <= size) & (np.abs(dy) <= size)
    elif shape == "triangle":
        # apex up, base at cy + size, spanning half-width size at the base
        t = (dy + size) / (2.0 * size)
        inside = (t >= 0) & (t <= 1) & (np.abs(dx) <= size * t)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.astype(float)


def _noise(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    if amp <= 0:
        return np.zeros((3, h, w))
    return rng.normal(0.0, amp, size=(3, h, w))


def sample_background(spec: BackgroundSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if spec.black:
        return np.zeros((3, h, w))
    color = rng.uniform(spec.color_low, spec.color_high)
    angle = rng.uniform(0.0, np.pi)
    period = rng.uniform(*spec.stripe_period)
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    tint = rng.uniform(-1.0, 1.0, size=3)
    img = color[:, None, None] + spec.stripe_amp * tint[:, None, None] * wave[None]
    img = img + _noise(rng, h, w, spec.texture_amp)
    return np.clip(img, 0.0, 1.0)


def sample_appearance(cat: CategorySpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(cat.color_low, cat.color_high)
    img = color[:, None, None] + _noise(rng, h, w, cat.texture_amp)
    return np.clip(img, 0.0, 1.0)


def _sample_poses(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    poses = np.zeros((spec.n_instances, 3))
    for i, cat in enumerate(spec.categories):
        size = rng.uniform(*cat.size_range)
        for _ in range(spec.max_tries):
            if spec.pose_rule == "centered":
                c = (s - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
            else:
                c = rng.uniform(0.0, s - 1, size=2)
            if spec.pose_rule != "non_overlap":
                break
            gaps = np.hypot(poses[:i, 0] - c[0], poses[:i, 1] - c[1]) - poses[:i, 2] * np.sqrt(2) - size * np.sqrt(2)
            if np.all(gaps > 0):
                break
        else:
            raise SceneError(f"could not place instance {i} without overlap after {spec.max_tries} tries")
        poses[i] = (c[0], c[1], size)
    return poses


def visible_masks(masks: np.ndarray) -> np.ndarray:
    """m_i * prod_{j > i} (1 - m_j): what each layer still shows after compositing."""
    vis = np.empty_like(masks)
    cover = np.ones(masks.shape[1:])
    for i in range(len(masks) - 1, -1, -1):
        vis[i] = masks[i] * cover
        cover = cover * (1.0 - masks[i])
    return vis


def sample_scene(spec: SceneSpec, rng: np.random.Generator | int) -> SceneSample:
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    s = spec.image_size
    poses = _sample_poses(spec, rng)
    background = sample_background(spec.background, s, s, rng)
    # each appearance is drawn from its category alone
    appearances = np.stack([sample_appearance(cat, s, s, rng) for cat in spec.categories]) if spec.categories else np.zeros((0, 3, s, s))
    masks = (
        np.stack([rasterize(cat.shape, *poses[i], s, s) for i, cat in enumerate(spec.categories)])
        if spec.categories
        else np.zeros((0, s, s))
    )
    sample = SceneSample(
        image=np.zeros((3, s, s)),
        background=background,
        appearances=appearances,
        masks=masks,
        visible=visible_masks(masks),
        categories=[c.name for c in spec.categories],
        poses=poses,
        seed=seed,
    )
    with T.precision(64):
        sample.image = composite(sample.layer_stack()).data
    return sample


# ------------------------------------------------------------------ real-data preparation


def crop_and_resize(image: np.ndarray, box, out_size) -> np.ndarray:
    """Bilinear resize of the box (x0, y0, x1, y1) (pixel edges, x1/y1 exclusive).

    Output pixel centers map to evenly spaced source positions inside the box;
    positions past the border pixels read the border value.
    """
    image = np.asarray(image)
    _, h, w = image.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {box} exceeds image extent {w}x{h}")
    oh, ow = (out_size, out_size) if np.isscalar(out_size) else out_size
    xs = x0 + (np.arange(ow) + 0.5) * (x1 - x0) / ow - 0.5
    ys = y0 + (np.arange(oh) + 0.5) * (y1 - y0) / oh - 0.5
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = np.stack([gx, gy], axis=-1)[None]
    with T.precision(64):
        out = T.grid_sample_bilinear(Tensor(image[None]), Tensor(grid)).data[0]
    return out


def hoc_window(max_instance_width: float) -> int:
    """Patch window about 1.5 times the widest instance."""
    return int(round(1.5 * max_instance_width))


def extract_hoc_patches(
    image: np.ndarray,
    window: int,
    flips: str = "none",
    count: int = 100,
    rng: np.random.Generator | int = 0,
    out_size: int = 64,
) -> np.ndarray:
    """Random ``window``-sized crops rescaled to ``out_size``; flipped copies appended."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    image = np.asarray(image)
    _, h, w = image.shape
    if window > h or window > w or window < 1:
        raise ValueError(f"window {window} does not fit image {h}x{w}")
    if flips not in ("none", "h", "v", "both"):
        raise ValueError(f"flips must be none|h|v|both, got {flips!r}")
    patches = []
    for _ in range(count):
        top = int(rng.integers(h - window + 1))
        left = int(rng.integers(w - window + 1))
        crop = image[:, top : top + window, left : left + window]
        if window == out_size:
            patches.append(crop.copy())
        else:
            patches.append(crop_and_resize(crop, (0, 0, window, window), out_size))
    out = np.stack(patches)
    variants = [out]
    if flips in ("h", "both"):
        variants.append(out[..., ::-1])
    if flips in ("v", "both"):
        variants.append(out[..., ::-1, :])
    if flips == "both":
        variants.append(out[..., ::-1, ::-1])
    return np.ascontiguousarray(np.concatenate(variants))


# ------------------------------------------------------------------ datasets


@dataclass
class ForegroundDataset:
    images: np.ndarray  # (n, 3, H, W)
    masks: np.ndarray  # (n, 1, H, W) ground truth
    backgrounds: np.ndarray  # (m, 3, H, W) instance-free corpus

    def __len__(self) -> int:
        return len(self.images)

    def split(self, n_train: int) -> tuple["ForegroundDataset", "ForegroundDataset"]:
        return (
            ForegroundDataset(self.images[:n_train], self.masks[:n_train], self.backgrounds),
            ForegroundDataset(self.images[n_train:], self.masks[n_train:], self.backgrounds),
        )


def foreground_spec(image_size: int = 64, overlap: bool = True) -> SceneSpec:
    """One textured shape per image over a striped background.

    With ``overlap`` the foreground and background color ranges share part of
    their support, so color alone does not separate them.
    """
    r = image_size / 64.0
    fg_low, fg_high = ((0.35, 0.0, 0.2), (1.0, 0.65, 0.8)) if overlap else ((0.7, 0.0, 0.0), (1.0, 0.3, 0.3))
    bg_low, bg_high = ((0.0, 0.25, 0.0), (0.65, 1.0, 0.6)) if overlap else ((0.0, 0.5, 0.0), (0.3, 1.0, 0.4))
    fg = CategorySpec("object", "disk", (15.0 * r, 19.0 * r), fg_low, fg_high, texture_amp=0.03)
    bg = BackgroundSpec(bg_low, bg_high, stripe_amp=0.2, stripe_period=(6.0 * r, 14.0 * r), texture_amp=0.03)
    return SceneSpec(image_size, (fg,), bg, pose_rule="centered", center_jitter=10.0 * r)


def make_foreground_dataset(spec: SceneSpec, n_samples: int, rng: np.random.Generator | int, n_backgrounds: int | None = None) -> ForegroundDataset:
    if spec.n_instances != 1:
        raise ValueError("foreground datasets hold exactly one instance per image")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n_backgrounds = n_samples if n_backgrounds is None else n_backgrounds
    s = spec.image_size
    images = np.empty((n_samples, 3, s, s))
    masks = np.empty((n_samples, 1, s, s))
    for k in range(n_samples):
        scene = sample_scene(spec, rng)
        images[k] = scene.image
        masks[k, 0] = scene.visible[0]
    bgs = np.stack([sample_background(spec.background, s, s, rng) for _ in range(n_backgrounds)])
    return ForegroundDataset(images, masks, bgs)


def histogram_overlap(a: np.ndarray, b: np.ndarray, bins: int = 16) -> float:
    """Sum of per-bin minima of two normalized per-channel histograms, averaged over channels."""
    scores = []
    for ch in range(a.shape[0]):
        ha, _ = np.histogram(a[ch], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(b[ch], bins=bins, range=(0.0, 1.0))
        scores.append(np.minimum(ha / max(ha.sum(), 1), hb / max(hb.sum(), 1)).sum())
    return float(np.mean(scores))


def hoc_spec(image_size: int = 160, n_disks: int = 260, radius: tuple[float, float] = (9.0, 11.0)) -> SceneSpec:
    """Dense structure-free cluster of same-category disks, background hidden."""
    cat = CategorySpec("disk", "disk", radius, (0.15, 0.15, 0.15), (1.0, 1.0, 1.0), texture_amp=0.02)
    bg = BackgroundSpec(black=True)
    return SceneSpec(image_size, (cat,) * n_disks, bg, pose_rule="free")
