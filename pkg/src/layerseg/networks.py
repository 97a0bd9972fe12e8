"""Network builders following the appendix layer tables.

Every builder takes a ``width`` multiplier that scales hidden channel counts;
``width=1.0`` reproduces the tables exactly. Output channel counts (score, mask,
RGBA, latent) are never scaled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor

LRELU_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv" | "fc" (1x1 conv over a 1x1 map)
    kernel: int
    out_channels: int
    stride: int
    norm: str = "none"  # "sn" | "bn" | "none"
    activation: str = "lrelu"  # "lrelu" | "sigmoid" | "lrelu+sigmoid" | "none"
    scale: bool = True  # whether the width multiplier applies to out_channels

    def padding(self):
        """Padding as (top, bottom, left, right)."""
        k, s = self.kernel, self.stride
        if self.kind == "deconv":
            if (k - s) % 2:
                raise ValueError(f"deconv k={k}, s={s} cannot reach an exact {s}x upsample")
            p = (k - s) // 2
            return (p, p, p, p)
        if s >= 2:
            p = (k - 1) // 2
            return (p, p, p, p)
        # stride-1 "same": extra row/column goes after
        lo, hi = (k - 1) // 2, k // 2
        return (lo, hi, lo, hi)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        t, b, l, r = self.padding()
        if self.kind == "deconv":
            return (h - 1) * self.stride - t - b + self.kernel, (w - 1) * self.stride - l - r + self.kernel
        return (
            T.conv_output_size(h, self.kernel, self.stride, t, b),
            T.conv_output_size(w, self.kernel, self.stride, l, r),
        )


def _sn(k, c, s, act="lrelu", scale=True):
    return LayerSpec("conv", k, c, s, "sn", act, scale)


def _bn(kind, k, c, s, act="lrelu", norm="bn", scale=True):
    return LayerSpec(kind, k, c, s, norm, act, scale)


DISCRIMINATOR_128 = (
    _sn(3, 64, 2),
    _sn(3, 128, 2),
    _sn(3, 256, 2),
    _sn(3, 512, 2),
    _sn(3, 256, 1),
    _sn(1, 1, 1, "lrelu+sigmoid", scale=False),
)

DISCRIMINATOR_64 = (
    _sn(3, 64, 2),
    _sn(3, 128, 2),
    _sn(3, 256, 2),
    _sn(3, 512, 2),
    _sn(3, 1024, 1),
    _sn(1, 1, 1, "lrelu+sigmoid", scale=False),
)

UNET_ENCODER = (
    _bn("conv", 4, 64, 2),
    _bn("conv", 4, 128, 2),
    _bn("conv", 4, 256, 2),
    _bn("conv", 4, 512, 2),
    _bn("conv", 4, 512, 2),
    _bn("conv", 2, 512, 2),
)

UNET_DECODER = (
    _bn("deconv", 2, 512, 2),
    _bn("deconv", 4, 512, 2),
    _bn("deconv", 4, 256, 2),
    _bn("deconv", 4, 128, 2),
    _bn("deconv", 4, 64, 2),
    _bn("deconv", 4, 1, 2, "sigmoid", norm="none", scale=False),
)

GENERATOR_BASE = 256  # 1x1 conv to 8*8*256, reshaped to 8x8x256

GENERATOR_BODY = (
    _bn("conv", 4, 256, 1),
    _bn("conv", 4, 256, 1),
    _bn("deconv", 4, 128, 2),
    _bn("deconv", 4, 64, 2),
    _bn("deconv", 4, 4, 2, "sigmoid", norm="none", scale=False),
)

Q_HEAD = (
    _bn("conv", 4, 64, 2, norm="none"),
    _bn("conv", 4, 128, 2, norm="none"),
    _bn("conv", 4, 256, 2, norm="none"),
)


def scaled(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "none":
        return x
    if activation == "lrelu":
        return T.leaky_relu(x, LRELU_SLOPE)
    if activation == "sigmoid":
        return T.sigmoid(x)
    if activation == "lrelu+sigmoid":
        return T.sigmoid(T.leaky_relu(x, LRELU_SLOPE))
    raise ValueError(f"unknown activation {activation!r}")


class Block(Module):
    """One table row: conv/deconv, optional BN, activation."""

    def __init__(self, spec: LayerSpec, in_channels: int, out_channels: int, rng, n_power_iter: int = 1):
        super().__init__()
        self.spec = spec
        pad = spec.padding()
        use_bias = spec.norm != "bn"
        if spec.kind == "deconv":
            self.conv = ConvTranspose2d(in_channels, out_channels, spec.kernel, spec.stride, pad, use_bias, rng=rng)
        else:
            self.conv = Conv2d(
                in_channels,
                out_channels,
                spec.kernel,
                spec.stride,
                pad,
                use_bias,
                spectral=spec.norm == "sn",
                n_power_iter=n_power_iter,
                rng=rng,
            )
        self.bn = BatchNorm2d(out_channels) if spec.norm == "bn" else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return _activate(y, self.spec.activation)


def _channels(specs: Sequence[LayerSpec], width: float) -> list[int]:
    return [scaled(s.out_channels, width) if s.scale else s.out_channels for s in specs]


class SpecNet(Module):
    """A plain feed-forward stack of table rows."""

    def __init__(self, specs: Sequence[LayerSpec], in_channels: int, width: float, rng, n_power_iter: int = 1):
        super().__init__()
        self.specs = tuple(specs)
        self.blocks: list[Block] = []
        c = in_channels
        for i, (spec, out_c) in enumerate(zip(self.specs, _channels(self.specs, width))):
            block = Block(spec, c, out_c, rng, n_power_iter)
            self.add_module(f"l{i}", block)
            self.blocks.append(block)
            c = out_c
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def layer_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        shapes = []
        for spec, c in zip(self.specs, (b.conv.weight.shape[1 if b.spec.kind == "deconv" else 0] for b in self.blocks)):
            h, w = spec.output_hw(h, w)
            shapes.append((c, h, w))
        return shapes


class Discriminator(SpecNet):
    """SN discriminator ending in a sigmoid score map; D(x) is the map's mean."""

    def __init__(self, specs, width: float = 1.0, rng=None, n_power_iter: int = 1, in_channels: int = 3):
        super().__init__(specs, in_channels, width, rng, n_power_iter)

    def score(self, x: Tensor) -> Tensor:
        return T.mean(self.forward(x), axis=(1, 2, 3))


class UNet(Module):
    """Encoder/decoder with channel-concatenated skips at equal resolutions."""

    def __init__(self, width: float = 1.0, rng=None, in_channels: int = 3):
        super().__init__()
        enc_c = _channels(UNET_ENCODER, width)
        dec_c = _channels(UNET_DECODER, width)
        self.encoder: list[Block] = []
        c = in_channels
        for i, (spec, out_c) in enumerate(zip(UNET_ENCODER, enc_c)):
            block = Block(spec, c, out_c, rng)
            self.add_module(f"enc{i}", block)
            self.encoder.append(block)
            c = out_c
        self.decoder: list[Block] = []
        skips = enc_c[-2::-1]  # encoder outputs at matching resolutions, deepest first
        for i, (spec, out_c) in enumerate(zip(UNET_DECODER, dec_c)):
            block = Block(spec, c, out_c, rng)
            self.add_module(f"dec{i}", block)
            self.decoder.append(block)
            c = out_c + (skips[i] if i < len(skips) else 0)
        self.factor = 2 ** len(UNET_ENCODER)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"UNet input must be a multiple of {self.factor} in each dimension, got {h}x{w}")
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        skips = feats[-2::-1]
        for i, block in enumerate(self.decoder):
            x = block(x)
            if i < len(skips):
                x = T.concat([x, skips[i]], axis=1)
        return x


class InstanceGenerator(Module):
    """Maps a latent code to a 64x64 RGBA layer (sigmoid output)."""

    def __init__(self, dim_z: int, width: float = 1.0, rng=None):
        super().__init__()
        if dim_z <= 0:
            raise ValueError(f"dim_z must be positive, got {dim_z}")
        self.dim_z = dim_z
        self.base = scaled(GENERATOR_BASE, width)
        # 1x1 conv to 8*8*base; BN runs after the reshape, per feature-map channel
        self.fc = Conv2d(dim_z, 8 * 8 * self.base, 1, 1, 0, bias=False, rng=rng)
        self.fc_bn = BatchNorm2d(self.base)
        self.body = SpecNet(GENERATOR_BODY, self.base, width, rng)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.dim_z:
            raise ValueError(f"z must be (N, {self.dim_z}), got {z.shape}")
        n = z.shape[0]
        h = self.fc(T.reshape(z, (n, self.dim_z, 1, 1)))
        h = T.leaky_relu(self.fc_bn(T.reshape(h, (n, self.base, 8, 8))), LRELU_SLOPE)
        return self.body(h)


class QHead(Module):
    """Predicts the latent code back from a generated RGBA layer."""

    def __init__(self, dim_z: int, width: float = 1.0, rng=None, in_channels: int = 4):
        super().__init__()
        self.dim_z = dim_z
        self.trunk = SpecNet(Q_HEAD, in_channels, width, rng)
        self.out = Conv2d(self.trunk.out_channels, dim_z, 1, 1, 0, rng=rng)

    def forward(self, layer: Tensor) -> Tensor:
        return T.mean(self.out(self.trunk(layer)), axis=(2, 3))


def _rng(rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng(0)
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _built(factory, precision: int | None):
    if precision is None:
        return factory()
    with T.precision(precision):
        return factory()


def build_discriminator_128(precision: int | None = None, width: float = 1.0, rng=None, n_power_iter: int = 1) -> Discriminator:
    return _built(lambda: Discriminator(DISCRIMINATOR_128, width, _rng(rng), n_power_iter), precision)


def build_discriminator_64(precision: int | None = None, width: float = 1.0, rng=None, n_power_iter: int = 1) -> Discriminator:
    return _built(lambda: Discriminator(DISCRIMINATOR_64, width, _rng(rng), n_power_iter), precision)


def build_unet(precision: int | None = None, width: float = 1.0, rng=None) -> UNet:
    return _built(lambda: UNet(width, _rng(rng)), precision)


def build_instance_generator(dim_z: int, precision: int | None = None, width: float = 1.0, rng=None) -> InstanceGenerator:
    if dim_z <= 0:
        raise ValueError(f"dim_z must be positive, got {dim_z}")
    return _built(lambda: InstanceGenerator(dim_z, width, _rng(rng)), precision)


def build_q_head(dim_z: int, precision: int | None = None, width: float = 1.0, rng=None) -> QHead:
    return _built(lambda: QHead(dim_z, width, _rng(rng)), precision)


def zero_parameters(net: Module) -> None:
    for p in net.named_parameters().values():
        p.data[...] = 0.0
