"""Adversarial training loops (foreground task, HOC task) and data distillation.

All randomness for step ``t`` comes from streams seeded by (run seed, slot,
step), so a run restored from a checkpoint continues exactly like an
uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .compositor import LayerStack, RgbaLayer, composite, paste_foreground
from .config import TrainConfig, parse_config_text
from .layout import pad_crop, pad_crop_offsets
from .losses import (
    CSV_HEADER,
    LossReport,
    LossWeights,
    discriminator_loss,
    generator_adv_loss,
    info_regularizer,
    mask_area_penalty,
    smooth_l1,
    total_generator_loss,
)
from .metrics import MetricReport, mask_report, miou
from .networks import build_discriminator_64, build_discriminator_128, build_instance_generator, build_q_head, build_unet
from .nn import Module
from .optim import Adam, OptState
from .providers import (
    STREAM_AUGMENT,
    STREAM_BACKGROUND,
    STREAM_DATA,
    STREAM_LATENT,
    STREAM_LAYOUT,
    background_patch_sampler,
    hoc_backgrounds,
    sample_latents,
    segmentation_provider,
    slot_rng,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STREAM_INIT = 9


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunArtifacts:
    trace: list[LossReport] = field(default_factory=list)
    checkpoint: Checkpoint | None = None
    checkpoint_path: Path | None = None
    dumps: list[Path] = field(default_factory=list)
    distill_losses: list[float] = field(default_factory=list)


def write_trace(trace: list[LossReport], path: str | Path) -> None:
    Path(path).write_text("\n".join([CSV_HEADER] + [r.csv_row() for r in trace]) + "\n", encoding="utf-8")


def init_rng(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_INIT, which]))


def _zero(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _finite(report: LossReport) -> LossReport:
    if not report.is_finite():
        raise DivergenceError(f"non-finite loss at step {report.step}: {report}")
    return report


def predict_masks(unet: Module, images: np.ndarray, batch: int = 50) -> np.ndarray:
    """Eval-mode masks for (N, 3, H, W) images."""
    was_training = unet.training
    unet.eval()
    try:
        out = [unet(Tensor(images[i : i + batch])).data for i in range(0, len(images), batch)]
    finally:
        unet.train(was_training)
    return np.concatenate(out)


def sample_instances(generator: Module, n: int, seed: int, batch: int = 50, train_mode: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` latents and the RGBA layers the generator maps them to."""
    z = sample_latents(n, generator.dim_z, slot_rng(seed, 0, 0, STREAM_LATENT))
    was_training = generator.training
    generator.train(train_mode)
    try:
        out = [generator(Tensor(z[i : i + batch])).data for i in range(0, n, batch)]
    finally:
        generator.train(was_training)
    return z, np.concatenate(out)


class Trainer:
    kind = ""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.step_index = 0
        self.nets: dict[str, Module] = {}
        self.opts: dict[str, Adam] = {}
        self.trace: list[LossReport] = []

    # --- persistence

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        for net_name, net in self.nets.items():
            for k, arr in net.state_arrays().items():
                tensors[f"{net_name}.{k}"] = arr.copy()
        optimizers = {}
        for name, opt in self.opts.items():
            st = opt.state
            optimizers[name] = OptState({k: v.copy() for k, v in st.m.items()}, {k: v.copy() for k, v in st.v.items()}, st.t)
        rng_state = {"kind": self.kind, "seed": self.config.seed, "step": self.step_index}
        return Checkpoint(tensors, optimizers, self.config.to_text(), rng_state)

    def load(self, ckpt: Checkpoint) -> None:
        kind = ckpt.rng_state.get("kind")
        if kind != self.kind:
            raise ValueError(f"checkpoint holds a {kind!r} run, not {self.kind!r}")
        for net_name, net in self.nets.items():
            prefix = net_name + "."
            net.load_state_arrays({k[len(prefix) :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
        for name, opt in self.opts.items():
            st = ckpt.optimizers[name]
            dtype = T.get_dtype()
            opt.state = OptState(
                {k: v.astype(dtype) for k, v in st.m.items()}, {k: v.astype(dtype) for k, v in st.v.items()}, st.t
            )
        self.step_index = int(ckpt.rng_state["step"])

    # --- loop

    def step(self) -> LossReport:
        raise NotImplementedError

    def dump(self, out_dir: Path) -> list[Path]:
        return []

    def run(self, steps: int | None = None, out_dir: str | Path | None = None) -> RunArtifacts:
        cfg = self.config
        steps = cfg.steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        arts = RunArtifacts()
        with T.precision(cfg.precision):
            for _ in range(steps):
                report = self.step()
                arts.trace.append(report)
                t = report.step
                if cfg.log_every and (t + 1) % cfg.log_every == 0:
                    log.info("step %d %s", t, report)
                if out is not None and cfg.dump_every and (t + 1) % cfg.dump_every == 0:
                    arts.dumps += self.dump(out)
                if out is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(self.checkpoint(), out / "checkpoint.bin")
            arts.checkpoint = self.checkpoint()
        if out is not None:
            write_trace(arts.trace, out / "trace.csv")
            arts.checkpoint_path = out / "checkpoint.bin"
            save_checkpoint(arts.checkpoint, arts.checkpoint_path)
        return arts

    def _d_step(self, disc, opt_d: Adam, real: Tensor, fake: Tensor) -> float:
        _zero(opt_d.params)
        with Tape() as tape:
            loss_d = discriminator_loss(disc.score(real), disc.score(fake))
        tape.backward(loss_d)
        opt_d.step()
        return loss_d.item()


class ForegroundTrainer(Trainer):
    """Segmenter-as-provider: carve the foreground, paste it on a random background."""

    kind = "fg"

    def __init__(self, config: TrainConfig, images: np.ndarray, bg_corpus: np.ndarray):
        super().__init__(config)
        with T.precision(config.precision):
            dtype = T.get_dtype()
            self.images = np.ascontiguousarray(images, dtype=dtype)
            self.bg_corpus = np.ascontiguousarray(bg_corpus, dtype=dtype)
            self.unet = build_unet(width=config.width, rng=init_rng(config.seed, 0))
            self.disc = build_discriminator_128(width=config.width, rng=init_rng(config.seed, 1), n_power_iter=config.n_power_iter)
        self.nets = {"unet": self.unet, "disc": self.disc}
        b1, b2 = config.adam_beta1, config.adam_beta2
        self.opt_g = Adam(self.unet.named_parameters(), config.lr_g, b1, b2)
        self.opt_d = Adam(self.disc.named_parameters(), config.lr_d, b1, b2)
        self.opts = {"g": self.opt_g, "d": self.opt_d}
        self.weights = LossWeights(config.lam, config.area_target, 0.0)
        self._last: tuple | None = None

    def step(self) -> LossReport:
        cfg = self.config
        t = self.step_index
        with T.precision(cfg.precision):
            n, (h, w) = len(self.images), self.images.shape[2:]
            rng = slot_rng(cfg.seed, 0, t, STREAM_DATA)
            src = Tensor(self.images[rng.integers(n, size=cfg.batch)])
            bg = background_patch_sampler(self.bg_corpus, (h, w), slot_rng(cfg.seed, 1, t, STREAM_BACKGROUND), cfg.batch)
            g_tape = Tape()
            with g_tape:
                fg = segmentation_provider(src, self.unet)
                fake = paste_foreground(fg, bg.appearance)
            for k in range(cfg.d_steps):
                real = Tensor(self.images[slot_rng(cfg.seed, 2, t * cfg.d_steps + k, STREAM_DATA).integers(n, size=cfg.batch)])
                loss_d = self._d_step(self.disc, self.opt_d, real, fake.detach())
            _zero(self.opt_g.params)
            self.disc.set_requires_grad(False)
            try:
                with g_tape:
                    adv = generator_adv_loss(self.disc.score(fake))
                    area = mask_area_penalty([fg.mask], cfg.area_target)
                    total = total_generator_loss(adv, area, 0.0, self.weights)
            finally:
                self.disc.set_requires_grad(True)
            g_tape.backward(total)
            self.opt_g.step()
            self._last = (src.data, fg.mask.data, bg.appearance.data, fake.data)
        self.step_index += 1
        report = LossReport(t, loss_d, adv.item(), area.item(), 0.0, total.item())
        self.trace.append(report)
        return _finite(report)

    def dump(self, out_dir: Path) -> list[Path]:
        from .render import save_foreground_grid

        if self._last is None:
            return []
        src, masks, bgs, fakes = self._last
        path = out_dir / f"step{self.step_index:06d}.ppm"
        save_foreground_grid(src[:8], masks[:8], fakes[:8], path)
        return [path]


class HocTrainer(Trainer):
    """Shared noise-to-RGBA providers, pad-and-crop layout, punched backgrounds."""

    kind = "hoc"

    def __init__(self, config: TrainConfig, patches: np.ndarray):
        super().__init__(config)
        with T.precision(config.precision):
            self.patches = np.ascontiguousarray(patches, dtype=T.get_dtype())
            self.gen = build_instance_generator(config.dim_z, width=config.width, rng=init_rng(config.seed, 0))
            self.q = build_q_head(config.dim_z, width=config.width, rng=init_rng(config.seed, 2))
            self.disc = build_discriminator_64(width=config.width, rng=init_rng(config.seed, 1), n_power_iter=config.n_power_iter)
        if self.patches.shape[1:] != (3, 64, 64):
            raise ValueError(f"HOC patches must be (N, 3, 64, 64), got {self.patches.shape}")
        self.nets = {"gen": self.gen, "q": self.q, "disc": self.disc}
        b1, b2 = config.adam_beta1, config.adam_beta2
        g_params = dict(self.gen.named_parameters("gen."))
        if config.beta > 0:
            g_params.update(self.q.named_parameters("q."))
        self.opt_g = Adam(g_params, config.lr_g, b1, b2)
        self.opt_d = Adam(self.disc.named_parameters(), config.lr_d, b1, b2)
        self.opts = {"g": self.opt_g, "d": self.opt_d}
        self.weights = LossWeights(config.lam, config.area_target, config.beta)
        self._last: tuple | None = None

    def provide(self, t: int):
        """One independent provider call per slot, each on its own latent stream."""
        cfg = self.config
        zs, rgbas, placed = [], [], []
        for slot in range(1, cfg.n_layers + 1):
            z = sample_latents(cfg.batch, cfg.dim_z, slot_rng(cfg.seed, slot, t, STREAM_LATENT))
            rgba = self.gen(Tensor(z))
            ox, oy = pad_crop_offsets(cfg.batch, cfg.pad, slot_rng(cfg.seed, slot, t, STREAM_LAYOUT))
            zs.append(z)
            rgbas.append(rgba)
            placed.append(pad_crop(RgbaLayer.from_rgba(rgba), cfg.pad, ox, oy))
        return zs, rgbas, placed

    def step(self) -> LossReport:
        cfg = self.config
        t = self.step_index
        with T.precision(cfg.precision):
            n = len(self.patches)
            rng = slot_rng(cfg.seed, 0, t, STREAM_DATA)
            bg_src = self.patches[rng.integers(n, size=cfg.batch)]
            bg = hoc_backgrounds(bg_src, cfg.disk_radius, cfg.bg_mode, slot_rng(cfg.seed, 0, t, STREAM_BACKGROUND), cfg.bg_black_fraction)
            g_tape = Tape()
            with g_tape:
                zs, rgbas, placed = self.provide(t)
                fake = composite(LayerStack([bg] + placed))
            for k in range(cfg.d_steps):
                real = Tensor(self.patches[slot_rng(cfg.seed, 2, t * cfg.d_steps + k, STREAM_DATA).integers(n, size=cfg.batch)])
                loss_d = self._d_step(self.disc, self.opt_d, real, fake.detach())
            _zero(self.opt_g.params)
            self.disc.set_requires_grad(False)
            try:
                with g_tape:
                    adv = generator_adv_loss(self.disc.score(fake))
                    area = mask_area_penalty([r[:, 3:4] for r in rgbas], cfg.area_target)
                    if cfg.beta > 0:
                        # the Q head has no batch coupling, so all slots go through it at once
                        pred = self.q(T.concat(rgbas, axis=0))
                        info = info_regularizer(pred, Tensor(np.concatenate(zs)))
                    else:
                        info = Tensor(0.0)
                    total = total_generator_loss(adv, area, info, self.weights)
            finally:
                self.disc.set_requires_grad(True)
            g_tape.backward(total)
            self.opt_g.step()
            self._last = (bg.appearance.data, [r.data for r in rgbas], fake.data)
        self.step_index += 1
        report = LossReport(t, loss_d, adv.item(), area.item(), info.item(), total.item())
        self.trace.append(report)
        return _finite(report)

    def dump(self, out_dir: Path) -> list[Path]:
        from .render import save_hoc_grid

        if self._last is None:
            return []
        _, rgbas, fakes = self._last
        path = out_dir / f"step{self.step_index:06d}.ppm"
        save_hoc_grid(np.stack([r[0] for r in rgbas]), fakes[:8], path)
        return [path]


class DistillTrainer(Trainer):
    """Student segmenter trained on teacher-carved composites with smooth-L1 targets."""

    kind = "distill"

    def __init__(self, config: TrainConfig, teacher: Module, images: np.ndarray, bg_corpus: np.ndarray):
        super().__init__(config)
        with T.precision(config.precision):
            dtype = T.get_dtype()
            self.images = np.ascontiguousarray(images, dtype=dtype)
            self.bg_corpus = np.ascontiguousarray(bg_corpus, dtype=dtype)
            # teacher outputs are computed once, in eval mode
            self.targets = predict_masks(teacher, self.images).astype(dtype)
            self.unet = build_unet(width=config.width, rng=init_rng(config.seed, 3))
        self.nets = {"unet": self.unet}
        self.opt = Adam(self.unet.named_parameters(), config.distill_lr, config.adam_beta1, config.adam_beta2)
        self.opts = {"g": self.opt}
        self.losses: list[float] = []

    def batch(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        n, (h, w) = len(self.images), self.images.shape[2:]
        idx = slot_rng(cfg.seed, 0, t, STREAM_DATA).integers(n, size=cfg.batch)
        bg = background_patch_sampler(self.bg_corpus, (h, w), slot_rng(cfg.seed, 1, t, STREAM_BACKGROUND), cfg.batch)
        target = self.targets[idx]
        inputs = paste_foreground(RgbaLayer(Tensor(self.images[idx]), Tensor(target)), bg.appearance).data
        if cfg.distill_flip:
            flip = slot_rng(cfg.seed, 0, t, STREAM_AUGMENT).uniform(size=cfg.batch) < 0.5
            inputs = np.where(flip[:, None, None, None], inputs[..., ::-1], inputs)
            target = np.where(flip[:, None, None, None], target[..., ::-1], target)
        return np.ascontiguousarray(inputs), np.ascontiguousarray(target)

    def step(self) -> LossReport:
        cfg = self.config
        t = self.step_index
        with T.precision(cfg.precision):
            inputs, target = self.batch(t)
            _zero(self.opt.params)
            with Tape() as tape:
                loss = distill_loss(self.unet(Tensor(inputs)), Tensor(target))
            tape.backward(loss)
            self.opt.step()
        self.step_index += 1
        value = loss.item()
        self.losses.append(value)
        report = LossReport(t, 0.0, 0.0, 0.0, 0.0, value)
        return _finite(report)


def distill_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-pixel smooth-L1 between student and teacher masks, averaged."""
    return T.mean(smooth_l1(pred - target))


# ------------------------------------------------------------------ entry points


def train_foreground(config: TrainConfig, dataset, bg_corpus=None, out_dir=None, resume: Checkpoint | None = None) -> RunArtifacts:
    images = dataset.images if hasattr(dataset, "images") else dataset
    corpus = bg_corpus if bg_corpus is not None else dataset.backgrounds
    trainer = ForegroundTrainer(config, images, corpus)
    if resume is not None:
        with T.precision(config.precision):
            trainer.load(resume)
    remaining = max(config.steps - trainer.step_index, 0)
    return trainer.run(remaining, out_dir)


def train_hoc(config: TrainConfig, patches: np.ndarray, out_dir=None, resume: Checkpoint | None = None) -> RunArtifacts:
    trainer = HocTrainer(config, patches)
    if resume is not None:
        with T.precision(config.precision):
            trainer.load(resume)
    remaining = max(config.steps - trainer.step_index, 0)
    return trainer.run(remaining, out_dir)


def unet_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None) -> Module:
    config = config or parse_config_text(ckpt.config_text)
    with T.precision(config.precision):
        unet = build_unet(width=config.width)
        unet.load_state_arrays({k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("unet.")})
    return unet.eval()


def generator_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None) -> Module:
    config = config or parse_config_text(ckpt.config_text)
    with T.precision(config.precision):
        gen = build_instance_generator(config.dim_z, width=config.width)
        gen.load_state_arrays({k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("gen.")})
    return gen.eval()


def distill(teacher: Checkpoint | Module, dataset, bg_corpus=None, config: TrainConfig | None = None, out_dir=None) -> RunArtifacts:
    """Train a student segmenter from a trained foreground run."""
    if isinstance(teacher, Checkpoint):
        teacher_cfg = parse_config_text(teacher.config_text)
        config = config or teacher_cfg
        teacher = unet_from_checkpoint(teacher, teacher_cfg)
    if config is None:
        raise ValueError("a config is required when the teacher is a live network")
    images = dataset.images if hasattr(dataset, "images") else dataset
    corpus = bg_corpus if bg_corpus is not None else dataset.backgrounds
    trainer = DistillTrainer(config, teacher, images, corpus)
    arts = trainer.run(config.distill_steps, out_dir)
    arts.distill_losses = list(trainer.losses)
    return arts


def evaluate_foreground(unet: Module, images: np.ndarray, masks: np.ndarray, precision: int = 32) -> MetricReport:
    with T.precision(precision):
        pred = predict_masks(unet, np.asarray(images, dtype=T.get_dtype()))
    report = mask_report(pred)
    report.miou = miou(pred, masks)
    return report


def evaluate_hoc(generator: Module, n: int = 100, seed: int = 12345, precision: int = 32, train_mode: bool = False) -> MetricReport:
    with T.precision(precision):
        _, rgba = sample_instances(generator, n, seed, train_mode=train_mode)
    return mask_report(rgba[:, 3:4])


def divergence_guard(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite value at step {step}")
