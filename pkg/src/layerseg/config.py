"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


# file key -> dataclass field, where they differ
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}

# Table 4 rows: layers, dim(z), a, pad
HOC_PRESETS = {
    "crowd": dict(n_layers=8, dim_z=6, area_target=0.1, pad=30),
    "fruit": dict(n_layers=10, dim_z=5, area_target=0.25, pad=32),
    "seed": dict(n_layers=12, dim_z=2, area_target=0.25, pad=26),
}


@dataclass
class TrainConfig:
    task: str = "fg"  # "fg" | "hoc"
    n_layers: int = 2
    lam: float = 1000.0
    area_target: float = 0.25
    beta: float = 0.0
    dim_z: int = 6
    pad: int = 30
    lr_d: float = 0.0002
    lr_g: float = 0.0004
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch: int = 16
    steps: int = 1000
    d_steps: int = 1
    seed: int = 0
    precision: int = 32
    width: float = 1.0
    image_size: int = 128
    n_power_iter: int = 1
    bg_mode: str = "mixed"  # hoc backgrounds: "black" | "disk" | "mixed"
    bg_black_fraction: float = 0.5
    disk_radius: float = 20.0
    distill_steps: int = 1000
    distill_lr: float = 0.0002
    distill_flip: bool = True
    n_train: int = 2000
    n_test: int = 200
    n_backgrounds: int = 2000
    log_every: int = 100
    dump_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in ("fg", "hoc"):
            raise ConfigError(f"task must be 'fg' or 'hoc', got {self.task!r}")
        for name in ("steps", "batch", "n_layers", "d_steps", "n_power_iter", "dim_z"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lambda and beta must be non-negative")
        if not 0 < self.area_target < 1:
            raise ConfigError(f"area_target must lie in (0, 1), got {self.area_target}")
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if self.bg_mode not in ("black", "disk", "mixed"):
            raise ConfigError(f"bg_mode must be black|disk|mixed, got {self.bg_mode!r}")
        if self.width <= 0:
            raise ConfigError("width must be positive")
        if self.image_size % 64:
            raise ConfigError(f"image_size must be a multiple of 64, got {self.image_size}")

    @classmethod
    def foreground(cls, **overrides) -> "TrainConfig":
        """Foreground task with the first application's hyperparameters (lambda=1000, a=0.25)."""
        base = dict(task="fg", n_layers=2, lam=1000.0, area_target=0.25, beta=0.0, image_size=128)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def hoc(cls, dataset: str = "crowd", **overrides) -> "TrainConfig":
        """HOC task with the second application's per-image hyperparameters."""
        if dataset not in HOC_PRESETS:
            raise ConfigError(f"unknown HOC preset {dataset!r}; choose from {sorted(HOC_PRESETS)}")
        base = dict(task="hoc", lam=1000.0, beta=50.0, image_size=64, **HOC_PRESETS[dataset])
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{_REVERSE.get(f.name, f.name)} = {v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, typ):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[name] = _coerce(key, raw, known[name])
    if base is None:
        task = values.get("task", "fg")
        base = TrainConfig.hoc() if task == "hoc" else TrainConfig.foreground()
    try:
        return replace(base, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base)
