"""Run configuration: one flat dataclass, a key=value file format, layer layouts.

File format (versioned)::

    # comments allowed
    config_version = 1
    depth = 4
    layers = 1-3:hard,4:soft

Layer layouts are comma-separated ``range:mode`` items where range is ``i``,
``i-j`` (1-based, inclusive) or ``all`` and mode is ``shared``, ``hard`` or
``soft``. Later items override earlier ones, so ``all:hard,4:soft`` works.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, fields

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class FFNMode(str, enum.Enum):
    SHARED = "shared"
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class LayerSpec:
    mode: FFNMode
    num_experts: int = 1
    top_k: int = 1

    def __post_init__(self):
        if self.mode is FFNMode.HARD and self.num_experts != 2:
            raise ConfigError("a hard-router layer has exactly 2 experts (one per modality)")
        if self.mode is FFNMode.SOFT and not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"soft router needs 1 <= top_k <= num_experts, got k={self.top_k}, N={self.num_experts}")


def parse_layout(text, depth):
    modes = [None] * depth
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            span, mode = item.split(":")
            mode = FFNMode(mode.strip().lower())
        except ValueError:
            raise ConfigError(f"bad layer layout item {item!r}") from None
        span = span.strip().lower()
        if span == "all":
            lo, hi = 1, depth
        elif "-" in span:
            lo, hi = (int(v) for v in span.split("-"))
        else:
            lo = hi = int(span)
        if not 1 <= lo <= hi <= depth:
            raise ConfigError(f"layer range {span!r} outside 1..{depth}")
        for i in range(lo - 1, hi):
            modes[i] = mode
    missing = [i + 1 for i, m in enumerate(modes) if m is None]
    if missing:
        raise ConfigError(f"layout {text!r} leaves layers {missing} unassigned")
    return modes


@dataclass(frozen=True)
class Config:
    # architecture
    depth: int = 4
    dim: int = 64
    heads: int = 4
    layers: str = "1-3:hard,4:soft"
    num_experts: int = 4
    top_k: int = 2
    modality_routing: bool = True
    ffn_ratio: int = 4
    image_size: int = 64
    patch_size: int = 8
    max_text_len: int = 16
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    init_std: float = 0.02
    # objective
    tasks: str = "mlm+mim"
    aux_alpha: float = 0.001
    mask_ratio_image: float = 0.75
    mask_ratio_text: float = 0.5
    simultaneous_masking: bool = False
    norm_pix_target: bool = False
    itc_temperature: float = 0.07
    dropout: float = 0.0
    # optimisation
    batch_size: int = 32
    steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    floor_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    # data
    corpus_size: int = 2000
    grid: int = 2
    augment_flip: bool = True
    augment_crop: bool = False
    # run control
    seed: int = 0
    log_every: int = 1
    router_stats_every: int = 50
    checkpoint_every: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        self.validate()

    # -- derived ---------------------------------------------------------
    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * 3

    @property
    def task_set(self):
        return frozenset(t.strip().lower() for t in self.tasks.split("+") if t.strip())

    def layer_specs(self):
        out = []
        for mode in parse_layout(self.layers, self.depth):
            if mode is FFNMode.SOFT:
                out.append(LayerSpec(mode, self.num_experts, self.top_k))
            elif mode is FFNMode.HARD:
                out.append(LayerSpec(mode, 2, 1))
            else:
                out.append(LayerSpec(mode, 1, 1))
        return out

    def validate(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.depth:
            self.layer_specs()
        for r in (self.mask_ratio_image, self.mask_ratio_text):
            if not 0.0 < r < 1.0:
                raise ConfigError(f"masking ratio {r} outside (0, 1)")
        bad = self.task_set - {"mlm", "mim", "itc", "itm"}
        if bad or not self.task_set:
            raise ConfigError(f"tasks {self.tasks!r}: choose from mlm, mim, itc, itm")
        if self.warmup_steps >= max(self.steps, 1) and self.steps > 0:
            raise ConfigError("warmup_steps must be smaller than steps")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype {self.dtype!r} must be float32 or float64")

    # -- (de)serialisation -----------------------------------------------
    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = [f"# eve config v{CONFIG_VERSION}"]
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self):
        """sha256 over architecture keys only, so training knobs can change on resume."""
        text = "\n".join(f"{k}={_fmt(getattr(self, k))}" for k in ARCH_KEYS)
        return hashlib.sha256(text.encode()).digest()


ARCH_KEYS = (
    "depth", "dim", "heads", "layers", "num_experts", "top_k", "modality_routing",
    "ffn_ratio", "image_size", "patch_size", "max_text_len", "dec_dim", "dec_depth",
    "dec_heads",
)

_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELD_TYPES[key]
    raw = str(raw).strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_text(text):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, raw)
    return values


def load(path=None, overrides=None):
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return Config(**values)


def save(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def tiny():
    return Config()


def base():
    """The 12-layer base layout: hard routers in blocks 1-10, soft top-2 over 32 experts in 11-12."""
    return Config(depth=12, dim=768, heads=12, layers="1-10:hard,11-12:soft", num_experts=32,
                  top_k=2, image_size=224, patch_size=16, max_text_len=40, dec_dim=384,
                  dec_depth=2, dec_heads=12, batch_size=2048, steps=480_000, warmup_steps=10_000,
                  peak_lr=5e-4, corpus_size=2000)
