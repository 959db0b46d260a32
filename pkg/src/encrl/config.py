"""Experiment configuration and its flat ``section.key=value`` text format.

Example::

    env.kind=gridroom
    env.size=5
    env.start_mode=fixed
    scheme.kind=aes_ecb
    scheme.key_len=32
    padding.mode=custom
    seeds=0,1,2,3,4
    train.episodes=2000

Blank lines and lines starting with ``#`` are ignored. Unknown keys are
errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from encrl.cipher import SchemeSpec
from encrl.envcore.gridroom import SUPPORTED_SIZES
from encrl.errors import ConfigError
from encrl.pipeline import PaddingSpec

ENV_KINDS = ("gridroom", "landerlite", "chain")

DEFAULT_EPISODES = {5: 2000, 6: 2000, 8: 5000, 16: 15000, "landerlite": 2000, "chain": 300}


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "gridroom"
    size: int = 5
    start_mode: str = "fixed"
    px_per_tile: int = 8

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env.kind: unknown environment {self.kind!r}")
        if self.kind == "gridroom" and self.size not in SUPPORTED_SIZES:
            raise ConfigError(f"env.size: unsupported grid size {self.size}")
        if self.kind == "chain" and self.size < 1:
            raise ConfigError("env.size: chain length must be >= 1")
        if self.start_mode not in ("fixed", "random"):
            raise ConfigError(f"env.start_mode: unknown mode {self.start_mode!r}")
        if self.px_per_tile < 1:
            raise ConfigError("env.px_per_tile: must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "gridroom":
            return f"{self.size}x{self.size}"
        return self.kind


@dataclass(frozen=True)
class TrainParams:
    episodes: int = 0  # 0 -> environment-dependent default
    gamma: float = 0.99
    replay_capacity: int = 50_000
    batch_size: int = 32
    lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    target_sync: int = 500
    warmup_steps: int = 1_000
    train_every: int = 1
    huber_delta: float = 1.0
    final_window: int = 100

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("train.gamma: must be in [0, 1)")
        for name in ("replay_capacity", "batch_size", "target_sync", "train_every", "final_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        if self.batch_size > self.replay_capacity:
            raise ConfigError("train.batch_size: exceeds replay capacity")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.{name}: must be in [0, 1]")
        if self.episodes < 0 or self.eps_decay_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("train: episodes, eps_decay_steps and warmup_steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr: must be positive")


@dataclass(frozen=True)
class NetConfig:
    conv: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 1))
    conv_padding: int = 1
    hidden_cnn: tuple[int, ...] = (64,)
    hidden_mlp: tuple[int, ...] = (64, 64)
    dtype: str = "float32"


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    scheme: SchemeSpec = field(default_factory=SchemeSpec)
    padding: PaddingSpec = field(default_factory=PaddingSpec)
    train: TrainParams = field(default_factory=TrainParams)
    net: NetConfig = field(default_factory=NetConfig)
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: must be distinct")
        if self.env.kind != "gridroom" and self.padding.mode != "pkcs7":
            raise ConfigError(f"padding.mode: {self.env.kind} states only support pkcs7")

    @property
    def episodes(self) -> int:
        if self.train.episodes:
            return self.train.episodes
        if self.env.kind == "gridroom":
            return DEFAULT_EPISODES[self.env.size]
        return DEFAULT_EPISODES[self.env.kind]

    @property
    def name(self) -> str:
        """Filesystem-safe identifier of the configuration (seeds excluded)."""
        start = f"_{self.env.start_mode}" if self.env.kind == "gridroom" else ""
        scheme = self.scheme.kind + (f"{self.scheme.key_len}" if self.scheme.kind.startswith("aes") else "")
        return f"{self.env.kind}{self.env.label if self.env.kind == 'gridroom' else ''}{start}_{scheme}_{self.padding.mode}"

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> ExperimentConfig:
        flat = to_flat(self)
        for k, v in pairs.items():
            if k not in flat:
                raise ConfigError(f"{k}: unknown configuration key")
            flat[k] = v
        return from_flat(flat)


_SECTIONS = {"env": EnvConfig, "scheme": SchemeSpec, "padding": PaddingSpec, "train": TrainParams, "net": NetConfig}


def _fmt(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in item) for item in value)
        return ",".join(str(v) for v in value)
    return str(value) if not isinstance(value, float) else repr(value)


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[int, ...]:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if typ == tuple[tuple[int, int, int], ...]:
            items = [v for v in raw.split(",") if v.strip()]
            out = tuple(tuple(int(p) for p in v.split("x")) for v in items)
            if any(len(t) != 3 for t in out):
                raise ValueError("expected CHANNELSxKERNELxSTRIDE")
            return out
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            flat[f"{section}.{f.name}"] = _fmt(getattr(obj, f.name))
    flat["seeds"] = _fmt(cfg.seeds)
    flat["out_dir"] = cfg.out_dir
    return flat


def from_flat(flat: dict[str, str]) -> ExperimentConfig:
    parts: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict = {}
    for key, raw in flat.items():
        if key == "seeds":
            top["seeds"] = _coerce(key, raw, tuple[int, ...])
        elif key == "out_dir":
            top["out_dir"] = raw.strip()
        else:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"{key}: unknown configuration key")
            hints = typing.get_type_hints(_SECTIONS[section])
            if name not in hints:
                raise ConfigError(f"{key}: unknown configuration key")
            parts[section][name] = _coerce(key, raw, hints[name])
    built = {}
    for section, cls in _SECTIONS.items():
        try:
            built[section] = cls(**parts[section])
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from None
    return ExperimentConfig(**built, **top)


def serialize(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_flat(cfg).items())


def parse(text: str) -> ExperimentConfig:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        flat[key.strip()] = value
    return from_flat(flat)


def load(path: str | Path) -> ExperimentConfig:
    return parse(Path(path).read_text())
