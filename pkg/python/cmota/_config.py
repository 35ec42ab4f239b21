"""Configuration for cmota runs.

Values resolve in this order, later sources winning: preset, TOML config
file, ``CMOTA_*`` environment variables, command-line flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cmota.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger("cmota")

ENV_PREFIX = "CMOTA_"
TOPOLOGIES = ("none", "all_level", "partial_level")
AUGMENTATIONS = ("none", "offline", "online")
ALTERNATIONS = ("joint", "alternate")
PRECISIONS = ("float32", "float64")


def stable_hash(value: Any) -> str:
    """SHA-256 of canonical JSON (sorted keys, no whitespace)."""
    blob = json.dumps(value, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class WorldConfig:
    """Synthetic story-world: rosters, rendering and split sizes."""

    backgrounds: tuple[str, ...] = ("snow", "forest", "room", "beach")
    characters: tuple[str, ...] = ("pororo", "crong", "eddy", "loopy", "poby", "harry")
    actions: tuple[str, ...] = ("walk", "run", "jump", "sit", "wave", "sleep", "eat", "laugh")
    frames: int = 5
    image_size: int = 32
    channels: int = 3
    max_characters: int = 3
    p_context: float = 1.0
    p_friends: float = 0.2
    held_out_templates: int = 2
    detect_threshold: float = 40.0
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100

    def validate(self) -> None:
        if self.frames < 2:
            raise ConfigError("world.frames must be at least 2")
        if not 0.0 <= self.p_context <= 1.0 or not 0.0 <= self.p_friends <= 1.0:
            raise ConfigError("world probabilities must lie in [0, 1]")
        if self.image_size % 32:
            raise ConfigError("world.image_size must be a multiple of 32 (sprite art is 32x32)")
        if not 1 <= self.max_characters <= 3:
            raise ConfigError("world.max_characters must be 1, 2 or 3")
        if self.channels != 3:
            raise ConfigError("world.channels must be 3")


@dataclass(frozen=True)
class TokenizerConfig:
    patch: int = 8
    kmeans_max_iter: int = 100
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    """Bi-directional transformer with context memory.

    Trainable parameter count (``d`` hidden, ``L`` layers, ``V`` text vocab,
    ``K`` codebook, ``T_M`` memory slots, ``P = T_text + T_image + 2``)::

        embeddings  (V + K + P + 2) d
        per layer   12 d^2 + 13 d
        final norm  2 d
        heads       (d + 1)(V + K)
        per memory  T_M d + 14 d^2 + 13 d          (summarize, GRU, fuse, fuse norm)
          path      + 4 d^2 + 4 d when awm_enabled (attentive weighting)

    ``partial_level`` has one memory path, ``all_level`` has ``L``, ``none``
    has zero. See :func:`cmota.model.parameter_count`.
    """

    layers: int = 2
    hidden: int = 64
    heads: int = 4
    t_text: int = 16
    t_image: int = 16
    text_vocab_size: int = 0
    codebook_size: int = 64
    memory_slots: int = 1
    frames: int = 5
    topology: str = "partial_level"
    awm_enabled: bool = True
    memory_in_i2t: bool = True
    memory_single_head: bool = False
    dropout: float = 0.1
    ffn_mult: int = 4
    init_std: float = 0.02
    precision: str = "float32"

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ConfigError(f"model.hidden={self.hidden} not divisible by heads={self.heads}")
        if self.memory_slots < 1:
            raise ConfigError("model.memory_slots must be at least 1")
        if self.frames < 2:
            raise ConfigError("model.frames must be at least 2")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"model.topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"model.precision must be one of {PRECISIONS}")
        if self.layers < 1 or self.codebook_size < 2:
            raise ConfigError("model needs at least one layer and a codebook of at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")

    @property
    def max_positions(self) -> int:
        return self.t_text + self.t_image + 2


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-2
    lr: float = 3e-4
    lr_per_sample: float = 0.0
    batch_size: int = 8
    epochs: int = 30
    max_steps: int = 0
    bidirectional: bool = True
    augmentation: str = "none"
    warmup_epochs: int = 3
    alternation: str = "joint"
    grad_clip: float = 1.0
    workers: int = 1
    captioner_checkpoint: str = ""
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("train.lambda1 and train.lambda2 must be non-negative")
        if self.warmup_epochs < 0:
            raise ConfigError("train.warmup_epochs must be non-negative")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"train.augmentation must be one of {AUGMENTATIONS}")
        if self.alternation not in ALTERNATIONS:
            raise ConfigError(f"train.alternation must be one of {ALTERNATIONS}")
        if self.augmentation != "none" and not self.bidirectional:
            raise ConfigError("text augmentation needs bidirectional training")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("train.batch_size and train.workers must be positive")

    @property
    def effective_lr(self) -> float:
        """``lr_per_sample * batch_size`` when set, the flat ``lr`` otherwise."""
        if self.lr_per_sample > 0:
            return self.lr_per_sample * self.batch_size
        return self.lr


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    fd_shrinkage: float = 1e-6
    max_stories: int = 0


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    preset: str = "desk"
    out: str = "runs/default"

    def validate(self) -> RunConfig:
        self.world.validate()
        self.model.validate()
        self.train.validate()
        grid = self.world.image_size // self.tokenizer.patch
        if self.world.image_size % self.tokenizer.patch:
            raise ConfigError("world.image_size must be divisible by tokenizer.patch")
        if grid * grid != self.model.t_image:
            raise ConfigError(
                f"model.t_image={self.model.t_image} but the image grid has {grid * grid} patches"
            )
        if self.model.frames != self.world.frames:
            raise ConfigError("model.frames and world.frames must agree")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hashed_payload(self) -> dict[str, Any]:
        payload = self.to_dict()
        for key in ("eval", "out", "preset"):
            payload.pop(key)
        return payload

    @property
    def config_hash(self) -> str:
        return stable_hash(self.hashed_payload())

    @property
    def data_hash(self) -> str:
        """Identity of the generated dataset: world and seed only."""
        return stable_hash({"world": dataclasses.asdict(self.world), "seed": self.seed})

    @property
    def codebook_hash(self) -> str:
        return stable_hash(
            {
                "data": self.data_hash,
                "tokenizer": dataclasses.asdict(self.tokenizer),
                "codebook_size": self.model.codebook_size,
            }
        )

    def replace(self, **sections: Any) -> RunConfig:
        """Return a copy with whole sections or nested ``section={key: value}`` updates."""
        updates: dict[str, Any] = {}
        for name, value in sections.items():
            current = getattr(self, name)
            if dataclasses.is_dataclass(current) and isinstance(value, Mapping):
                updates[name] = _build_section(
                    type(current), {**dataclasses.asdict(current), **value}, name
                )
            else:
                updates[name] = value
        return dataclasses.replace(self, **updates)


_SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "tokenizer": TokenizerConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
_TOP_LEVEL = ("seed", "preset", "out")

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "world": {"image_size": 128},
        "model": {
            "layers": 6,
            "hidden": 512,
            "heads": 16,
            "t_text": 80,
            "t_image": 256,
            "text_vocab_size": 50257,
            "codebook_size": 20480,
        },
        "train": {"lr_per_sample": 4.5e-6},
    },
}


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build_section(cls: type, values: Mapping[str, Any], section: str) -> Any:
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {
        name: _coerce(value, getattr(defaults, name), f"{section}.{name}")
        for name, value in values.items()
    }
    return cls(**kwargs)


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    """Collect ``CMOTA_SEED``/``CMOTA_OUT``/``CMOTA_PRESET`` and ``CMOTA_<SECTION>__<KEY>``."""
    result: dict[str, Any] = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if "__" in key:
            section, option = key.split("__", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"{name}: unknown config section {section!r}")
            result.setdefault(section, {})[option] = _parse_env_value(raw)
        elif key in _TOP_LEVEL:
            result[key] = raw if key != "seed" else _parse_env_value(raw)
        else:
            raise ConfigError(f"{name}: unknown environment override")
    return result


def read_config_file(path: Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_config(values: Mapping[str, Any]) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a nested mapping."""
    unknown = sorted(set(values) - set(_SECTIONS) - set(_TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = values.get(name, {})
        if not isinstance(section, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(cls, section, name)
    defaults = RunConfig()
    for name in _TOP_LEVEL:
        if name in values:
            kwargs[name] = _coerce(values[name], getattr(defaults, name), name)
    return RunConfig(**kwargs).validate()


def load_config(
    path: Path | None = None,
    *,
    preset: str | None = None,
    environ: Mapping[str, str] | None = None,
    cli: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Resolve preset, file, environment and CLI values into one config."""
    env = env_overrides(environ or {})
    file_values = read_config_file(path) if path is not None else {}
    cli_values = {k: v for k, v in (cli or {}).items() if v is not None}

    chosen = cli_values.get("preset") or env.get("preset") or file_values.get("preset") or preset
    chosen = chosen or "desk"
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {', '.join(PRESETS)}")

    merged: dict[str, Any] = _merge({"preset": chosen}, PRESETS[chosen])
    for layer in (file_values, env, cli_values):
        merged = _merge(merged, layer)
    merged["preset"] = chosen
    config = build_config(merged)
    logger.debug("Resolved config %s (preset=%s)", config.config_hash[:12], chosen)
    return config


def config_from_dict(values: Mapping[str, Any]) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used when loading checkpoints)."""
    return build_config(values)

