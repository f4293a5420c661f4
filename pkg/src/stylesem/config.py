"""Run configuration: schema-validated, version-stamped, file-based with overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_VERSION = "stylesem-config-1"


@dataclass
class WorldConfig:
    num_triplets: int = 15000
    num_users: int = 24
    sessions_per_user: int = 40
    n_history: int = 4
    k_refs: int = 4
    persona_jitter: bool = False
    retrieval_pool_size: int = 64
    gen_shards: int = 1


@dataclass
class TokenizerConfig:
    vocab_size: int = 64
    fit_corpus_size: int = 1000


@dataclass
class ModelConfig:
    d: int = 64
    n_blocks: int = 2
    latent_rows: int = 8
    context_cap: int = 128
    dtype: str = "float32"


@dataclass
class TrainConfig:
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-5
    stage1_epochs: int = 10
    stage1_batch: int = 32
    stage2_epochs: int = 10
    stage2_batch: int = 16
    alpha_s: float = 0.2
    freeze_towers_stage2: bool = False
    log_every: int = 50


@dataclass
class FlagsConfig:
    importance_sampling: bool = True
    fusion: str = "full"
    disentangler: str = "attention"


@dataclass
class EvalConfig:
    probe_seed: int = 0
    max_eval_sessions: int = 96
    ablation_seeds: tuple[int, ...] = (1, 2, 3)
    ablation_sessions: int = 16


@dataclass
class RunConfig:
    config_version: str = CONFIG_VERSION
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: FlagsConfig = field(default_factory=FlagsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                f"config version {self.config_version!r} does not match {CONFIG_VERSION!r}"
            )
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.model.dtype!r}")
        if self.flags.fusion not in ("full", "concat"):
            raise ConfigError(f"unknown fusion flag {self.flags.fusion!r}")
        if self.flags.disentangler not in ("attention", "mlp"):
            raise ConfigError(f"unknown disentangler flag {self.flags.disentangler!r}")
        if not (0.0 <= self.train.alpha_s <= 1.0):
            raise ConfigError("alpha_s must lie in [0, 1]")


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, fld in known.items():
        if name not in data:
            continue
        value = data[name]
        type_name = fld.type if isinstance(fld.type, str) else getattr(fld.type, "__name__", "")
        where = f"{path}.{name}" if path else name
        if type_name.endswith("Config"):
            kwargs[name] = _from_dict(globals()[type_name], value, where)
        elif name == "ablation_seeds":
            kwargs[name] = tuple(int(v) for v in value)
        elif type_name == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean, got {value!r}")
            kwargs[name] = value
        elif type_name == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif type_name == "float":
            try:
                kwargs[name] = float(value)  # tolerates YAML "1e-4" parsed as a string
            except (TypeError, ValueError):
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return convert(cfg)


def load_config(path: Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(path: Path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply dotted key=value overrides (flags win over the file)."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override {key!r}: unknown section {part!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = yaml.safe_load(raw)
    return config_from_dict(data)
