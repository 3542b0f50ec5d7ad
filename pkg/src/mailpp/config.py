"""Run configuration: a strict JSON document with defaults.

Unknown keys and duplicate keys are rejected outright so a typo in a
hyperparameter name cannot silently fall back to a default. Validation
errors always name the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .agents import CouplingMode
from .encoder import ALL_POSITIONS, EncoderConfig
from .training import TrainingConfig

__all__ = [
    "DataConfig",
    "RunConfig",
    "parse_config",
    "parse_config_doc",
    "ConfigError",
    "DEFAULT_CONFIG_DOC",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    pool_per_class: int = 12
    noise: float = 0.1
    text_len: int = 4

    def __post_init__(self):
        if self.pool_per_class < 1:
            raise ConfigError("data.pool_per_class must be >= 1")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")
        if self.text_len < 2:
            raise ConfigError("data.text_len must be >= 2")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    precision: str = "f32"
    seed: int | None = None
    out_dir: str | None = None

    def to_doc(self) -> dict:
        doc = {
            "precision": self.precision,
            "encoder": {
                "L": self.encoder.L,
                "d_t": self.encoder.d_t,
                "d_v": self.encoder.d_v,
                "n_heads": self.encoder.n_heads,
                "N_t": self.encoder.N_t,
                "N_v": self.encoder.N_v,
                "mlp_ratio": self.encoder.mlp_ratio,
                "eps": self.encoder.eps,
                "vocab_size": self.encoder.vocab_size,
            },
            "training": {
                "shots": self.training.shots,
                "classes": self.training.classes,
                "batch_size": self.training.batch_size,
                "steps": self.training.steps,
                "lr": self.training.lr,
                "weight_decay": self.training.weight_decay,
                "betas": list(self.training.betas),
                "adam_eps": self.training.adam_eps,
                "lambda": self.training.lam,
                "temperature": self.training.temperature,
                "mode": self.training.mode.value,
                "rank": self.training.rank,
                "d_m": self.training.d_m,
                "bridge_shift": self.training.bridge_shift,
                "positions": list(self.training.positions),
                "cosine_lr": self.training.cosine_lr,
            },
            "data": {
                "pool_per_class": self.data.pool_per_class,
                "noise": self.data.noise,
                "text_len": self.data.text_len,
            },
        }
        if self.seed is not None:
            doc["seed"] = self.seed
        if self.out_dir is not None:
            doc["out_dir"] = self.out_dir
        return doc


DEFAULT_CONFIG_DOC = RunConfig().to_doc()


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


def _expect(section: dict, path: str, known: dict) -> dict:
    out = {}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}" + (f" in section {path!r}" if path else ""))
    for key, (kind, default) in known.items():
        if key in section:
            out[key] = _coerce(section[key], kind, f"{path}.{key}" if path else key)
        else:
            out[key] = default
    return out


def _coerce(value, kind, path):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if kind == "pair":
        if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value)):
            raise ConfigError(f"{path} must be a pair of numbers")
        return (float(value[0]), float(value[1]))
    if kind == "strlist":
        if not (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            raise ConfigError(f"{path} must be a list of strings")
        return value
    raise AssertionError(kind)


_ENCODER_KEYS = {
    "L": ("int", 2),
    "d_t": ("int", 32),
    "d_v": ("int", 48),
    "n_heads": ("int", 4),
    "N_t": ("int", 8),
    "N_v": ("int", 8),
    "mlp_ratio": ("int", 4),
    "eps": ("float", 1e-5),
    "vocab_size": ("int", 64),
}

_TRAINING_KEYS = {
    "shots": ("int", 4),
    "classes": ("int", 16),
    "batch_size": ("int", 32),
    "steps": ("int", 300),
    "lr": ("float", 1.5e-4),
    "weight_decay": ("float", 0.01),
    "betas": ("pair", (0.9, 0.999)),
    "adam_eps": ("float", 1e-8),
    "lambda": ("float", 1.0),
    "temperature": ("float", 0.07),
    "mode": ("str", "bidirectional"),
    "rank": ("int", 4),
    "d_m": ("int", 16),
    "bridge_shift": ("bool", False),
    "positions": ("strlist", list(ALL_POSITIONS)),
    "cosine_lr": ("bool", False),
}

_DATA_KEYS = {
    "pool_per_class": ("int", 12),
    "noise": ("float", 0.1),
    "text_len": ("int", 4),
}

_TOP_KEYS = ("seed", "out_dir", "precision", "encoder", "training", "data")


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration, filling defaults."""
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config_doc(doc)


def parse_config_doc(doc) -> RunConfig:
    """Validate an already-decoded configuration document."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}")

    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ConfigError("seed must be an integer")
    out_dir = doc.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    precision = doc.get("precision", "f32")
    if precision not in ("f32", "f64"):
        raise ConfigError("precision must be 'f32' or 'f64'")

    for section in ("encoder", "training", "data"):
        if section in doc and not isinstance(doc[section], dict):
            raise ConfigError(f"{section} must be an object")

    enc_raw = _expect(doc.get("encoder", {}), "encoder", _ENCODER_KEYS)
    trn_raw = _expect(doc.get("training", {}), "training", _TRAINING_KEYS)
    dat_raw = _expect(doc.get("data", {}), "data", _DATA_KEYS)

    for key in ("L", "d_t", "d_v", "n_heads", "N_t", "N_v", "mlp_ratio", "vocab_size"):
        if enc_raw[key] < 1:
            raise ConfigError(f"encoder.{key} must be positive")
    if enc_raw["eps"] <= 0:
        raise ConfigError("encoder.eps must be positive")
    try:
        encoder = EncoderConfig(**enc_raw)
    except ValueError as e:
        raise ConfigError(f"encoder: {e}") from e

    try:
        mode = CouplingMode(trn_raw["mode"])
    except ValueError:
        raise ConfigError(
            f"training.mode must be one of {[m.value for m in CouplingMode]}, got {trn_raw['mode']!r}"
        ) from None

    positions = tuple(trn_raw["positions"])
    if not positions:
        raise ConfigError("training.positions must not be empty")
    if len(set(positions)) != len(positions):
        raise ConfigError("training.positions contains duplicates")
    for p in positions:
        if p not in ALL_POSITIONS:
            raise ConfigError(f"training.positions: unknown position {p!r}")

    if trn_raw["d_m"] < 1:
        raise ConfigError("training.d_m must be positive")
    if trn_raw["rank"] < 1:
        raise ConfigError("training.rank must be positive")
    if mode in (CouplingMode.TEXT_TO_IMAGE, CouplingMode.IMAGE_TO_TEXT):
        bound = min(encoder.d_t, encoder.d_v)
        if trn_raw["rank"] > bound:
            raise ConfigError(f"training.rank {trn_raw['rank']} exceeds min(d_t, d_v) = {bound}")
    if mode == CouplingMode.BIDIRECTIONAL:
        bound = min(encoder.d_t, encoder.d_v, trn_raw["d_m"])
        if trn_raw["rank"] > bound:
            raise ConfigError(f"training.rank {trn_raw['rank']} exceeds min(d_t, d_v, d_m) = {bound}")

    try:
        training = TrainingConfig(
            shots=trn_raw["shots"],
            classes=trn_raw["classes"],
            batch_size=trn_raw["batch_size"],
            steps=trn_raw["steps"],
            lr=trn_raw["lr"],
            weight_decay=trn_raw["weight_decay"],
            betas=trn_raw["betas"],
            adam_eps=trn_raw["adam_eps"],
            lam=trn_raw["lambda"],
            temperature=trn_raw["temperature"],
            mode=mode,
            rank=trn_raw["rank"],
            d_m=trn_raw["d_m"],
            bridge_shift=trn_raw["bridge_shift"],
            positions=positions,
            cosine_lr=trn_raw["cosine_lr"],
        )
    except ValueError as e:
        raise ConfigError(f"training: {e}") from e

    try:
        data = DataConfig(**dat_raw)
    except ValueError as e:
        raise ConfigError(f"data: {e}") from e

    # cross-section consistency
    if training.classes + 2 > encoder.vocab_size:
        raise ConfigError(
            f"encoder.vocab_size {encoder.vocab_size} too small for training.classes {training.classes}"
            " (needs classes + 2 token ids)"
        )
    if training.classes > encoder.d_v:
        raise ConfigError(f"training.classes {training.classes} exceeds encoder.d_v {encoder.d_v} prototypes")
    if data.text_len > encoder.N_t:
        raise ConfigError(f"data.text_len {data.text_len} exceeds encoder.N_t {encoder.N_t}")
    if training.shots > data.pool_per_class:
        raise ConfigError(f"training.shots {training.shots} exceeds data.pool_per_class {data.pool_per_class}")
    if training.bridge_shift and mode == CouplingMode.IVLU:
        raise ConfigError("training.bridge_shift requires a coupled mode")

    return RunConfig(
        encoder=encoder,
        training=training,
        data=data,
        precision=precision,
        seed=seed,
        out_dir=out_dir,
    )
