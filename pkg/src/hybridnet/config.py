"""Run configuration: profiles, flat ``key=value`` files and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


PROFILES: dict[str, dict[str, object]] = {
    "gastrovision": {"preset": "tiny", "lr": 1e-2, "image_size": 224, "batch": 32, "epochs": 50},
    "kvasir-capsule": {"preset": "tiny", "lr": 1e-3, "image_size": 224, "batch": 32,
                       "epochs": 50},
    "desk": {"preset": "desk", "lr": 1e-3, "image_size": 32, "batch": 8, "epochs": 5},
    "custom": {},
}


@dataclass
class RunConfig:
    profile: str = "custom"
    seed: int | None = None
    data_root: str | None = None
    train_split: str | None = None
    test_split: str | None = None
    out: str = "runs/latest"
    preset: str = "tiny"
    image_size: int = 224
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 50
    optimizer: str = "adam"
    augment: bool = True
    folds: int = 5
    cv_scope: str = "full"
    patience: int = 3
    factor: float = 0.1
    min_lr: float = 1e-6
    min_delta: float = 1e-4

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.seed is None:
            raise ConfigError("a seed is required (--seed N or seed= in the config file)")
        has_splits = self.train_split is not None or self.test_split is not None
        if has_splits and (self.train_split is None or self.test_split is None):
            raise ConfigError("--train-split and --test-split must be given together")
        if not has_splits and self.data_root is None:
            raise ConfigError("no data source: give --data-root or --train-split/--test-split")
        if self.preset not in ("tiny", "desk"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.cv_scope not in ("full", "train"):
            raise ConfigError("cv_scope must be 'full' or 'train'")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")

    @property
    def uses_splits(self) -> bool:
        return self.train_split is not None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = str(types[name])
    if "bool" in t:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    try:
        if "int" in t:
            return int(raw)
        if "float" in t:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = _coerce(key.replace("-", "_"), raw)
    return values


def resolve(config_path: str | None, overrides: dict[str, object]) -> RunConfig:
    """Profile defaults < config file < explicit flags."""
    file_values: dict[str, object] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(encoding="utf-8"))
    flags = {k: v for k, v in overrides.items() if v is not None}
    profile = str(flags.get("profile", file_values.get("profile", "custom")))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    merged: dict[str, object] = dict(PROFILES[profile])
    merged.update(file_values)
    merged.update(flags)
    merged["profile"] = profile
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg
