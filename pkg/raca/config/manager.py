"""Configuration management for raca."""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from raca.core.arena import MAX_TEAM_SIZE, ArenaConfig
from raca.utils.errors import ConfigError

# variant -> (entity pooling, relation weights, mixer)
VARIANTS: Dict[str, Tuple[str, str, str]] = {
    "raca": ("attention", "gcn", "qmix"),
    "qmix_attn": ("attention", "uniform", "qmix"),
    "qmix_gcn": ("mean", "gcn", "qmix"),
    "qmix": ("mean", "uniform", "qmix"),
    "vdn_attn": ("attention", "uniform", "vdn"),
}


_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in _TRUE + _FALSE:
        return value.strip().lower() in _TRUE
    raise ValueError(value)


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs besides the arena."""

    arena: str = "3v3_rangers"
    variant: str = "raca"
    lr: float = 5e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    grad_clip: float = 10.0
    gamma: float = 0.99
    bootstrap_truncated: bool = False
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal_steps: int = 50000
    buffer_size: int = 5000
    batch_size: int = 32
    target_interval: int = 200
    d_k: int = 64
    d_h: int = 64
    d_mix: int = 32
    d_gcn: int = 32
    action_slots: int = 16
    total_steps: int = 200000
    eval_interval: int = 10000
    eval_episodes: int = 32
    checkpoint_interval: int = 50000
    seed: int = 0
    log_level: str = "INFO"

    @property
    def pooling(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def relation(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def mixer(self) -> str:
        return VARIANTS[self.variant][2]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        values: Dict[str, Any] = {}
        for name, value in data.items():
            kind = known[name].type
            try:
                if kind in (bool, "bool"):
                    values[name] = _as_bool(value)
                elif kind in (int, "int"):
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError(value)
                    values[name] = int(value)
                elif kind in (float, "float"):
                    values[name] = float(value)
                else:
                    values[name] = str(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(name, f"cannot interpret {value!r}") from e
        config = cls(**values)
        config.validate()
        return config

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {sorted(VARIANTS)}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        if not 0.0 <= self.rms_alpha < 1.0:
            raise ConfigError("rms_alpha", "must lie in [0, 1)")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps", "must be positive")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be positive")
        for name in ("epsilon_start", "epsilon_finish"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        for name in (
            "epsilon_anneal_steps",
            "batch_size",
            "target_interval",
            "d_k",
            "d_h",
            "d_mix",
            "d_gcn",
            "eval_interval",
            "eval_episodes",
            "checkpoint_interval",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        if self.buffer_size < self.batch_size:
            raise ConfigError("buffer_size", "must hold at least one batch")
        if not 1 <= self.action_slots <= MAX_TEAM_SIZE:
            raise ConfigError("action_slots", f"must lie in [1, {MAX_TEAM_SIZE}]")
        if self.total_steps < 0:
            raise ConfigError("total_steps", "must be non-negative")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError("log_level", "unknown logging level")


class ConfigManager:
    """Manages configuration loading and validation."""

    def __init__(self):
        self.package_dir = Path(__file__).parent
        self.scenario_dir = self.package_dir / "scenarios"
        self.default_config = self._load_default_config()

    def _load_default_config(self) -> Dict[str, Any]:
        """Load default configuration from package."""
        default_path = self.package_dir / "default_config.json"
        try:
            with open(default_path, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            # Fallback if default config not found
            return RunConfig().to_dict()

    def _read(self, path: Path) -> Dict[str, Any]:
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            with open(path, "r") as f:
                if path.suffix.lower() in [".yml", ".yaml"]:
                    data = yaml.safe_load(f)
                else:
                    data = json.load(f)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError("config", f"cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must contain a mapping")
        return data

    def load_config(
        self,
        config_path: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        """Defaults, then the user file, then CLI overrides."""
        config = self.default_config.copy()
        if config_path is not None:
            config.update(self._read(config_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                config[key] = value
        return config

    def validate_config(self, config: Dict[str, Any]) -> RunConfig:
        """Validate configuration values."""
        return RunConfig.from_dict(config)

    def load_run_config(
        self,
        config_path: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> RunConfig:
        return self.validate_config(self.load_config(config_path, overrides))

    def save_config(self, config: Dict[str, Any], config_path: Path) -> None:
        """Save configuration to file."""
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, "w") as f:
            json.dump(config, f, indent=2)

    def list_scenarios(self) -> List[str]:
        return sorted(p.stem for p in self.scenario_dir.glob("*.json"))

    def resolve_arena(self, arena: str, base_dir: Optional[Path] = None) -> ArenaConfig:
        """Load an arena from a preset name or a JSON/YAML path."""
        candidate = Path(arena)
        if base_dir is not None and not candidate.is_absolute():
            relative = base_dir / candidate
            if relative.exists():
                candidate = relative
        if candidate.suffix.lower() in (".json", ".yml", ".yaml") or candidate.exists():
            return ArenaConfig.from_dict(self._read(candidate))

        preset = self.scenario_dir / f"{arena}.json"
        if not preset.exists():
            raise ConfigError(
                "arena", f"{arena!r} is neither a file nor a preset ({', '.join(self.list_scenarios())})"
            )
        return ArenaConfig.from_dict(self._read(preset))
