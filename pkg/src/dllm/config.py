"""Run configuration: published defaults plus desk-scale settings.

Config files are flat ``key=value`` lines with ``#`` comments; command-line
flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from . import goals as goals_mod


@dataclass
class Config:
    # published hyperparameters
    imagination_horizon: int = 15
    match_threshold: float = 0.5
    alpha: float = 1.0
    goals_per_query: int = 5
    batch_size: int = 16
    batch_length: int = 64
    query_interval: int = 10
    rnd_lr: float = 3e-4
    train_ratio: int = 16

    # desk-scale run shape
    env_steps: int = 200_000
    buffer_capacity: int = 100_000
    episode_limit: int = 256
    seed: int = 0
    provider: str = "scripted"  # scripted | random | remote
    remote_fallback: str = "error"  # error | scripted

    # network sizes
    embed_dim: int = 64
    hidden: int = 128
    recurrent: int = 128
    groups: int = 8
    classes: int = 8
    bins: int = 41
    bin_limit: float = 6.0
    imagine_starts: int = 128

    # optimization
    model_lr: float = 1e-3
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gamma: float = 0.997
    lam: float = 0.95
    entropy_coef: float = 3e-4
    actor_unimix: float = 0.01
    normalizer_decay: float = 0.99
    rnd_stats_decay: float = 0.99

    # ablation switches
    no_rnd_decay: bool = False
    allow_repetition: bool = False
    clamp_intrinsic_at_zero: bool = False

    # logging
    log_interval: int = 1000
    checkpoint_interval: int = 100_000

    @property
    def train_interval(self) -> int:
        """Environment steps between gradient updates so that train_ratio
        replayed steps are consumed per environment step."""
        return max(1, (self.batch_size * self.batch_length) // self.train_ratio)

    def to_file(self, path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path=None, overrides: dict | None = None) -> Config:
    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config override {key!r}")
        values[key] = value
    return Config(**values)


def validate_paper_defaults(config: Config | None = None) -> None:
    """Self-test that published hyperparameter defaults survived edits."""
    c = config or Config()
    expected = {
        "imagination_horizon": 15,
        "match_threshold": 0.5,
        "alpha": 1.0,
        "goals_per_query": 5,
        "batch_size": 16,
        "batch_length": 64,
        "query_interval": 10,
        "rnd_lr": 3e-4,
    }
    for name, value in expected.items():
        actual = getattr(c, name)
        if actual != value:
            raise AssertionError(f"default {name}={actual} drifted from {value}")
    if (goals_mod.REMOTE_TEMPERATURE, goals_mod.REMOTE_TOP_P,
            goals_mod.REMOTE_MAX_TOKENS) != (0.5, 1.0, 500):
        raise AssertionError("remote sampling fields drifted from published values")
