"""Tracker and training configuration plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    n_points: int = 1024
    k_tokens: int = 32
    d_model: int = 128
    l_mu: int = 3
    l_mfr: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    knn_k: int = 16
    tau_mask: float = 0.5
    confidence_floor: float = 0.2
    search_margin_xy: float = 2.0
    search_margin_z: float = 1.0

    def __post_init__(self):
        for name in ("n_points", "k_tokens", "d_model", "l_mu", "l_mfr", "n_heads", "knn_k",
                     "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("tau_mask", "confidence_floor"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.search_margin_xy < 0 or self.search_margin_z < 0:
            raise ConfigError("search margins must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def n_seeds(self) -> int:
        n = self.n_points
        for _ in range(3):
            n = -(-n // 2)
        return n

    @property
    def encoder_widths(self) -> tuple[int, int, int]:
        d = self.d_model
        return (max(d // 2, 1), d, d)


@dataclass(frozen=True)
class TrainConfig:
    window: int = 8
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.2
    decay_every: int = 15
    epochs: int = 30
    steps_per_epoch: int = 50
    tau_dist: float = 0.3
    tau_cycle: float = 0.1
    lambda_m: float = 1.0
    lambda_c: float = 1.0
    use_tc: bool = True
    use_mcc: bool = True
    use_dec: bool = True
    ref_jitter_xy: float = 0.3
    ref_jitter_z: float = 0.05
    ref_jitter_theta: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        if self.lr <= 0 or self.tau_dist < 0 or self.tau_cycle <= 0:
            raise ConfigError("rates and temperatures must be positive")
        if self.batch_size <= 0 or self.epochs < 0 or self.steps_per_epoch <= 0:
            raise ConfigError("batch_size/steps_per_epoch must be positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


def _coerce(raw: str, kind, key: str):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def parse_config(text: str) -> tuple[TrackerConfig, TrainConfig]:
    """Parse ``key = value`` lines into both configs; ``#`` starts a comment."""
    tr_types, tn_types = _field_types(TrackerConfig), _field_types(TrainConfig)
    tr, tn = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in tr_types:
            tr[key] = _coerce(value, tr_types[key], key)
        elif key in tn_types:
            tn[key] = _coerce(value, tn_types[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return TrackerConfig(**tr), TrainConfig(**tn)


def load_config(path) -> tuple[TrackerConfig, TrainConfig]:
    return parse_config(Path(path).read_text())


def format_config(tracker: TrackerConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for cfg in (tracker, train):
        if cfg is None:
            continue
        for k, v in dataclasses.asdict(cfg).items():
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"
