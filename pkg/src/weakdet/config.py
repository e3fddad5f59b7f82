"""Detector training configuration.

Values resolve in increasing precedence: dataclass defaults, a flat key=value
config file, WEAKDET_* environment variables, explicit overrides (CLI flags).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

ENV_PREFIX = "WEAKDET_"


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 2
    refinements: int = 3
    nms_iou: float = 0.4
    refine_iou: float = 0.5
    scales: tuple[int, ...] = (400, 600, 800, 1200)
    max_proposals: int = 500
    seed: int = 0
    steps: int = 1000
    eval_interval: int = 200
    score_floor: float = 0.05
    last_head_only: bool = False
    filters: int = 8
    kernel: int = 3

    def __post_init__(self):
        if isinstance(self.scales, list):
            self.scales = tuple(self.scales)
        if not self.scales:
            raise ValueError("scales must be nonempty")
        positive = ("lr", "batch_size", "nms_iou", "refine_iou", "max_proposals", "steps",
                    "eval_interval", "filters", "kernel")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.refinements < 0:
            raise ValueError("refinements must be >= 0")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: (list(self.scales) if f.name == "scales" else getattr(self, f.name))
                for f in fields(self)}


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    if kind is bool or name == "last_head_only":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: cannot parse boolean from {raw!r}")
    if name == "scales":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_train_config(config_path=None, env=None, overrides: dict | None = None) -> TrainConfig:
    env = os.environ if env is None else env
    merged: dict = {}
    if config_path:
        merged.update(parse_config_file(config_path))
    for f in fields(TrainConfig):
        env_key = ENV_PREFIX + f.name.upper()
        if env_key in env:
            merged[f.name] = env[env_key]
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    known = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(merged) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, raw in merged.items():
        kind = {"lr": float, "nms_iou": float, "refine_iou": float, "score_floor": float,
                "last_head_only": bool, "scales": tuple}.get(name, int)
        kwargs[name] = _coerce(name, kind, raw)
    return TrainConfig(**kwargs)
