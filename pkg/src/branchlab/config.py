"""Flat dotted-key configuration: one ``key = value`` pair per line.

CLI ``--set key=value`` flags override file values; the effective config is
echoed into the run root and its hash stamped into every artifact so stages
refuse to mix outputs of different configurations.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

DEFAULTS: dict[str, str] = {
    "run.root": "runs/default",
    "run.seed": "0",
    "family.name": "multi-knapsack",
    "family.n": "16",
    "family.m": "3",
    "family.density": "1.0",
    "family.train_count": "200",
    "family.valid_count": "40",
    "family.test_count": "50",
    "hybrid.db0_mode": "auto",
    "hybrid.db0_value": "0.0",
    "hybrid.r0": "0.5",
    "pc.epsilon": "1e-6",
    "collect.max_nodes": "40",
    "collect.max_clock": "4000",
    "select.gamma": "1.0",
    "select.ridge": "1e-4",
    "select.penalty": "1000.0",
    "select.p": "15.0",
    "select.epochs": "25",
    "select.lr": "1e-4",
    "train.lr": "0.02",
    "train.batch": "32",
    "train.epochs": "40",
    "train.checkpoint_every": "10",
    "train.valid_fraction": "0.2",
    "eval.max_nodes": "400",
    "eval.max_clock": "50000",
    "eval.clock_mode": "pseudo",
    "eval.workers": "1",
    "eval.baselines": "random",
}


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    @classmethod
    def load(cls, path: str | Path | None = None,
             overrides: list[str] | None = None) -> "Config":
        values = dict(DEFAULTS)
        if path is not None:
            for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
                values[key] = value
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set needs key=value, got {item!r}")
            key, value = (part.strip() for part in item.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return cls(values)

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a real, got {self.values[key]!r}") from None

    def canonical_text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def write_effective(self, run_root: str | Path) -> Path:
        root = Path(run_root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / "config.effective.txt"
        path.write_text(self.canonical_text())
        return path
