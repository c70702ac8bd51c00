"""Flat ``key=value`` run configuration with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .model import Hyperparams
from .train import Schedule


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fanout(text: str):
    low = text.strip().lower()
    return None if low in ("none", "inf", "unbounded", "") else int(low)


def _opt_str(text: str):
    return text.strip() or None


# every accepted key and how its value is parsed; defaults live on RunConfig
KEYS: dict = {
    "train_file": _opt_str,
    "test_file": _opt_str,
    "synth_users": int,
    "synth_items": int,
    "synth_blocks": int,
    "synth_p_in": float,
    "synth_p_out": float,
    "dim": int,
    "layers": int,
    "tau": float,
    "guide_mode": str,
    "beta_mode": str,
    "lambda": float,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "eval_every": int,
    "patience": int,
    "fanout": _fanout,
    "seed": int,
    "out_dir": str,
    "deterministic": _bool,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    train_file: str | None = None
    test_file: str | None = None
    synth_users: int | None = None
    synth_items: int | None = None
    synth_blocks: int = 2
    synth_p_in: float = 0.3
    synth_p_out: float = 0.02
    dim: int = 64
    layers: int = 2
    tau: float = 1.0
    guide_mode: str = "interactive"
    beta_mode: str = "mean"
    l2: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1000
    eval_every: int = 10
    patience: int = 5
    fanout: int | None = None
    out_dir: str = "run"
    deterministic: bool = True

    @property
    def uses_files(self) -> bool:
        return self.train_file is not None or self.test_file is not None

    @property
    def dataset_name(self) -> str:
        if self.uses_files:
            return Path(self.train_file).resolve().parent.name or "files"
        return f"synth{self.synth_users}x{self.synth_items}b{self.synth_blocks}"

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            dim=self.dim,
            layers=self.layers,
            tau=self.tau,
            guide_mode=self.guide_mode,
            beta_mode=self.beta_mode,
            l2=self.l2,
            lr=self.lr,
            fanout=self.fanout,
        )

    def schedule(self) -> Schedule:
        return Schedule(
            batch_size=self.batch_size,
            epochs=self.epochs,
            eval_every=self.eval_every,
            patience=self.patience,
            deterministic=self.deterministic,
        )

    def to_text(self) -> str:
        """Resolved config in the same format :func:`parse_config_text` reads."""
        lines = []
        for key in KEYS:
            value = getattr(self, _attr(key))
            if value is None:
                text = "none" if key == "fanout" else ""
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"


def _attr(key: str) -> str:
    return "l2" if key == "lambda" else key


def parse_pairs(lines, source: str) -> dict:
    """``key=value`` lines to a raw mapping; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    return parse_pairs(text.splitlines(), source)


def resolve(raw: dict) -> RunConfig:
    """Typed config from raw strings; checks mandatory keys and hyperparameter domains."""
    values = {}
    for key, value in raw.items():
        parser = KEYS[key]
        try:
            values[_attr(key)] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
    if values.get("seed") is None:
        raise ConfigError("seed is mandatory")
    cfg = RunConfig(**values)
    if cfg.uses_files:
        if cfg.train_file is None or cfg.test_file is None:
            raise ConfigError("train_file and test_file must be given together")
    elif cfg.synth_users is None or cfg.synth_items is None:
        raise ConfigError("need train_file/test_file or synth_users/synth_items")
    try:
        cfg.hyperparams()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name in ("batch_size", "epochs", "eval_every", "patience"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    return cfg


def load_config(path: str | os.PathLike | None, overrides=()) -> RunConfig:
    """Read ``path`` (optional), apply ``key=value`` overrides in order, resolve."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    raw.update(parse_pairs(overrides, "<command line>"))
    return resolve(raw)


def check_paths(cfg: RunConfig):
    for path in (cfg.train_file, cfg.test_file):
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")

