"""Key=value configuration with file, flag, and environment layering.

Precedence, lowest to highest: built-in defaults, config file, CLI flags,
then the SSR_SEED environment variable (which overrides the seed from any
source).
"""
from __future__ import annotations

import os

from .errors import DataError

DEFAULTS = {
    "seed": 0,
    "backend": "ctc",
    "omega": 1.0,
    "cif_threshold": 1.0,
    "frame_duration_ms": 20.0,
    "input_dim": 8,
    "model_dim": 32,
    "layers": 4,
    "heads": 4,
    "ffn_dim": 64,
    "max_len": 512,
    "vocab_size": 0,  # 0 means infer from the corpus
    "tied_output": False,
    "use_blockwise": False,
    "cos_weight": 5.0,
    "distill_lr": 1e-5,
    "finetune_lr": 1e-6,
    "distill_steps": 1000,
    "finetune_steps": 500,
    "token_budget": 512,
    "mix_probability": 0.5,
    "workers": 1,
}

SEED_ENV_VAR = "SSR_SEED"


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise DataError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as exc:
            raise DataError(f"config key {key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as exc:
            raise DataError(f"config key {key}: expected a number, got {raw!r}") from exc
    return text.strip("\"'")


def load_config_file(path) -> dict:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path}:{line_no}: expected key=value, got {line.rstrip()!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise DataError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def resolve_config(config_path=None, overrides=None, env=None) -> dict:
    """Merge defaults, file values, flag overrides, and the seed env var."""
    env = os.environ if env is None else env
    merged = dict(DEFAULTS)
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise DataError(f"unknown config key {key!r}")
        merged[key] = value
    seed_env = env.get(SEED_ENV_VAR)
    if seed_env is not None:
        merged["seed"] = _coerce("seed", seed_env)
    return merged


def format_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
