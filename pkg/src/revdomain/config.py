"""Flat ``key=value`` run configuration: defaults, then a file, then flag overrides."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str  # int, float, ints, str
    default: Any
    check: Callable[[Any], bool]
    rule: str


def _ints(v):
    return all(i >= 1 for i in v) and len(v) >= 1


def positive(v):
    return v > 0


def non_negative(v):
    return v >= 0


FIELDS: Dict[str, Field] = {
    # rendering
    "image_width": Field("int", 64, lambda v: v >= 8, ">= 8"),
    "image_height": Field("int", 64, lambda v: v >= 8, ">= 8"),
    "fov_degrees": Field("float", 120.0, lambda v: 60 < v < 170, "in (60, 170)"),
    "light_power": Field("float", 0.35, positive, "> 0"),
    "fold_amplitude": Field("float", 0.12, lambda v: 0 <= v < 0.4, "in [0, 0.4)"),
    "texture_strength": Field("float", 0.6, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "texture_noise": Field("float", 0.7, non_negative, ">= 0"),
    "texture_streak_weight": Field("float", 1.6, non_negative, ">= 0"),
    "texture_streaks": Field("int", 25, non_negative, ">= 0"),
    "texture_streak_width": Field("float", 1.0, positive, "> 0"),
    "n_synth": Field("int", 546, positive, ">= 1"),
    "n_pseudo": Field("int", 260, positive, ">= 1"),
    # superpixels and graph
    "p_target": Field("int", 64, lambda v: v >= 2, ">= 2"),
    "compactness": Field("float", 0.1, positive, "> 0"),
    "histogram_bins": Field("int", 16, lambda v: v >= 2, ">= 2"),
    "gamma_intensity": Field("float", 10.0, positive, "> 0"),
    "gamma_histogram": Field("float", 5.0, positive, "> 0"),
    # depth model
    "depth_conv_channels": Field("ints", (8, 16, 16), _ints, "positive integers"),
    "depth_hidden": Field("ints", (32, 16), _ints, "positive integers"),
    "depth_epochs": Field("int", 20, positive, ">= 1"),
    "depth_lr": Field("float", 1e-5, positive, "> 0"),
    "momentum": Field("float", 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
    "weight_decay": Field("float", 0.0007, non_negative, ">= 0"),
    "lr_decay_factor": Field("float", 0.8, lambda v: 0 < v <= 1, "in (0, 1]"),
    "lr_decay_every": Field("int", 20, positive, ">= 1"),
    "lambda_beta": Field("float", 0.0007, non_negative, ">= 0"),
    "beta_init": Field("float", 1.0, non_negative, ">= 0"),
    "depth_val_max": Field("int", 40, non_negative, ">= 0"),
    # adaptation
    "lambda": Field("float", 0.5, positive, "> 0"),
    "n_t": Field("int", 2, positive, ">= 1"),
    "n_d": Field("int", 1, positive, ">= 1"),
    "da_steps": Field("int", 2000, positive, ">= 1"),
    "batch_size": Field("int", 8, lambda v: v >= 2 and v % 2 == 0, "even and >= 2"),
    "pretrain_t": Field("int", 800, non_negative, ">= 0"),
    "pretrain_d": Field("int", 200, non_negative, ">= 0"),
    "lr_t": Field("float", 1e-3, positive, "> 0"),
    "lr_d": Field("float", 2e-3, positive, "> 0"),
    "da_momentum": Field("float", 0.9, lambda v: 0 <= v < 1, "in [0, 1)"),
    "buffer_capacity": Field("int", 128, positive, ">= 1"),
    "da_channels": Field("int", 64, positive, ">= 1"),
    "da_blocks": Field("int", 10, non_negative, ">= 0"),
    "disc_channels": Field("ints", (8, 8, 16, 16, 16), lambda v: _ints(v) and len(v) == 5, "five positive integers"),
    "crop": Field("int", 0, lambda v: v == 0 or (v >= 8 and v % 4 == 0), "0 or a multiple of 4 that is >= 8"),
    "log_every": Field("int", 50, non_negative, ">= 0"),
    "heldout_paired": Field("int", 50, positive, ">= 1"),
    # provenance
    "seed": Field("int", 0, non_negative, ">= 0"),
}


def _parse(key: str, raw: str):
    f = FIELDS[key]
    raw = raw.strip()
    try:
        if f.kind == "int":
            value = int(raw)
        elif f.kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
        elif f.kind == "ints":
            value = tuple(int(t) for t in raw.split(",") if t.strip())
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {f.kind}") from None
    if not f.check(value):
        raise ConfigError(f"config key '{key}': value {raw} out of range (must be {f.rule})")
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings; keys are listed in ``FIELDS``."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._values = {k: f.default for k, f in FIELDS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        self._values[key] = _parse(key, value if isinstance(value, str) else _format(value))

    def update(self, pairs: Iterable[str], source="flag") -> "RunConfig":
        for item in pairs:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"{source}: expected key=value, got {item!r}")
            self.set(key.strip(), value)
        return self

    def __getitem__(self, key):
        return self._values[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def dumps(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self._values.items())

    def echo(self, out_dir, name="resolved_config.cfg") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def read_pairs(path) -> list:
    """Non-blank, non-comment lines of a config file."""
    lines = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        lines.append(line)
    return lines


def config_load(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg.update(read_pairs(path), source=str(path))
    return cfg.update(overrides)
