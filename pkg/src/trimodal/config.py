"""Plain-text key-value run configuration with schema validation.

Config files hold ``key = value`` lines (``#`` comments allowed).  Every
key is validated against the schema below; unknown keys are rejected so a
typo cannot silently fall back to a default.  Command-line overrides win
over file values, which win over defaults.  The only environment input is
``TRIMODAL_OUT_ROOT``, an optional root for relative output directories.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["CONFIG_SCHEMA", "RunConfig", "load_config_file", "build_config",
           "resolve_out_dir", "ConfigError"]


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# key -> (parser, default)
CONFIG_SCHEMA = {
    "hidden_dim": (int, 512),
    "heads": (int, 8),
    "n_blocks": (int, 4),
    "encoder_depth": (int, 2),
    "region_a": (int, 2),
    "region_b": (int, 2),
    "mask_ratio": (float, 0.15),
    "tau_init": (float, 0.07),
    "margin": (float, 1.0),
    "alpha": (float, 1.0),
    "beta": (float, 1.0),
    "lr": (float, 1e-3),
    "batch_size": (int, 16),
    "epochs": (int, 10),
    "seed": (int, 0),
    "mlm_switch_period": (int, 10),
    "clip_grad_norm": (float, 0.0),   # 0 disables clipping
    "triplet_cap": (int, 64),
    "n_time_bins": (int, 4),
    "freeze_fusion": (_parse_bool, False),
    "use_type_embeddings": (_parse_bool, True),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self):
        return dict(self.values)


def load_config_file(path):
    """Parse a key-value config file; unknown keys raise ConfigError."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser = CONFIG_SCHEMA[key][0]
            try:
                out[key] = parser(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return out


def build_config(file_path=None, overrides=None):
    """Defaults <- config file <- overrides, all schema-checked."""
    values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, raw in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = CONFIG_SCHEMA[key][0]
        values[key] = parser(raw) if not isinstance(raw, (int, float, bool)) \
            else parser(raw)
    return RunConfig(values)


def resolve_out_dir(path):
    """Relative output dirs live under TRIMODAL_OUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get("TRIMODAL_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p
